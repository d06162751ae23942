#include <gtest/gtest.h>

#include <cmath>

#include "suites.hpp"

using namespace nestedflow;

TEST(Coupling, ZeroFinalLayerIsIdentity) {
  Rng rng(1);
  const auto t = AffineCouplingTransform::make(6, {0, 2, 4}, {1, 3, 5}, 32, 2.0, rng);
  const Vector x{0.3, -1, 2, 0.5, -0.7, 4};
  const TransformResult r = coupling_forward(t, x);
  EXPECT_EQ(r.output, x);
  EXPECT_EQ(r.log_abs_det_jacobian, 0.0);
}

TEST(Coupling, ConstantConditionerAffineArithmetic) {
  Rng rng(2);
  auto t = AffineCouplingTransform::make(2, {0}, {1}, 4, 2.0, rng);
  // Zero the hidden weights so the conditioner output equals b3, then pick
  // raw log-scale so that the bounded value is exactly log 2.
  for (auto& v : t.w3.data()) v = 0.0;
  const double c = t.log_scale_bound;
  t.b3[0] = 1.0;                                // shift
  t.b3[1] = c * std::atanh(std::log(2.0) / c);  // raw log-scale
  const TransformResult r = coupling_forward(t, Vector{0.25, 3.0});
  EXPECT_NEAR(r.output[1], 7.0, 1e-12);
  EXPECT_DOUBLE_EQ(r.output[0], 0.25);
  EXPECT_NEAR(r.log_abs_det_jacobian, std::log(2.0), 1e-12);
}

TEST(Coupling, LogScaleIsBounded) {
  Rng rng(3);
  auto t = oracle::random_coupling(4, rng);
  for (auto& v : t.b3.data()) v = 1e3;
  const TransformResult r = coupling_forward(t, Vector{1, 2, 3, 4});
  EXPECT_LE(std::abs(r.log_abs_det_jacobian), 2.0 * t.log_scale_bound + 1e-12);
}

TEST(Coupling, LogDetMatchesNumericalJacobian) {
  const auto cases = suites::logdet_suite(5, 12);
  EXPECT_TRUE(cases.back().ok) << cases.back().worst;
}

TEST(Coupling, RoundTripAtSeveralDimensions) {
  Rng rng(4);
  for (std::size_t d : {2u, 3u, 8u, 16u})
    for (int trial = 0; trial < 20; ++trial) {
      const auto t = oracle::random_coupling(d, rng);
      Vector x(d);
      for (auto& v : x) v = rng.normal();
      EXPECT_LE(oracle::max_abs_diff(coupling_inverse(t, coupling_forward(t, x).output), x), 1e-8);
      EXPECT_LE(oracle::max_abs_diff(coupling_forward(t, coupling_inverse(t, x)).output, x), 1e-8);
    }
}

TEST(Coupling, InactiveCoordinatesPassThroughAndDoNotCondition) {
  Rng rng(5);
  auto t = AffineCouplingTransform::make(5, {3}, {4}, 8, 2.0, rng);
  for (auto& v : t.w3.data()) v = rng.normal();
  const Vector x{1, 2, 3, 0.5, -1};
  Vector y = x;
  y[0] = -9;
  y[1] = 40;
  const auto rx = coupling_forward(t, x), ry = coupling_forward(t, y);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(rx.output[i], x[i]);
  EXPECT_EQ(rx.output[4], ry.output[4]);
  EXPECT_EQ(rx.log_abs_det_jacobian, ry.log_abs_det_jacobian);
}

TEST(Coupling, RejectsOverlappingSets) {
  Rng rng(6);
  EXPECT_THROW(AffineCouplingTransform::make(4, {0, 1}, {1, 2}, 4, 2.0, rng), DomainError);
  EXPECT_THROW(AffineCouplingTransform::make(4, {}, {1, 2}, 4, 2.0, rng), DomainError);
}

TEST(MultiScale, SingleLevelGivesIdentityOrder) {
  EXPECT_EQ(multiscale_depth_order(MultiScaleLayout::make(5, 1)), identity_order(5));
}

TEST(MultiScale, TwoLevelsPutDeepVariablesFirst) {
  const auto order = multiscale_depth_order(MultiScaleLayout::make(8, 2));
  EXPECT_EQ(std::set<std::size_t>(order.begin(), order.begin() + 4), (std::set<std::size_t>{4, 5, 6, 7}));
}

TEST(MultiScale, ThreeLevelsOnSixteenLeaveLastQuarterDeepest) {
  const MultiScaleLayout layout = MultiScaleLayout::make(16, 3);
  const auto order = multiscale_depth_order(layout);
  EXPECT_EQ((DropOrder(order.begin(), order.begin() + 4)), (DropOrder{12, 13, 14, 15}));
  for (std::size_t i : {12u, 13u, 14u, 15u}) EXPECT_EQ(layout.depth_rank[i], 3u);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(layout.depth_rank[i], 1u);
}

TEST(MultiScale, BuilderAlternatesHalvesAndStartsAsIdentity) {
  const FlowModel m = make_multiscale_coupling_flow(16, MultiScaleConfig{}, 3);
  EXPECT_EQ(m.transforms.size(), 12u);
  Rng rng(7);
  const Matrix x = suites::gaussian_rows(10, 16, rng);
  const BatchForward f = flow_forward(m, x);
  EXPECT_EQ(f.latents, x);
  for (double v : f.log_det) EXPECT_EQ(v, 0.0);
  const auto& last = std::get<AffineCouplingTransform>(m.transforms.back());
  for (std::size_t i : last.identity_set) EXPECT_GE(i, 12u);
  for (std::size_t i : last.transformed_set) EXPECT_GE(i, 12u);
}

TEST(MultiScale, TooManyLevelsRejected) {
  EXPECT_THROW(MultiScaleLayout::make(4, 3), DomainError);
}
