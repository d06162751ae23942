#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "nestedflow/errors.hpp"
#include "nestedflow/flow.hpp"
#include "nestedflow/nested_dropout.hpp"
#include "nestedflow/rng.hpp"

namespace nestedflow {

inline constexpr std::size_t kEvalChunk = 4096;

namespace detail {

template <class Fn>
void for_each_chunk(const Matrix& x, Fn&& fn) {
  const std::size_t d = x.cols();
  for (std::size_t begin = 0; begin < x.rows(); begin += kEvalChunk) {
    const std::size_t end = std::min(x.rows(), begin + kEvalChunk);
    Matrix chunk(end - begin, d,
                 std::vector<double>(x.data().begin() + static_cast<std::ptrdiff_t>(begin * d),
                                     x.data().begin() + static_cast<std::ptrdiff_t>(end * d)));
    fn(chunk);
  }
}

}  // namespace detail

struct LikelihoodSummary {
  double mean_nats = 0.0;
  double ci95_half_width = 0.0;  ///< 1.96 standard errors
};

inline LikelihoodSummary log_likelihood_summary(const FlowModel& m, const Matrix& x) {
  if (x.rows() == 0) throw DomainError("avg_log_likelihood: empty split");
  double sum = 0.0, sum_sq = 0.0;
  detail::for_each_chunk(x, [&](const Matrix& chunk) {
    for (double ll : flow_log_likelihood(m, chunk)) {
      sum += ll;
      sum_sq += ll * ll;
    }
  });
  const double n = static_cast<double>(x.rows());
  const double mean = sum / n;
  const double var = std::max(0.0, sum_sq / n - mean * mean);
  return {mean, 1.96 * std::sqrt(var / n)};
}

/// Mean log-likelihood in nats.
inline double avg_log_likelihood(const FlowModel& m, const Matrix& x) {
  return log_likelihood_summary(m, x).mean_nats;
}

/// -ll / (D ln 2).
inline double bits_per_dim(double ll_nats, std::size_t d) {
  if (d < 1) throw DomainError("bits_per_dim: D must be at least 1");
  return -ll_nats / (static_cast<double>(d) * std::numbers::ln2);
}

/// Entry k-1 is the mean per-dimension squared error of reconstructions
/// keeping the first k ranks of `order`.
inline std::vector<double> mse_curve(const FlowModel& m, const Matrix& x,
                                     std::span<const std::size_t> order) {
  validate_order(order, m.dim);
  if (x.rows() == 0) throw DomainError("mse_curve: empty split");
  const ParameterVector params = m.parameters();
  std::vector<double> acc(m.dim, 0.0);
  detail::for_each_chunk(x, [&](const Matrix& chunk) {
    ad::Graph g;
    const auto p = bind_parameters(m, g.constant(Matrix::row(params.values())));
    const ad::Var xv = g.constant(chunk);
    const ad::Var z = flow_forward(g, m, p, xv).output;
    std::vector<std::size_t> ks(chunk.rows());
    for (std::size_t k = 1; k <= m.dim; ++k) {
      std::fill(ks.begin(), ks.end(), k);
      const ad::Var recon =
          flow_inverse(g, m, p, ad::mul(z, g.constant(truncation_mask(ks, order))));
      acc[k - 1] += ad::sum(distance_rows(xv, recon, Distance::per_dimension_mse)).scalar();
    }
  });
  for (auto& a : acc) a /= static_cast<double>(x.rows());
  return acc;
}

/// f^{-1}(truncate(z, k)) with z from the base density.
inline Vector truncated_sample(const FlowModel& m, std::size_t k,
                               std::span<const std::size_t> order, Rng& rng) {
  const Matrix z = standard_normal_batch(1, m.dim, rng);
  return flow_inverse(m, Matrix::row(truncate(z.data(), k, order))).data();
}

inline Matrix truncated_sample(const FlowModel& m, std::size_t n, std::size_t k,
                               std::span<const std::size_t> order, Rng& rng) {
  validate_order(order, m.dim);
  Matrix z = standard_normal_batch(n, m.dim, rng);
  std::vector<std::size_t> ks(n, k);
  const Matrix mask = truncation_mask(ks, order);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] *= mask[i];
  return flow_inverse(m, z);
}

struct PhaseTiming {
  double train_seconds = 0.0;
  double train_seconds_per_step = 0.0;
  double eval_seconds = 0.0;
};

struct RunReport {
  std::string label;  ///< "baseline" or "nested-dropout"
  std::string model_kind;
  std::size_t dimension = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string build_id;
  std::size_t iterations = 0;
  double test_ll_nats = 0.0;
  double test_ll_ci95 = 0.0;
  double test_bpd = 0.0;
  double train_ll_nats = 0.0;
  double final_loss = 0.0;
  std::string eval_split = "test";
  std::map<std::string, std::vector<double>> mse_curves;
  std::map<std::string, DropOrder> drop_orders;
  nlohmann::json nd = nullptr;
  nlohmann::json provenance = nlohmann::json::object();
  /// Not serialized into the report so reports stay bit-reproducible; see
  /// timing_to_json.
  PhaseTiming wall_clock;
};

/// Deterministic part of the report.
inline nlohmann::json report_to_json(const RunReport& r) {
  return {{"label", r.label},
          {"model_kind", r.model_kind},
          {"dimension", r.dimension},
          {"seed", r.seed},
          {"config_hash", r.config_hash},
          {"build_id", r.build_id},
          {"iterations", r.iterations},
          {"test_ll_nats", r.test_ll_nats},
          {"test_ll_ci95", r.test_ll_ci95},
          {"test_bpd", r.test_bpd},
          {"train_ll_nats", r.train_ll_nats},
          {"final_loss", r.final_loss},
          {"eval_split", r.eval_split},
          {"mse_curves", r.mse_curves},
          {"drop_orders", r.drop_orders},
          {"nd", r.nd},
          {"provenance", r.provenance}};
}

inline nlohmann::json timing_to_json(const PhaseTiming& t) {
  return {{"train_seconds", t.train_seconds},
          {"train_seconds_per_step", t.train_seconds_per_step},
          {"eval_seconds", t.eval_seconds}};
}

}  // namespace nestedflow
