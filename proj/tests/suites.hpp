#pragma once

// Randomized property suites shared by the unit tests and the acceptance
// binary. Each returns the worst observed error per case so callers can both
// assert and report.

#include <functional>
#include <string>
#include <vector>

#include "oracles.hpp"

namespace suites {

using namespace nestedflow;

struct CaseResult {
  std::string name;
  double worst = 0.0;       ///< worst observed error (meaning depends on the suite)
  std::size_t checked = 0;  ///< number of individual comparisons
  bool ok = true;
};

inline FlowModel single(Transform t, std::size_t d) {
  FlowModel m;
  m.dim = d;
  m.transforms.push_back(std::move(t));
  return m;
}

inline Matrix gaussian_rows(std::size_t n, std::size_t d, Rng& rng, double scale = 1.0) {
  Matrix x(n, d);
  for (auto& v : x.data()) v = scale * rng.normal();
  return x;
}

/// Random transform of the requested kind at dimension d.
inline Transform random_transform(const std::string& kind, std::size_t d, Rng& rng) {
  if (kind == "lu-linear") return oracle::random_lu(d, rng);
  if (kind == "qr-linear") return oracle::random_qr(d, rng);
  if (kind == "offset") {
    OffsetTransform t = OffsetTransform::zero(d);
    for (auto& v : t.shift.data()) v = rng.normal();
    return t;
  }
  return oracle::random_coupling(d, rng);
}

/// Relative-error comparison of reverse-mode and central-difference
/// gradients. Records the worst |a - f| / max(|f|, floor / rel).
inline void compare_gradients(CaseResult& res, const DifferentiableLoss& loss,
                              const ParameterVector& theta) {
  const GradientRecord rec = evaluate_with_gradient(loss, theta);
  const std::vector<double> fd = finite_difference_gradient(loss, theta.values());
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const double err = std::abs(rec.gradient[i] - fd[i]);
    const double scaled = err / std::max(std::abs(fd[i]), 1e-8 / 1e-4);
    res.worst = std::max(res.worst, scaled);
    res.ok = res.ok && oracle::grad_close(rec.gradient[i], fd[i]);
    ++res.checked;
  }
}

/// Gradients of NLL plus a weighted inverse pass, for every transform kind,
/// and of the combined nested-dropout loss on composed flows.
inline std::vector<CaseResult> gradient_suite(std::size_t instances, std::uint64_t seed = 2024) {
  std::vector<CaseResult> out;
  Rng rng(seed);
  for (const std::string kind : {"lu-linear", "qr-linear", "offset", "affine-coupling"}) {
    CaseResult res{kind};
    for (std::size_t trial = 0; trial < instances; ++trial) {
      const std::size_t d = kind == "affine-coupling" ? 3 + rng.index(4) : 1 + rng.index(5);
      const FlowModel m = single(random_transform(kind, d, rng), d);
      const Matrix x = gaussian_rows(4, d, rng);
      const Matrix z = gaussian_rows(4, d, rng);
      const Matrix w = gaussian_rows(4, d, rng);
      const DifferentiableLoss loss = [&](ad::Graph& g, ad::Var theta) {
        const auto p = bind_parameters(m, theta);
        const ad::Var nll = nll_objective(g, m, p, g.constant(x));
        const ad::Var inv = flow_inverse(g, m, p, g.constant(z));
        return ad::add(nll, ad::scale(ad::sum(ad::mul(inv, g.constant(w))), 0.1));
      };
      compare_gradients(res, loss, m.parameters());
    }
    out.push_back(res);
  }

  CaseResult combined{"combined-loss"};
  for (std::size_t trial = 0; trial < instances; ++trial) {
    FlowModel m;
    std::size_t d;
    if (trial % 2 == 0) {
      d = 3;
      m = make_qr_flow(d, rng.next_u64(), 3, true, 0.3);
      for (auto& v : std::get<OffsetTransform>(m.transforms[1]).shift.data()) v = rng.normal();
    } else {
      d = 4;
      m = make_multiscale_coupling_flow(d, MultiScaleConfig{2, 2, 6, 2.0}, rng.next_u64());
      for (auto& t : m.transforms)
        for (auto& v : std::get<AffineCouplingTransform>(t).w3.data()) v = 0.3 * rng.normal();
      m.transforms.insert(m.transforms.begin(), oracle::random_lu(d, rng));
    }
    NestedDropoutConfig cfg;
    cfg.lambda = 20.0;
    cfg.schedule = {0.33, d};
    cfg.order = random_order(d, rng);
    const Matrix x = gaussian_rows(6, d, rng);
    const auto ks = sample_ks(cfg.schedule, x.rows(), rng);
    compare_gradients(combined, make_combined_loss(m, x, &cfg, ks), m.parameters());
  }
  out.push_back(combined);
  return out;
}

/// Round trips in both directions for every kind at every listed dimension.
inline std::vector<CaseResult> invertibility_suite(std::size_t instances,
                                                   std::uint64_t seed = 77) {
  std::vector<CaseResult> out;
  Rng rng(seed);
  for (const std::string kind : {"lu-linear", "qr-linear", "offset", "affine-coupling"}) {
    for (std::size_t d : {1u, 3u, 8u, 16u}) {
      if (kind == "affine-coupling" && d < 2) continue;
      CaseResult res{kind + " D=" + std::to_string(d)};
      for (std::size_t trial = 0; trial < instances; ++trial) {
        const FlowModel m = single(random_transform(kind, d, rng), d);
        const Matrix x = gaussian_rows(5, d, rng);
        const Matrix back = flow_inverse(m, flow_forward(m, x).latents);
        const Matrix fwd = flow_forward(m, flow_inverse(m, x)).latents;
        const double err = std::max(oracle::max_abs_diff(back.data(), x.data()),
                                    oracle::max_abs_diff(fwd.data(), x.data()));
        res.worst = std::max(res.worst, err);
        res.ok = res.ok && err <= 1e-8;
        ++res.checked;
      }
      out.push_back(res);
    }
  }
  return out;
}

/// Linear kinds against the explicit determinant of the assembled matrix;
/// couplings against the finite-difference Jacobian.
inline std::vector<CaseResult> logdet_suite(std::size_t instances, std::uint64_t seed = 99) {
  std::vector<CaseResult> out;
  Rng rng(seed);
  for (const std::string kind : {"lu-linear", "qr-linear"}) {
    CaseResult res{kind + " vs explicit det"};
    for (std::size_t d : {1u, 3u, 8u, 16u})
      for (std::size_t trial = 0; trial < instances; ++trial) {
        const Transform t = random_transform(kind, d, rng);
        const Matrix w = std::visit(
            [](const auto& x) -> Matrix {
              using T = std::decay_t<decltype(x)>;
              if constexpr (std::is_same_v<T, LULinearTransform> ||
                            std::is_same_v<T, QRLinearTransform>)
                return oracle::assemble(x);
              else
                return Matrix();
            },
            t);
        Vector x(d);
        for (auto& v : x) v = rng.normal();
        const TransformResult r = std::visit(
            [&](const auto& tt) { return transform_forward(tt, x); }, t);
        const double expected = std::log(std::abs(oracle::determinant(w)));
        const double err = std::abs(r.log_abs_det_jacobian - expected);
        // The assembled matrix must also be the map the transform applies.
        const double map_err = oracle::max_abs_diff(r.output, oracle::apply(w, x));
        res.worst = std::max(res.worst, err);
        res.ok = res.ok && err <= 1e-10 && map_err <= 1e-10 * std::max(1.0, norm_inf(r.output));
        ++res.checked;
      }
    out.push_back(res);
  }
  CaseResult coup{"affine-coupling vs FD Jacobian"};
  for (std::size_t d : {3u, 8u, 16u})
    for (std::size_t trial = 0; trial < instances; ++trial) {
      const AffineCouplingTransform t = oracle::random_coupling(d, rng);
      Vector x(d);
      for (auto& v : x) v = rng.normal();
      const TransformResult r = transform_forward(t, x);
      const Matrix j = oracle::jacobian(
          [&](const Vector& p) { return transform_forward(t, p).output; }, x);
      const double err = std::abs(r.log_abs_det_jacobian - std::log(std::abs(oracle::determinant(j))));
      coup.worst = std::max(coup.worst, err);
      coup.ok = coup.ok && err <= 1e-4;
      ++coup.checked;
    }
  out.push_back(coup);
  return out;
}

/// Total variation between the empirical pmf of `draws` samples and the
/// clamped geometric pmf.
inline double geometric_tv(double p, std::size_t k, std::size_t draws, std::uint64_t seed) {
  const GeometricSchedule s{p, k};
  Rng rng(seed);
  std::vector<double> counts(k, 0.0);
  for (std::size_t i = 0; i < draws; ++i) counts[sample_k(s, rng) - 1] += 1.0;
  const auto pmf = s.pmf();
  double tv = 0.0;
  for (std::size_t j = 0; j < k; ++j) tv += std::abs(counts[j] / static_cast<double>(draws) - pmf[j]);
  return 0.5 * tv;
}

}  // namespace suites
