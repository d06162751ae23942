#pragma once

// Nested dropout for flows: a geometric truncation index, latent truncation
// along a drop order, reconstruction through the inverse flow, and the
// likelihood-plus-reconstruction training objective.

#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nestedflow/errors.hpp"
#include "nestedflow/flow.hpp"
#include "nestedflow/grad.hpp"
#include "nestedflow/rng.hpp"

namespace nestedflow {

/// Geometric pmf (1-p)^{k-1} p on k = 1..K with the tail mass beyond K
/// placed on k = K.
struct GeometricSchedule {
  double p = 0.33;
  std::size_t latent_dim = 1;

  void validate() const {
    if (!(p > 0.0 && p <= 1.0)) throw DomainError("GeometricSchedule: p must lie in (0, 1]");
    if (latent_dim < 1) throw DomainError("GeometricSchedule: K must be at least 1");
  }

  std::vector<double> pmf() const {
    validate();
    std::vector<double> out(latent_dim);
    double survive = 1.0;
    for (std::size_t j = 0; j + 1 < latent_dim; ++j) {
      out[j] = survive * p;
      survive *= 1.0 - p;
    }
    out[latent_dim - 1] = survive;
    return out;
  }
};

/// Draws k in [1, K] by inverting the geometric CDF, then clamping.
inline std::size_t sample_k(const GeometricSchedule& s, Rng& rng) {
  s.validate();
  if (s.p == 1.0) return 1;
  const double failures = std::floor(std::log(rng.uniform_open()) / std::log1p(-s.p));
  if (!(failures < static_cast<double>(s.latent_dim - 1))) return s.latent_dim;
  return static_cast<std::size_t>(failures) + 1;
}

/// Permutation mapping ordering rank (0-based) to latent index. Rank 0 is
/// kept first and dropped last.
using DropOrder = std::vector<std::size_t>;

inline DropOrder identity_order(std::size_t k) {
  DropOrder o(k);
  std::iota(o.begin(), o.end(), 0);
  return o;
}

inline DropOrder reversed_order(std::size_t k) {
  DropOrder o(k);
  for (std::size_t i = 0; i < k; ++i) o[i] = k - 1 - i;
  return o;
}

inline DropOrder random_order(std::size_t k, Rng& rng) { return rng.permutation(k); }

inline void validate_order(std::span<const std::size_t> order, std::size_t k) {
  check_permutation(order, k, "drop order");
}

/// Keeps the coordinates at ranks 1..k, zeroes the rest.
inline Vector truncate(std::span<const double> z, std::size_t k, std::span<const std::size_t> order) {
  validate_order(order, z.size());
  if (k < 1 || k > z.size()) throw DomainError("truncate: k must lie in [1, K]");
  Vector out(z.size(), 0.0);
  for (std::size_t r = 0; r < k; ++r) out[order[r]] = z[order[r]];
  return out;
}

/// 0/1 mask with row n keeping ranks 1..ks[n].
inline Matrix truncation_mask(std::span<const std::size_t> ks, std::span<const std::size_t> order) {
  const std::size_t dim = order.size();
  Matrix mask(ks.size(), dim);
  for (std::size_t n = 0; n < ks.size(); ++n) {
    if (ks[n] < 1 || ks[n] > dim) throw DomainError("truncation_mask: k must lie in [1, K]");
    for (std::size_t r = 0; r < ks[n]; ++r) mask(n, order[r]) = 1.0;
  }
  return mask;
}

enum class Distance {
  per_dimension_mse,  ///< |x - x~|^2 / D
  squared_error,      ///< |x - x~|^2
};

struct NestedDropoutConfig {
  double lambda = 20.0;
  GeometricSchedule schedule;
  DropOrder order;
  Distance distance = Distance::per_dimension_mse;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda))
      throw DomainError("NestedDropoutConfig: lambda must be nonnegative");
    schedule.validate();
    validate_order(order, schedule.latent_dim);
  }
};

/// Row-wise f^{-1}(mask * f(x)).
inline ad::Var reconstruct_rows(ad::Graph& g, const FlowModel& m, const BoundParameters& p,
                                ad::Var x, const Matrix& mask) {
  const TapeResult fwd = flow_forward(g, m, p, x);
  return flow_inverse(g, m, p, ad::mul(fwd.output, g.constant(mask)));
}

inline Vector reconstruct(const FlowModel& m, std::span<const double> x, std::size_t k,
                          std::span<const std::size_t> order) {
  validate_order(order, m.dim);
  const std::size_t ks[] = {k};
  ad::Graph g;
  const auto p = bind_parameters(m, g.constant(Matrix::row(m.parameters().values())));
  return reconstruct_rows(g, m, p, g.constant(Matrix::row(x)), truncation_mask(ks, order))
      .value()
      .data();
}

/// Row-wise distance between x and its reconstruction, N x 1.
inline ad::Var distance_rows(ad::Var x, ad::Var recon, Distance d) {
  const ad::Var se = ad::sum_rows(ad::square(ad::sub(x, recon)));
  return d == Distance::per_dimension_mse ? ad::scale(se, 1.0 / static_cast<double>(x.cols()))
                                          : se;
}

struct LossTerms {
  ad::Var total;                 ///< mean(-log p) + lambda * mean(d), 1 x 1
  ad::Var nll;                   ///< mean(-log p), 1 x 1
  std::optional<ad::Var> recon;  ///< mean(d), 1 x 1; absent when lambda = 0
};

/// Mean negative log-likelihood of the rows of x.
inline ad::Var nll_objective(ad::Graph& g, const FlowModel& m, const BoundParameters& p,
                             ad::Var x) {
  return ad::neg(ad::mean(flow_log_likelihood_rows(g, m, p, x)));
}

namespace detail {

[[noreturn]] inline void rethrow_at_datapoint(const NonFiniteError& e) {
  std::string msg = e.what();
  if (e.row()) msg = "datapoint " + std::to_string(*e.row()) + ": " + msg;
  throw NonFiniteError(msg, e.op(), e.row());
}

}  // namespace detail

/// Combined objective for given truncation indices, one per row. With
/// cfg == nullptr or lambda == 0 this is exactly nll_objective.
inline LossTerms combined_loss_terms(ad::Graph& g, const FlowModel& m, const BoundParameters& p,
                                     ad::Var x, const NestedDropoutConfig* cfg,
                                     std::span<const std::size_t> ks) {
  if (x.rows() == 0) throw DomainError("combined_loss: empty batch");
  try {
    if (cfg == nullptr || cfg->lambda == 0.0) {
      const ad::Var nll = nll_objective(g, m, p, x);
      return {nll, nll, std::nullopt};
    }
    if (ks.size() != x.rows()) throw DomainError("combined_loss: one k per datapoint required");
    // NLL and reconstruction share the forward pass.
    const TapeResult fwd = flow_forward(g, m, p, x);
    const ad::Var ll = ad::add(standard_normal_logpdf_rows(fwd.output), fwd.log_det);
    const ad::Var mask = g.constant(truncation_mask(ks, cfg->order));
    const ad::Var recon = flow_inverse(g, m, p, ad::mul(fwd.output, mask));
    const ad::Var d = distance_rows(x, recon, cfg->distance);
    const ad::Var per_point = ad::add(ad::neg(ll), ad::scale(d, cfg->lambda));
    return {ad::mean(per_point), ad::neg(ad::mean(ll)), ad::mean(d)};
  } catch (const NonFiniteError& e) {
    detail::rethrow_at_datapoint(e);
  }
}

inline std::vector<std::size_t> sample_ks(const GeometricSchedule& s, std::size_t n, Rng& rng) {
  std::vector<std::size_t> ks(n);
  for (auto& k : ks) k = sample_k(s, rng);
  return ks;
}

/// Single-sample estimate of the combined objective on a batch, with one
/// truncation index drawn per datapoint.
inline double combined_loss(const FlowModel& m, const Matrix& batch, const NestedDropoutConfig& cfg,
                            Rng& rng) {
  cfg.validate();
  const auto ks = sample_ks(cfg.schedule, batch.rows(), rng);
  ad::Graph g;
  const auto p = bind_parameters(m, g.constant(Matrix::row(m.parameters().values())));
  return combined_loss_terms(g, m, p, g.constant(batch), &cfg, ks).total.scalar();
}

inline double combined_loss(const FlowModel& m, const Matrix& batch, const NestedDropoutConfig& cfg,
                            std::span<const std::size_t> ks) {
  cfg.validate();
  ad::Graph g;
  const auto p = bind_parameters(m, g.constant(Matrix::row(m.parameters().values())));
  return combined_loss_terms(g, m, p, g.constant(batch), &cfg, ks).total.scalar();
}

/// The combined objective as a differentiable function of the flat
/// parameters, for fixed batch and truncation indices.
inline DifferentiableLoss make_combined_loss(const FlowModel& m, const Matrix& batch,
                                             const NestedDropoutConfig* cfg,
                                             std::vector<std::size_t> ks) {
  return [&m, &batch, cfg, ks = std::move(ks)](ad::Graph& g, ad::Var theta) {
    const auto p = bind_parameters(m, theta);
    return combined_loss_terms(g, m, p, g.constant(batch), cfg, ks).total;
  };
}

}  // namespace nestedflow
