#pragma once

// Affine coupling transforms and the bookkeeping of a flat multi-scale
// architecture.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "nestedflow/errors.hpp"
#include "nestedflow/grad.hpp"
#include "nestedflow/transforms.hpp"

namespace nestedflow {

/// Affine coupling over an active subset of the coordinates.
///
/// The active coordinates are partitioned into an identity set A and a
/// transformed set B. Coordinates outside the active subset pass through
/// untouched and do not condition anything (they were split off by an
/// earlier multi-scale level). A conditioner network maps x_A to a shift t
/// and a bounded log-scale s = c * tanh(raw / c), and
///   z_B = x_B * exp(s(x_A)) + t(x_A),   log|det J| = sum(s).
struct AffineCouplingTransform {
  static constexpr std::string_view kind = "affine-coupling";

  std::size_t dim = 0;
  std::vector<std::size_t> identity_set;
  std::vector<std::size_t> transformed_set;
  std::size_t hidden = 32;
  double log_scale_bound = 2.0;

  // Conditioner: tanh(x_A W1 + b1) -> tanh(. W2 + b2) -> . W3 + b3, whose
  // output columns are [shift | raw log-scale].
  Matrix w1, b1, w2, b2, w3, b3;

  std::size_t identity_size() const noexcept { return identity_set.size(); }
  std::size_t transformed_size() const noexcept { return transformed_set.size(); }

  /// Hidden layers drawn with 1/sqrt(fan_in) Gaussian weights; the final
  /// layer is zero so the transform starts as the identity.
  static AffineCouplingTransform make(std::size_t dim, std::vector<std::size_t> identity,
                                      std::vector<std::size_t> transformed, std::size_t hidden,
                                      double bound, Rng& rng) {
    AffineCouplingTransform t;
    t.dim = dim;
    t.identity_set = std::move(identity);
    t.transformed_set = std::move(transformed);
    t.hidden = hidden;
    t.log_scale_bound = bound;
    const std::size_t na = t.identity_size();
    const std::size_t nb = t.transformed_size();
    t.w1 = gaussian_matrix(na, hidden, 1.0 / std::sqrt(static_cast<double>(na)), rng);
    t.b1 = Matrix(1, hidden);
    t.w2 = gaussian_matrix(hidden, hidden, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    t.b2 = Matrix(1, hidden);
    t.w3 = Matrix(hidden, 2 * nb);
    t.b3 = Matrix(1, 2 * nb);
    t.validate();
    return t;
  }

  void validate() const {
    if (identity_set.empty() || transformed_set.empty())
      throw DomainError("AffineCouplingTransform: identity and transformed sets must be nonempty");
    std::vector<bool> seen(dim, false);
    for (const auto* set : {&identity_set, &transformed_set})
      for (std::size_t i : *set) {
        if (i >= dim || seen[i])
          throw DomainError("AffineCouplingTransform: sets must be disjoint and within range");
        seen[i] = true;
      }
    if (!(log_scale_bound > 0.0))
      throw DomainError("AffineCouplingTransform: log-scale bound must be positive");
    const std::size_t na = identity_size(), nb = transformed_size();
    if (w1.rows() != na || w1.cols() != hidden || b1.size() != hidden || w2.rows() != hidden ||
        w2.cols() != hidden || b2.size() != hidden || w3.rows() != hidden ||
        w3.cols() != 2 * nb || b3.size() != 2 * nb)
      throw DomainError("AffineCouplingTransform: conditioner shapes are inconsistent");
  }

  std::array<NamedBlock, 6> blocks() {
    return {{{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2}, {"w3", &w3}, {"b3", &b3}}};
  }
  std::array<ConstNamedBlock, 6> blocks() const {
    return {{{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2}, {"w3", &w3}, {"b3", &b3}}};
  }

  struct ShiftLogScale {
    ad::Var shift;
    ad::Var log_scale;
  };

  ShiftLogScale conditioner(std::span<const ad::Var> p, ad::Var xa) const {
    const ad::Var h1 = ad::tanh(ad::add(ad::matmul(xa, p[0]), p[1]));
    const ad::Var h2 = ad::tanh(ad::add(ad::matmul(h1, p[2]), p[3]));
    const ad::Var out = ad::add(ad::matmul(h2, p[4]), p[5]);
    const std::size_t nb = transformed_size();
    std::vector<std::size_t> shift_cols(nb), scale_cols(nb);
    std::iota(shift_cols.begin(), shift_cols.end(), 0);
    std::iota(scale_cols.begin(), scale_cols.end(), nb);
    const ad::Var raw = ad::select_cols(out, std::move(scale_cols));
    const ad::Var s =
        ad::scale(ad::tanh(ad::scale(raw, 1.0 / log_scale_bound)), log_scale_bound);
    return {ad::select_cols(out, std::move(shift_cols)), s};
  }

  TapeResult forward(ad::Graph&, std::span<const ad::Var> p, ad::Var x) const {
    const auto [t, s] = conditioner(p, ad::select_cols(x, identity_set));
    const ad::Var xb = ad::select_cols(x, transformed_set);
    const ad::Var zb = ad::add(ad::mul(xb, ad::exp(s)), t);
    return {ad::scatter_cols(x, transformed_set, zb), ad::sum_rows(s)};
  }

  ad::Var inverse(ad::Graph&, std::span<const ad::Var> p, ad::Var z) const {
    const auto [t, s] = conditioner(p, ad::select_cols(z, identity_set));
    const ad::Var zb = ad::select_cols(z, transformed_set);
    const ad::Var xb = ad::mul(ad::sub(zb, t), ad::exp(ad::neg(s)));
    return ad::scatter_cols(z, transformed_set, xb);
  }
};

/// Flat multi-scale wiring: level l acts on `levels[l]` (active variables);
/// after each level except the last, the first half (rounded down) of the
/// active variables is set aside. depth_rank[i] counts the levels
/// variable i passed through.
struct MultiScaleLayout {
  std::size_t dim = 0;
  std::vector<std::vector<std::size_t>> levels;
  std::vector<std::size_t> depth_rank;

  static MultiScaleLayout make(std::size_t dim, std::size_t num_levels) {
    if (dim == 0 || num_levels == 0) throw DomainError("MultiScaleLayout: empty layout");
    MultiScaleLayout m;
    m.dim = dim;
    m.depth_rank.assign(dim, 0);
    std::vector<std::size_t> active(dim);
    std::iota(active.begin(), active.end(), 0);
    for (std::size_t l = 0; l < num_levels; ++l) {
      if (active.size() < 2)
        throw DomainError("MultiScaleLayout: too many levels for the dimension");
      m.levels.push_back(active);
      for (std::size_t i : active) ++m.depth_rank[i];
      if (l + 1 < num_levels) active.erase(active.begin(), active.begin() + active.size() / 2);
    }
    return m;
  }
};

/// Ranks variables by descending depth, ties by ascending index. Entry r is
/// the latent index kept at ordering rank r + 1.
inline std::vector<std::size_t> multiscale_depth_order(const MultiScaleLayout& m) {
  std::vector<std::size_t> order(m.dim);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return m.depth_rank[a] > m.depth_rank[b];
  });
  return order;
}

}  // namespace nestedflow
