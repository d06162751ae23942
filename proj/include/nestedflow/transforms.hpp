#pragma once

// Invertible linear transforms and the additive offset.
//
// Each transform stores its trainable parameters as named Matrix blocks and
// exposes them through `blocks()`, in a fixed order. Tape evaluation takes
// the matching ad::Var for every block in that same order, so the same code
// serves plain evaluation (constant blocks) and training (variable blocks).

#include <array>
#include <cmath>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "nestedflow/errors.hpp"
#include "nestedflow/grad.hpp"
#include "nestedflow/linalg.hpp"
#include "nestedflow/rng.hpp"

namespace nestedflow {

/// Output of a tape evaluation: transformed rows and log|det J| as an N x 1
/// column, or 1 x 1 when it does not depend on the input.
struct TapeResult {
  ad::Var output;
  ad::Var log_det;
};

/// Output of a single-point evaluation.
struct TransformResult {
  Vector output;
  double log_abs_det_jacobian = 0.0;
};

struct NamedBlock {
  std::string_view name;
  Matrix* value;
};
struct ConstNamedBlock {
  std::string_view name;
  const Matrix* value;
};

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
  Matrix m(rows, cols);
  for (auto& x : m.data()) x = scale * rng.normal();
  return m;
}

inline void check_permutation(std::span<const std::size_t> perm, std::size_t n, const char* what) {
  if (perm.size() != n) throw DomainError(std::string(what) + ": permutation has wrong length");
  std::vector<bool> seen(n, false);
  for (std::size_t i : perm) {
    if (i >= n || seen[i]) throw DomainError(std::string(what) + ": not a permutation");
    seen[i] = true;
  }
}

inline std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

/// z = P L U x with P a fixed permutation, L unit lower-triangular and U upper
/// triangular with diag(U) = exp(s). Row i of P selects coordinate
/// permutation[i], i.e. (P y)_i = y_{permutation[i]}.
struct LULinearTransform {
  static constexpr std::string_view kind = "lu-linear";

  std::size_t dim = 0;
  std::vector<std::size_t> permutation;
  Matrix lower;          ///< 1 x D(D-1)/2, strictly-lower entries row by row
  Matrix upper_offdiag;  ///< 1 x D(D-1)/2, strictly-upper entries row by row
  Matrix upper_logdiag;  ///< 1 x D

  static LULinearTransform identity(std::size_t d) {
    LULinearTransform t;
    t.dim = d;
    t.permutation.resize(d);
    for (std::size_t i = 0; i < d; ++i) t.permutation[i] = i;
    t.lower = Matrix(1, d * (d - 1) / 2);
    t.upper_offdiag = Matrix(1, d * (d - 1) / 2);
    t.upper_logdiag = Matrix(1, d);
    return t;
  }

  /// Uniformly random fixed permutation; triangular parameters at identity
  /// plus Gaussian noise.
  static LULinearTransform random(std::size_t d, Rng& rng, double noise = 1e-2) {
    LULinearTransform t = identity(d);
    t.permutation = rng.permutation(d);
    t.lower = gaussian_matrix(1, d * (d - 1) / 2, noise, rng);
    t.upper_offdiag = gaussian_matrix(1, d * (d - 1) / 2, noise, rng);
    t.upper_logdiag = gaussian_matrix(1, d, noise, rng);
    return t;
  }

  void validate() const {
    check_permutation(permutation, dim, "LULinearTransform");
    if (lower.size() != dim * (dim - 1) / 2 || upper_offdiag.size() != lower.size() ||
        upper_logdiag.size() != dim)
      throw DomainError("LULinearTransform: parameter block sizes do not match dimension");
  }

  std::array<NamedBlock, 3> blocks() {
    return {{{"L", &lower}, {"U_offdiag", &upper_offdiag}, {"U_logdiag", &upper_logdiag}}};
  }
  std::array<ConstNamedBlock, 3> blocks() const {
    return {{{"L", &lower}, {"U_offdiag", &upper_offdiag}, {"U_logdiag", &upper_logdiag}}};
  }

  TapeResult forward(ad::Graph&, std::span<const ad::Var> p, ad::Var x) const {
    const ad::Var l = ad::unit_lower(p[0], dim);
    const ad::Var u = ad::upper_exp(p[1], p[2], dim);
    const ad::Var y = ad::matmul_bt(ad::matmul_bt(x, u), l);
    return {ad::select_cols(y, permutation), ad::sum(p[2])};
  }

  ad::Var inverse(ad::Graph&, std::span<const ad::Var> p, ad::Var z) const {
    const ad::Var l = ad::unit_lower(p[0], dim);
    const ad::Var u = ad::upper_exp(p[1], p[2], dim);
    const ad::Var y = ad::select_cols(z, inverse_permutation(permutation));
    const ad::Var w = ad::triangular_solve_rows(l, y, Triangle::lower, Diagonal::unit);
    return ad::triangular_solve_rows(u, w, Triangle::upper);
  }
};

/// z = Q R x with Q = H_n ... H_1 a product of Householder reflections and R
/// upper triangular with diag(R) = exp(s).
struct QRLinearTransform {
  static constexpr std::string_view kind = "qr-linear";

  std::size_t dim = 0;
  Matrix householder;    ///< n x D, row j is the vector of H_{j+1}
  Matrix upper_offdiag;  ///< 1 x D(D-1)/2
  Matrix upper_logdiag;  ///< 1 x D

  std::size_t reflections() const noexcept { return householder.rows(); }

  /// Reflection vectors uniform on the unit sphere; R at identity plus noise.
  static QRLinearTransform random(std::size_t d, std::size_t reflections, Rng& rng,
                                  double noise = 1e-2) {
    if (reflections == 0) throw DomainError("QRLinearTransform: need at least one reflection");
    QRLinearTransform t;
    t.dim = d;
    t.householder = Matrix(reflections, d);
    for (std::size_t j = 0; j < reflections; ++j) {
      double norm = 0.0;
      do {
        for (auto& x : t.householder.row_span(j)) x = rng.normal();
        const auto r = t.householder.row_span(j);
        norm = std::sqrt(dot(r, r));
      } while (norm < 1e-12);
      for (auto& x : t.householder.row_span(j)) x /= norm;
    }
    t.upper_offdiag = gaussian_matrix(1, d * (d - 1) / 2, noise, rng);
    t.upper_logdiag = gaussian_matrix(1, d, noise, rng);
    return t;
  }

  void validate() const {
    if (householder.cols() != dim || householder.rows() == 0 ||
        upper_offdiag.size() != dim * (dim - 1) / 2 || upper_logdiag.size() != dim)
      throw DomainError("QRLinearTransform: parameter block sizes do not match dimension");
    for (std::size_t j = 0; j < householder.rows(); ++j) {
      const auto r = householder.row_span(j);
      if (!(dot(r, r) > 0.0)) throw DomainError("QRLinearTransform: zero reflection vector");
    }
  }

  std::array<NamedBlock, 3> blocks() {
    return {{{"v", &householder}, {"R_offdiag", &upper_offdiag}, {"R_logdiag", &upper_logdiag}}};
  }
  std::array<ConstNamedBlock, 3> blocks() const {
    return {{{"v", &householder}, {"R_offdiag", &upper_offdiag}, {"R_logdiag", &upper_logdiag}}};
  }

  TapeResult forward(ad::Graph&, std::span<const ad::Var> p, ad::Var x) const {
    const ad::Var r = ad::upper_exp(p[1], p[2], dim);
    ad::Var y = ad::matmul_bt(x, r);
    for (std::size_t j = 0; j < reflections(); ++j)
      y = ad::householder_rows(ad::slice(p[0], j * dim, 1, dim), y);
    return {y, ad::sum(p[2])};
  }

  ad::Var inverse(ad::Graph&, std::span<const ad::Var> p, ad::Var z) const {
    const ad::Var r = ad::upper_exp(p[1], p[2], dim);
    ad::Var y = z;
    for (std::size_t j = reflections(); j-- > 0;)
      y = ad::householder_rows(ad::slice(p[0], j * dim, 1, dim), y);
    return ad::triangular_solve_rows(r, y, Triangle::upper);
  }
};

/// z = x + b. Volume preserving.
struct OffsetTransform {
  static constexpr std::string_view kind = "offset";

  std::size_t dim = 0;
  Matrix shift;  ///< 1 x D

  static OffsetTransform zero(std::size_t d) { return {d, Matrix(1, d)}; }

  void validate() const {
    if (shift.size() != dim) throw DomainError("OffsetTransform: shift size mismatch");
  }

  std::array<NamedBlock, 1> blocks() { return {{{"shift", &shift}}}; }
  std::array<ConstNamedBlock, 1> blocks() const { return {{{"shift", &shift}}}; }

  TapeResult forward(ad::Graph& g, std::span<const ad::Var> p, ad::Var x) const {
    return {ad::add(x, p[0]), g.constant(Matrix(1, 1))};
  }
  ad::Var inverse(ad::Graph&, std::span<const ad::Var> p, ad::Var z) const {
    return ad::sub(z, p[0]);
  }
};

}  // namespace nestedflow
