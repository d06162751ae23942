#pragma once

#include <algorithm>
#include <vector>

#include "nestedflow/errors.hpp"
#include "nestedflow/linalg.hpp"

namespace nestedflow {

struct PCAModel {
  Vector mean;
  Matrix components;  ///< row i is the i-th principal direction
  Vector eigenvalues; ///< descending, clamped at zero

  std::size_t dim() const noexcept { return mean.size(); }

  /// mean + sum_{i<k} c_i c_i^T (x - mean).
  Vector reconstruct(std::span<const double> x, std::size_t k) const {
    if (k < 1 || k > dim()) throw DomainError("PCAModel::reconstruct: k must lie in [1, D]");
    if (x.size() != dim()) throw DomainError("PCAModel::reconstruct: dimension mismatch");
    Vector centered(dim());
    for (std::size_t j = 0; j < dim(); ++j) centered[j] = x[j] - mean[j];
    Vector out = mean;
    for (std::size_t i = 0; i < k; ++i) {
      const auto c = components.row_span(i);
      const double coef = dot(c, centered);
      for (std::size_t j = 0; j < dim(); ++j) out[j] += coef * c[j];
    }
    return out;
  }
};

/// Sample covariance with denominator N, then eigendecomposition.
inline PCAModel pca_fit(const Matrix& points) {
  const std::size_t n = points.rows();
  const std::size_t d = points.cols();
  if (n < 2) throw DomainError("pca_fit: need at least two points");
  Vector mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += points(i, j);
  for (auto& m : mean) m /= static_cast<double>(n);
  Matrix cov(d, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = points(i, a) - mean[a];
      for (std::size_t b = a; b < d; ++b) cov(a, b) += xa * (points(i, b) - mean[b]);
    }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      cov(a, b) /= static_cast<double>(n);
      cov(b, a) = cov(a, b);
    }
  const SymmetricEigen eig = symmetric_eigendecompose(cov);
  PCAModel m{std::move(mean), eig.vectors.transposed(), eig.values};
  for (auto& w : m.eigenvalues) w = std::max(w, 0.0);
  return m;
}

/// Mean over rows of |x - reconstruct_k(x)|^2 / D.
inline double pca_mse(const PCAModel& m, const Matrix& points, std::size_t k) {
  if (k < 1 || k > m.dim()) throw DomainError("pca_mse: k must lie in [1, D]");
  if (points.rows() == 0) throw DomainError("pca_mse: empty data");
  double acc = 0.0;
  for (std::size_t i = 0; i < points.rows(); ++i) {
    const auto x = points.row_span(i);
    const Vector r = m.reconstruct(x, k);
    for (std::size_t j = 0; j < m.dim(); ++j) acc += (x[j] - r[j]) * (x[j] - r[j]);
  }
  return acc / (static_cast<double>(points.rows()) * static_cast<double>(m.dim()));
}

inline std::vector<double> pca_mse_curve(const PCAModel& m, const Matrix& points) {
  std::vector<double> out(m.dim());
  for (std::size_t k = 1; k <= m.dim(); ++k) out[k - 1] = pca_mse(m, points, k);
  return out;
}

}  // namespace nestedflow
