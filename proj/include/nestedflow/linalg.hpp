#pragma once

// Small dense real linear algebra: row-major matrices, triangular solves,
// Householder reflections and a cyclic Jacobi eigensolver. Sized for
// dimensions up to a few dozen.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nestedflow/errors.hpp"

namespace nestedflow {

using Vector = std::vector<double>;

/// Dense row-major matrix. Also the value type of every autodiff node.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DomainError("Matrix: data size does not match shape");
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DomainError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }
  static Matrix row(std::span<const double> v) {
    return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row_span(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  Vector row_vector(std::size_t r) const {
    auto s = row_span(r);
    return Vector(s.begin(), s.end());
  }
  Vector col_vector(std::size_t c) const {
    Vector v(rows_);
    for (std::size_t r = 0; r < rows_; ++r) v[r] = (*this)(r, c);
    return v;
  }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool all_finite(std::span<const double> v) noexcept {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  assert(a.size() == b.size());
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

inline double norm_inf(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw DomainError("matmul: inner dimensions differ");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

inline Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw DomainError("matvec: dimension mismatch");
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row_span(i), x);
  return y;
}

/// Reflection of x through the hyperplane orthogonal to v:
/// x - 2 (v.x)/(v.v) v.
inline Vector householder_apply(std::span<const double> v, std::span<const double> x) {
  if (v.size() != x.size()) throw DomainError("householder_apply: length mismatch");
  const double vv = dot(v, v);
  if (!(vv > 0.0)) throw DomainError("householder_apply: zero reflection vector");
  const double scale = 2.0 * dot(v, x) / vv;
  Vector y(x.begin(), x.end());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= scale * v[i];
  return y;
}

/// Explicit reflection matrix I - 2 v v^T / (v^T v).
inline Matrix householder_matrix(std::span<const double> v) {
  const double vv = dot(v, v);
  if (!(vv > 0.0)) throw DomainError("householder_matrix: zero reflection vector");
  Matrix h = Matrix::identity(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t j = 0; j < v.size(); ++j) h(i, j) -= 2.0 * v[i] * v[j] / vv;
  return h;
}

enum class Triangle { lower, upper };
enum class Diagonal { explicit_values, unit };

/// Solves T y = b reading only the stated triangle of T.
inline Vector triangular_solve(const Matrix& t, std::span<const double> b, Triangle tri,
                               Diagonal diag = Diagonal::explicit_values) {
  const std::size_t n = t.rows();
  if (!t.square() || b.size() != n) throw DomainError("triangular_solve: dimension mismatch");
  Vector y(b.begin(), b.end());
  if (tri == Triangle::lower) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = y[i];
      for (std::size_t j = 0; j < i; ++j) acc -= t(i, j) * y[j];
      if (diag == Diagonal::explicit_values) {
        if (t(i, i) == 0.0) throw SingularityError("triangular_solve: zero diagonal entry");
        acc /= t(i, i);
      }
      y[i] = acc;
    }
  } else {
    for (std::size_t ii = n; ii-- > 0;) {
      double acc = y[ii];
      for (std::size_t j = ii + 1; j < n; ++j) acc -= t(ii, j) * y[j];
      if (diag == Diagonal::explicit_values) {
        if (t(ii, ii) == 0.0) throw SingularityError("triangular_solve: zero diagonal entry");
        acc /= t(ii, ii);
      }
      y[ii] = acc;
    }
  }
  return y;
}

inline double log_abs_det_triangular(const Matrix& t) {
  if (!t.square()) throw DomainError("log_abs_det_triangular: matrix not square");
  double acc = 0.0;
  for (std::size_t i = 0; i < t.rows(); ++i) {
    if (t(i, i) == 0.0) throw SingularityError("log_abs_det_triangular: zero diagonal entry");
    acc += std::log(std::abs(t(i, i)));
  }
  return acc;
}

struct QRFactors {
  Matrix q;
  Matrix r;
};

/// Householder QR of a square matrix, A = Q R.
inline QRFactors qr_decompose(const Matrix& a) {
  if (!a.square()) throw DomainError("qr_decompose: matrix not square");
  const std::size_t n = a.rows();
  Matrix r = a;
  Matrix q = Matrix::identity(n);
  for (std::size_t k = 0; k + 1 < n; ++k) {
    Vector v(n, 0.0);
    double norm = 0.0;
    for (std::size_t i = k; i < n; ++i) norm += r(i, k) * r(i, k);
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;
    const double alpha = r(k, k) >= 0.0 ? -norm : norm;
    for (std::size_t i = k; i < n; ++i) v[i] = r(i, k);
    v[k] -= alpha;
    if (dot(v, v) == 0.0) continue;
    for (std::size_t c = 0; c < n; ++c) {
      const Vector col = householder_apply(v, r.col_vector(c));
      for (std::size_t i = 0; i < n; ++i) r(i, c) = col[i];
    }
    // Q accumulates H_1 H_2 ... so that A = Q R.
    for (std::size_t row = 0; row < n; ++row) {
      const Vector qr = householder_apply(v, q.row_span(row));
      std::copy(qr.begin(), qr.end(), q.row_span(row).begin());
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) r(i, j) = 0.0;
  return {std::move(q), std::move(r)};
}

struct SymmetricEigen {
  Vector values;  ///< descending
  Matrix vectors; ///< column j pairs with values[j]
};

/// Cyclic Jacobi rotations on a symmetric matrix.
inline SymmetricEigen symmetric_eigendecompose(const Matrix& s, double symmetry_tol = 1e-9) {
  if (!s.square()) throw DomainError("symmetric_eigendecompose: matrix not square");
  const std::size_t n = s.rows();
  double scale = 0.0;
  for (double x : s.data()) scale = std::max(scale, std::abs(x));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(s(i, j) - s(j, i)) > symmetry_tol * std::max(1.0, scale))
        throw DomainError("symmetric_eigendecompose: input is not symmetric");

  Matrix a = s;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (s(i, j) + s(j, i));
  Matrix v = Matrix::identity(n);

  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    double off = 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        total += a(i, j) * a(i, j);
        if (i != j) off += a(i, j) * a(i, j);
      }
    if (off == 0.0 || off <= 1e-30 * total) break;

    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - sn * akq;
          a(k, q) = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - sn * aqk;
          a(q, k) = sn * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
  SymmetricEigen out{Vector(n), Matrix(n, n)};
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a(order[j], order[j]);
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, j) = v(k, order[j]);
  }
  return out;
}

}  // namespace nestedflow
