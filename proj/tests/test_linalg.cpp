#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace nestedflow;

TEST(Householder, ReflectsAboutFirstAxis) {
  const Vector out = householder_apply(Vector{1, 0, 0}, Vector{2, 3, 4});
  EXPECT_DOUBLE_EQ(out[0], -2.0);
  EXPECT_DOUBLE_EQ(out[1], 3.0);
  EXPECT_DOUBLE_EQ(out[2], 4.0);
}

TEST(Householder, ParallelVectorIsNegated) {
  const Vector out = householder_apply(Vector{1, 2, 2}, Vector{1, 2, 2});
  EXPECT_NEAR(out[0], -1.0, 1e-15);
  EXPECT_NEAR(out[1], -2.0, 1e-15);
  EXPECT_NEAR(out[2], -2.0, 1e-15);
}

TEST(Householder, InvolutionAndNormPreservation) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + rng.index(8);
    Vector v(d), x(d);
    for (auto& a : v) a = rng.normal();
    for (auto& a : x) a = rng.normal();
    const Vector hx = householder_apply(v, x);
    EXPECT_LE(oracle::max_abs_diff(householder_apply(v, hx), x), 1e-12);
    EXPECT_NEAR(std::sqrt(dot(hx, hx)), std::sqrt(dot(x, x)), 1e-12);
    EXPECT_NEAR(std::abs(oracle::determinant(householder_matrix(v))), 1.0, 1e-12);
  }
}

TEST(Householder, ZeroVectorRejected) {
  EXPECT_THROW(householder_apply(Vector{0, 0}, Vector{1, 2}), DomainError);
}

TEST(TriangularSolve, Identity) {
  const Vector y = triangular_solve(Matrix::identity(3), Vector{1, 2, 3}, Triangle::lower);
  EXPECT_EQ(y, (Vector{1, 2, 3}));
}

TEST(TriangularSolve, Diagonal) {
  const Vector y = triangular_solve(Matrix::diagonal(Vector{2, 4}), Vector{2, 4}, Triangle::upper);
  EXPECT_DOUBLE_EQ(y[0], 1.0);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
}

TEST(TriangularSolve, ResidualOnRandomWellConditioned) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    for (Triangle tri : {Triangle::lower, Triangle::upper}) {
      Matrix t(5, 5);
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
          const bool in = tri == Triangle::lower ? j <= i : j >= i;
          if (in) t(i, j) = i == j ? 1.0 + rng.uniform() : 0.5 * rng.normal();
        }
      Vector b(5);
      for (auto& a : b) a = rng.normal();
      const Vector y = triangular_solve(t, b, tri);
      EXPECT_LE(oracle::max_abs_diff(oracle::apply(t, y), b), 1e-10 * norm_inf(b));
    }
  }
}

TEST(TriangularSolve, UnitDiagonalIgnoresStoredDiagonal) {
  Matrix t{{5, 0}, {2, 7}};
  const Vector y = triangular_solve(t, Vector{1, 4}, Triangle::lower, Diagonal::unit);
  EXPECT_DOUBLE_EQ(y[0], 1.0);
  EXPECT_DOUBLE_EQ(y[1], 2.0);
}

TEST(TriangularSolve, ZeroDiagonalIsSingular) {
  Matrix t{{1, 0}, {3, 0}};
  EXPECT_THROW(triangular_solve(t, Vector{1, 1}, Triangle::lower), SingularityError);
}

TEST(LogAbsDetTriangular, Examples) {
  EXPECT_NEAR(log_abs_det_triangular(Matrix::diagonal(Vector{2, 1, 0.5})), 0.0, 1e-15);
  EXPECT_EQ(log_abs_det_triangular(Matrix::identity(4)), 0.0);
  const double e = std::exp(1.0);
  EXPECT_NEAR(log_abs_det_triangular(Matrix::diagonal(Vector{e, e, e})), 3.0, 1e-15);
}

TEST(QR, FactorsReconstructAndQIsOrthogonal) {
  Rng rng(5);
  for (std::size_t d : {1u, 2u, 5u, 9u}) {
    Matrix a(d, d);
    for (auto& x : a.data()) x = rng.normal();
    const QRFactors f = qr_decompose(a);
    EXPECT_LE(oracle::max_abs_diff(oracle::mul(f.q, f.r).data(), a.data()), 1e-12);
    EXPECT_LE(oracle::max_abs_diff(oracle::mul(f.q.transposed(), f.q).data(),
                                   Matrix::identity(d).data()),
              1e-12);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < i; ++j) EXPECT_NEAR(f.r(i, j), 0.0, 1e-12);
  }
}

TEST(Eigen, Identity) {
  const SymmetricEigen e = symmetric_eigendecompose(Matrix::identity(3));
  for (double w : e.values) EXPECT_NEAR(w, 1.0, 1e-14);
  EXPECT_LE(oracle::max_abs_diff(oracle::mul(e.vectors.transposed(), e.vectors).data(),
                                 Matrix::identity(3).data()),
            1e-12);
}

TEST(Eigen, AlreadyDiagonalSortedDescending) {
  const SymmetricEigen e = symmetric_eigendecompose(Matrix::diagonal(Vector{0.1, 1, 0.01}));
  EXPECT_NEAR(e.values[0], 1.0, 1e-15);
  EXPECT_NEAR(e.values[1], 0.1, 1e-15);
  EXPECT_NEAR(e.values[2], 0.01, 1e-15);
}

TEST(Eigen, RecoversRotatedSpectrum) {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix r = random_rotation(3, rng);
    const Matrix s = oracle::mul(oracle::mul(r, Matrix::diagonal(Vector{1, 0.1, 0.01})), r.transposed());
    const SymmetricEigen e = symmetric_eigendecompose(s);
    EXPECT_NEAR(e.values[0], 1.0, 1e-9);
    EXPECT_NEAR(e.values[1], 0.1, 1e-9);
    EXPECT_NEAR(e.values[2], 0.01, 1e-9);
  }
}

TEST(Eigen, ReconstructionResidualUpTo32) {
  Rng rng(23);
  for (std::size_t d : {2u, 7u, 16u, 32u}) {
    Matrix a(d, d);
    for (auto& x : a.data()) x = rng.normal();
    const Matrix s = oracle::mul(a, a.transposed());
    const SymmetricEigen e = symmetric_eigendecompose(s);
    const Matrix back =
        oracle::mul(oracle::mul(e.vectors, Matrix::diagonal(e.values)), e.vectors.transposed());
    EXPECT_LE(oracle::max_abs_diff(back.data(), s.data()), 1e-8) << "d=" << d;
    for (std::size_t i = 1; i < d; ++i) EXPECT_GE(e.values[i - 1], e.values[i]);
  }
}

TEST(Eigen, RejectsNonSymmetric) {
  EXPECT_THROW(symmetric_eigendecompose(Matrix{{1, 2}, {0, 1}}), DomainError);
}

TEST(MatrixType, FiniteCheck) {
  EXPECT_FALSE(Matrix(1, 1, std::vector<double>{NAN}).all_finite());
  EXPECT_TRUE(Matrix::identity(2).all_finite());
}

TEST(RngDeterminism, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.normal(), b.normal());
  const auto p = Rng(7).permutation(10);
  std::vector<bool> seen(10, false);
  for (auto i : p) seen[i] = true;
  for (bool s : seen) EXPECT_TRUE(s);
}
