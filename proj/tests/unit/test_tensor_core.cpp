// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "../support/helpers.hpp"
#include "palu/error.hpp"
#include "palu/linalg.hpp"
#include "palu/matrix.hpp"
#include "palu/random.hpp"

using namespace palu;

namespace {

double orthonormality_gap(const Matrix& cols_matrix) {
  const Matrix g = oracle::matmul(oracle::transpose(cols_matrix), cols_matrix);
  return oracle::diff_frobenius(g, Matrix::identity(g.rows()));
}

Matrix multiply_back(const SvdResult& s) {
  return oracle::matmul(oracle::matmul(s.u, Matrix::diagonal(s.singular_values)), s.vt);
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix m{{1.5, -2.0, 3.0}, {0.25, 4.0, -1.0}};
  EXPECT_EQ(matmul(Matrix::identity(2), m), m);
}

TEST(Matmul, HandArithmetic) {
  const Matrix a{{1, 2}, {3, 4}};
  const Matrix b{{0}, {1}};
  EXPECT_EQ(matmul(a, b), (Matrix{{2}, {4}}));
}

TEST(Matmul, MatchesTripleLoop) {
  const Matrix a = testutil::gaussian(7, 5, 1);
  const Matrix b = testutil::gaussian(5, 3, 2);
  EXPECT_LT(max_abs_diff(matmul(a, b), oracle::matmul(a, b)), 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Matrix(2, 3), Matrix(4, 2));
    FAIL() << "expected a validation error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::validation);
    const std::string what = e.what();
    EXPECT_NE(what.find("2x3"), std::string::npos) << what;
    EXPECT_NE(what.find("4x2"), std::string::npos) << what;
  }
}

TEST(Matmul, Associative) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Matrix a = testutil::gaussian(8, 8, 3 * seed);
    const Matrix b = testutil::gaussian(8, 8, 3 * seed + 1);
    const Matrix c = testutil::gaussian(8, 8, 3 * seed + 2);
    EXPECT_LT(relative_error(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-9);
  }
}

TEST(Matmul, BitReproducible) {
  const Matrix a = testutil::gaussian(13, 11, 5);
  const Matrix b = testutil::gaussian(11, 9, 6);
  EXPECT_EQ(matmul(a, b), matmul(a, b));
}

TEST(Svd, DiagonalMatrix) {
  const auto s = svd(Matrix{{2, 0}, {0, 1}});
  ASSERT_EQ(s.singular_values.size(), 2u);
  EXPECT_NEAR(s.singular_values[0], 2.0, 1e-14);
  EXPECT_NEAR(s.singular_values[1], 1.0, 1e-14);
}

TEST(Svd, RankOneOuterProduct) {
  const Matrix u = random_orthonormal(5, 1, 11);
  const Matrix v = random_orthonormal(4, 1, 12);
  const auto s = svd(oracle::matmul(u, oracle::transpose(v)));
  EXPECT_NEAR(s.singular_values[0], 1.0, 1e-12);
  for (std::size_t i = 1; i < s.singular_values.size(); ++i) EXPECT_LT(s.singular_values[i], 1e-12);
  EXPECT_LT(orthonormality_gap(s.u), 1e-8);
  EXPECT_LT(orthonormality_gap(oracle::transpose(s.vt)), 1e-8);
}

TEST(Svd, MatchesGramEigenOracle) {
  const Matrix m = testutil::gaussian(6, 4, 21);
  const auto s = svd(m);
  EXPECT_LT(oracle::diff_frobenius(multiply_back(s), m) / oracle::frobenius(m), 1e-10);
  const auto expected = oracle::singular_values(m);
  ASSERT_EQ(s.singular_values.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(s.singular_values[i], expected[i], 1e-8);
}

TEST(Svd, InvariantsOnVariousShapes) {
  const std::pair<std::size_t, std::size_t> shapes[] = {{1, 1}, {1, 7}, {7, 1}, {3, 9}, {9, 3}, {16, 16}, {20, 12}};
  std::uint64_t seed = 100;
  for (auto [r, c] : shapes) {
    const Matrix m = testutil::gaussian(r, c, seed++);
    const auto s = svd(m);
    ASSERT_EQ(s.singular_values.size(), std::min(r, c));
    for (std::size_t i = 0; i + 1 < s.singular_values.size(); ++i) {
      EXPECT_GE(s.singular_values[i], s.singular_values[i + 1]);
    }
    for (double v : s.singular_values) EXPECT_GE(v, 0.0);
    EXPECT_LT(orthonormality_gap(s.u), 1e-8);
    EXPECT_LT(orthonormality_gap(oracle::transpose(s.vt)), 1e-8);
    EXPECT_LT(relative_error(multiply_back(s), m), 1e-8) << r << "x" << c;
  }
}

TEST(Svd, RankDeficientStillOrthonormal) {
  // Two identical columns: one zero singular value, U completed to orthonormal.
  Matrix m = testutil::gaussian(5, 3, 31);
  for (std::size_t r = 0; r < 5; ++r) m(r, 2) = m(r, 1);
  const auto s = svd(m);
  EXPECT_LT(s.singular_values[2], 1e-12);
  EXPECT_LT(orthonormality_gap(s.u), 1e-8);
  EXPECT_LT(relative_error(multiply_back(s), m), 1e-10);
}

TEST(Svd, SignConventionLargestEntryNonNegative) {
  const auto s = svd(testutil::gaussian(8, 6, 41));
  for (std::size_t c = 0; c < s.u.cols(); ++c) {
    double best = 0.0;
    for (std::size_t r = 0; r < s.u.rows(); ++r)
      if (std::abs(s.u(r, c)) > std::abs(best)) best = s.u(r, c);
    EXPECT_GE(best, 0.0);
  }
}

TEST(Svd, NonConvergenceReportsSweeps) {
  SvdOptions opts;
  opts.max_sweeps = 1;
  opts.tolerance = 1e-300;
  try {
    svd(testutil::gaussian(12, 12, 51), opts);
    FAIL() << "expected non-convergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numerical);
    EXPECT_NE(std::string(e.what()).find("1"), std::string::npos);
  }
}

TEST(Svd, RejectsNonFinite) {
  Matrix m(2, 2, 1.0);
  m(0, 1) = std::nan("");
  EXPECT_THROW(svd(m), Error);
}

TEST(Cholesky, ScaledIdentity) {
  const Matrix l = cholesky(scale(Matrix::identity(3), 4.0));
  EXPECT_LT(max_abs_diff(l, scale(Matrix::identity(3), 2.0)), 1e-15);
}

TEST(Cholesky, TwoByTwoClosedForm) {
  const Matrix l = cholesky(Matrix{{4, 2}, {2, 3}});
  EXPECT_NEAR(l(0, 0), 2.0, 1e-15);
  EXPECT_NEAR(l(0, 1), 0.0, 1e-15);
  EXPECT_NEAR(l(1, 0), 1.0, 1e-15);
  EXPECT_NEAR(l(1, 1), std::sqrt(2.0), 1e-15);
}

TEST(Cholesky, GramWithJitterMultipliesBack) {
  const Matrix x = testutil::gaussian(16, 8, 61);
  const Matrix g = oracle::matmul(oracle::transpose(x), x);
  const Matrix l = cholesky(g, 1e-6);
  const Matrix target = add(g, scale(Matrix::identity(8), 1e-6));
  EXPECT_LT(oracle::diff_frobenius(oracle::matmul(l, oracle::transpose(l)), target) / oracle::frobenius(target), 1e-8);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = i + 1; j < 8; ++j) EXPECT_EQ(l(i, j), 0.0);
}

TEST(Cholesky, RecoversLowerFactor) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Matrix l = testutil::gaussian(6, 6, 70 + seed);
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t j = i + 1; j < 6; ++j) l(i, j) = 0.0;
      l(i, i) = 1.0 + std::abs(l(i, i));
    }
    const Matrix got = cholesky(oracle::matmul(l, oracle::transpose(l)));
    EXPECT_LT(relative_error(got, l), 1e-8);
  }
}

TEST(Cholesky, IndefiniteAdvisesJitter) {
  try {
    cholesky(Matrix{{1, 2}, {2, 1}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numerical);
    EXPECT_NE(std::string(e.what()).find("jitter"), std::string::npos);
  }
}

TEST(Cholesky, RejectsAsymmetric) { EXPECT_THROW(cholesky(Matrix{{2, 1}, {0, 2}}), Error); }

TEST(Solve, TriangularSystems) {
  const Matrix x = testutil::gaussian(5, 3, 81);
  Matrix u = testutil::gaussian(5, 5, 82);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < i; ++j) u(i, j) = 0.0;
    u(i, i) = 2.0 + std::abs(u(i, i));
  }
  EXPECT_LT(relative_error(solve_upper(u, oracle::matmul(u, x)), x), 1e-12);
  const Matrix l = oracle::transpose(u);
  EXPECT_LT(relative_error(solve_lower(l, oracle::matmul(l, x)), x), 1e-12);
}

TEST(Hadamard, BaseCases) {
  EXPECT_EQ(hadamard(1), (Matrix{{1}}));
  const double h = 1.0 / std::sqrt(2.0);
  EXPECT_LT(max_abs_diff(hadamard(2), Matrix{{h, h}, {h, -h}}), 1e-15);
}

TEST(Hadamard, OrthogonalForAllListedSizes) {
  for (int d : {1, 2, 4, 8, 16, 32, 12, 24, 7}) {
    const Matrix h = hadamard(d);
    EXPECT_LT(max_abs_diff(oracle::matmul(h, oracle::transpose(h)), Matrix::identity(d)), 1e-10) << d;
  }
}

TEST(Hadamard, TwelveIsBlockDiagonalEightFour) {
  const Matrix h = hadamard(12);
  const Matrix h8 = hadamard(8), h4 = hadamard(4);
  for (std::size_t i = 0; i < 12; ++i) {
    for (std::size_t j = 0; j < 12; ++j) {
      double expect = 0.0;
      if (i < 8 && j < 8) expect = h8(i, j);
      if (i >= 8 && j >= 8) expect = h4(i - 8, j - 8);
      EXPECT_EQ(h(i, j), expect);
    }
  }
}

TEST(Hadamard, SylvesterEntries) {
  // Entry (i, j) of the Sylvester matrix is (-1)^popcount(i & j).
  const Matrix h = hadamard(16);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) {
      const double sign = (__builtin_popcountll(i & j) % 2 == 0) ? 1.0 : -1.0;
      EXPECT_NEAR(h(i, j), sign / 4.0, 1e-15);
    }
}

TEST(Hadamard, RejectsNonPositive) {
  EXPECT_THROW(hadamard(0), Error);
  EXPECT_THROW(hadamard(-4), Error);
}

TEST(RandomMatrix, Deterministic) {
  EXPECT_EQ(random_matrix(6, 5, 9), random_matrix(6, 5, 9));
  EXPECT_EQ(random_matrix(6, 5, 9, 0.5), random_matrix(6, 5, 9, 0.5));
  EXPECT_NE(random_matrix(6, 5, 9), random_matrix(6, 5, 10));
}

TEST(RandomMatrix, UnitSpectrum) {
  const auto s = svd(random_matrix(4, 4, 3, 1.0));
  for (double v : s.singular_values) EXPECT_NEAR(v, 1.0, 1e-10);
}

TEST(RandomMatrix, GeometricSpectrumRecovered) {
  const auto s = oracle::singular_values(random_matrix(8, 8, 4, 0.5));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(s[i], std::pow(0.5, static_cast<double>(i)), 1e-8);
  const auto t = svd(random_matrix(8, 8, 4, 0.5)).singular_values;
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(t[i], std::pow(0.5, static_cast<double>(i)), 1e-8);
}

TEST(RandomMatrix, RectangularSpectrum) {
  const auto s = svd(random_matrix(12, 5, 8, 0.7)).singular_values;
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(s[i], std::pow(0.7, static_cast<double>(i)), 1e-8);
}

TEST(RandomMatrix, RejectsBadDecay) {
  EXPECT_THROW(random_matrix(3, 3, 1, 0.0), Error);
  EXPECT_THROW(random_matrix(3, 3, 1, 1.5), Error);
  EXPECT_THROW(random_matrix(3, 3, 1, -0.5), Error);
}

TEST(RandomMatrix, EntriesAreOrderIndependent) {
  // Entry (r, c) depends only on (seed, r, c): a larger draw contains the smaller one.
  const Matrix small = random_matrix(3, 4, 17);
  const Matrix large = random_matrix(5, 6, 17);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(small(r, c), large(r, c));
}

TEST(Rng, DeriveSeedSeparatesStages) {
  EXPECT_EQ(derive_seed(5, "fisher"), derive_seed(5, "fisher"));
  EXPECT_NE(derive_seed(5, "fisher"), derive_seed(5, "stream"));
  EXPECT_NE(derive_seed(5, "fisher"), derive_seed(6, "fisher"));
}

TEST(Rng, NormalMoments) {
  const CounterRng rng(1234);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal(static_cast<std::uint64_t>(i), 0);
    sum += x;
    sq += x * x;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.01);
  EXPECT_NEAR(sq / n, 1.0, 0.02);
}

TEST(MatrixOps, SlicesAndConcat) {
  const Matrix m = testutil::gaussian(4, 6, 90);
  const Matrix left = slice_cols(m, 0, 2), right = slice_cols(m, 2, 6);
  const Matrix parts[] = {left, right};
  EXPECT_EQ(hconcat(parts), m);
  const Matrix rows[] = {slice_rows(m, 0, 1), slice_rows(m, 1, 4)};
  EXPECT_EQ(vconcat(rows), m);
  EXPECT_THROW(slice_cols(m, 3, 7), Error);
}

TEST(MatrixOps, ConstructionRejectsBadData) {
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), Error);
  EXPECT_THROW((Matrix{{1, 2}, {3}}), Error);
}
