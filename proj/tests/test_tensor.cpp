// Copyright 2026 The ulie Authors. Licensed under the Apache License, Version 2.0.

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "ulie/tensor.hpp"

using namespace ulie;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix a{{1, 2}, {3, 4}};
  EXPECT_EQ(matmul(a, Matrix::identity(2)), a);
}

TEST(Matmul, TwoByTwoProduct) {
  const Matrix a{{1, 2}, {3, 4}};
  const Matrix b{{5, 6}, {7, 8}};
  const Matrix expected = oracle::naive_matmul(a, b);
  EXPECT_EQ(expected, (Matrix{{19, 22}, {43, 50}}));
  EXPECT_EQ(matmul(a, b), expected);
}

TEST(Matmul, ZerosGiveZeros) {
  const Matrix out = matmul(Matrix(2, 3), Matrix(3, 1));
  EXPECT_EQ(out.rows(), 2u);
  EXPECT_EQ(out.cols(), 1u);
  EXPECT_EQ(out, Matrix(2, 1));
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2x3) * (2x3)"), std::string::npos) << msg;
  }
}

TEST(Matmul, AgreesWithNaiveOracleOnRaggedShapes) {
  Rng rng(3);
  for (auto [n, k, p] : {std::tuple{1, 1, 1}, {7, 65, 3}, {130, 70, 129}, {5, 200, 2}}) {
    const Matrix a = random_gaussian(rng, n, k, 1.0);
    const Matrix b = random_gaussian(rng, k, p, 1.0);
    EXPECT_LT(oracle::max_abs_difference(matmul(a, b), oracle::naive_matmul(a, b)), 1e-12);
    EXPECT_LT(oracle::max_abs_difference(matmul_tn(transpose(a), b), oracle::naive_matmul(a, b)), 1e-12);
    EXPECT_LT(oracle::max_abs_difference(matmul_nt(a, transpose(b)), oracle::naive_matmul(a, b)), 1e-12);
  }
}

TEST(Matmul, AssociativeOnRandomTriples) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.index(20), k = 1 + rng.index(20), p = 1 + rng.index(20), q = 1 + rng.index(20);
    const Matrix a = random_gaussian(rng, n, k, 1.0);
    const Matrix b = random_gaussian(rng, k, p, 1.0);
    const Matrix c = random_gaussian(rng, p, q, 1.0);
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    EXPECT_LT(frobenius_norm(subtract(left, right)) / frobenius_norm(left), 1e-10);
  }
}

TEST(Transpose, IdentityIsSymmetric) { EXPECT_EQ(transpose(Matrix::identity(3)), Matrix::identity(3)); }

TEST(Transpose, RowBecomesColumn) { EXPECT_EQ(transpose(Matrix{{1, 2, 3}}), (Matrix{{1}, {2}, {3}})); }

TEST(Transpose, IsAnInvolution) {
  Rng rng(42);
  const Matrix a = random_gaussian(rng, 5, 7, 1.0);
  const Matrix t = transpose(a);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 7; ++j) EXPECT_EQ(t(j, i), a(i, j));
  EXPECT_EQ(transpose(t), a);
}

TEST(L2Norm, Examples) {
  EXPECT_EQ(l2_norm(std::vector<double>{3, 4}), 5.0);
  EXPECT_EQ(l2_norm(std::vector<double>{0, 0, 0}), 0.0);
  EXPECT_EQ(l2_norm(std::vector<double>{1}), 1.0);
  EXPECT_EQ(l2_norm(std::vector<double>{}), 0.0);
}

TEST(RandomGaussian, SameSeedIsBitIdentical) {
  Rng a(42), b(42);
  EXPECT_EQ(random_gaussian(a, 6, 9, 0.5), random_gaussian(b, 6, 9, 0.5));
}

TEST(RandomGaussian, RejectsNonPositiveStd) {
  Rng rng(1);
  EXPECT_THROW(random_gaussian(rng, 2, 2, 0.0), ContractError);
  EXPECT_THROW(random_gaussian(rng, 2, 2, -1.0), ContractError);
}

TEST(RandomGaussian, SampleMeanWithinFiveStandardErrors) {
  Rng rng(2024);
  const double std = 2.0;
  const Matrix m = random_gaussian(rng, 100, 100, std);
  const double n = static_cast<double>(m.size());
  const double mean = std::accumulate(m.data().begin(), m.data().end(), 0.0) / n;
  EXPECT_LT(std::abs(mean), 5.0 * std / std::sqrt(n));
  double var = 0.0;
  for (double v : m.data()) var += (v - mean) * (v - mean);
  EXPECT_NEAR(std::sqrt(var / n), std, 0.05 * std);
}

TEST(MatrixShape, RejectsEmptyDimensions) {
  EXPECT_THROW(Matrix(0, 3), ShapeError);
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(MatrixShape, RowMajorLayout) {
  const Matrix a{{1, 2, 3}, {4, 5, 6}};
  const std::vector<double> expected{1, 2, 3, 4, 5, 6};
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), expected.begin()));
}
