// Copyright 2026 the kvnorm authors
// SPDX-License-Identifier: Apache-2.0

#include "kvnorm/tensor.hpp"

#include <cmath>
#include <vector>

#include "gtest/gtest.h"
#include "kvnorm/rng.hpp"

namespace kvnorm {
namespace {

Tensor2D make(std::size_t r, std::size_t c, std::initializer_list<float> v) {
  Tensor2D t(r, c);
  std::copy(v.begin(), v.end(), t.data.begin());
  return t;
}

TEST(Matmul, HandValues) {
  const Tensor2D a = make(2, 2, {1, 2, 3, 4});
  const Tensor2D b = make(2, 2, {5, 6, 7, 8});
  const Tensor2D c = matmul(a, b);
  EXPECT_FLOAT_EQ(c.at(0, 0), 19.0f);
  EXPECT_FLOAT_EQ(c.at(0, 1), 22.0f);
  EXPECT_FLOAT_EQ(c.at(1, 0), 43.0f);
  EXPECT_FLOAT_EQ(c.at(1, 1), 50.0f);
}

TEST(Matmul, IdentityAndAnnihilator) {
  const Tensor2D b = make(2, 3, {1, -2, 3, 4, 5, -6});
  const Tensor2D eye = make(2, 2, {1, 0, 0, 1});
  const Tensor2D ib = matmul(eye, b);
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_FLOAT_EQ(ib.data[i], b.data[i]);
  }
  const Tensor2D zero(3, 4, 0.0f);
  const Tensor2D bz = matmul(b, zero);
  for (float v : bz.data) EXPECT_FLOAT_EQ(v, 0.0f);
}

TEST(Matmul, ShapeMismatchThrows) {
  const Tensor2D a(2, 3);
  const Tensor2D b(2, 3);
  EXPECT_THROW(matmul(a, b), ShapeError);
}

TEST(Matmul, AssociativityOnRandomMatrices) {
  SplitMix64 rng(7);
  for (int iter = 0; iter < 20; ++iter) {
    const std::size_t m = 1 + rng.next_below(6);
    const std::size_t k = 1 + rng.next_below(6);
    const std::size_t p = 1 + rng.next_below(6);
    const std::size_t q = 1 + rng.next_below(6);
    Tensor2D a(m, k), b(k, p), c(p, q);
    for (float& v : a.data) v = static_cast<float>(rng.next_normal());
    for (float& v : b.data) v = static_cast<float>(rng.next_normal());
    for (float& v : c.data) v = static_cast<float>(rng.next_normal());
    const Tensor2D left = matmul(matmul(a, b), c);
    const Tensor2D right = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < left.size(); ++i) {
      const float denom = std::max({1.0f, std::fabs(left.data[i]),
                                    std::fabs(right.data[i])});
      EXPECT_LE(std::fabs(left.data[i] - right.data[i]) / denom, 1e-4f);
    }
  }
}

TEST(Matmul, BitStableAcrossCalls) {
  SplitMix64 rng(11);
  Tensor2D a(7, 9), b(9, 5);
  for (float& v : a.data) v = static_cast<float>(rng.next_normal());
  for (float& v : b.data) v = static_cast<float>(rng.next_normal());
  const Tensor2D c1 = matmul(a, b);
  const Tensor2D c2 = matmul(a, b);
  EXPECT_EQ(c1.data, c2.data);
}

TEST(Softmax, HandValues) {
  // softmax([0, ln 3]) = [1, 3] / 4
  const Tensor2D m = make(1, 2, {0.0f, std::log(3.0f)});
  const Tensor2D s = softmax_rows(m);
  EXPECT_NEAR(s.at(0, 0), 0.25f, 1e-6f);
  EXPECT_NEAR(s.at(0, 1), 0.75f, 1e-6f);
}

TEST(Softmax, EqualValuesAndShiftInvariance) {
  const std::size_t k = 7;
  Tensor2D m(1, k, 3.25f);
  const Tensor2D s = softmax_rows(m);
  for (std::size_t j = 0; j < k; ++j) {
    EXPECT_NEAR(s.at(0, j), 1.0f / static_cast<float>(k), 1e-6f);
  }
  for (float c : {-17.0f, 0.0f, 42.5f}) {
    const Tensor2D shifted = make(1, 2, {c, c + std::log(3.0f)});
    const Tensor2D ss = softmax_rows(shifted);
    EXPECT_NEAR(ss.at(0, 0), 0.25f, 1e-6f);
    EXPECT_NEAR(ss.at(0, 1), 0.75f, 1e-6f);
  }
}

TEST(Softmax, RowsSumToOneIncludingExtremes) {
  SplitMix64 rng(21);
  for (int iter = 0; iter < 1000; ++iter) {
    const std::size_t k = 1 + rng.next_below(16);
    Tensor2D m(1, k);
    for (float& v : m.data) {
      v = static_cast<float>((rng.next_uniform() * 2.0 - 1.0) * 80.0);
    }
    const Tensor2D s = softmax_rows(m);
    double sum = 0.0;
    for (float v : s.data) {
      EXPECT_GE(v, 0.0f);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Softmax, MaskedEntriesExactlyZero) {
  const Tensor2D m = make(2, 3, {1, 2, 3, 4, 5, 6});
  const std::vector<std::uint8_t> mask = {1, 1, 0, 0, 1, 1};
  const Tensor2D s = softmax_rows(m, &mask);
  EXPECT_EQ(s.at(0, 2), 0.0f);
  EXPECT_EQ(s.at(1, 0), 0.0f);
  EXPECT_NEAR(s.at(0, 0) + s.at(0, 1), 1.0f, 1e-6f);
}

TEST(Softmax, FullyMaskedRowThrows) {
  const Tensor2D m(1, 3, 1.0f);
  const std::vector<std::uint8_t> mask = {0, 0, 0};
  EXPECT_THROW(softmax_rows(m, &mask), NumericError);
}

TEST(L2Norm, HandValues) {
  const std::vector<float> v = {3.0f, 4.0f};
  EXPECT_FLOAT_EQ(l2_norm(v), 5.0f);
  const std::vector<float> zero(16, 0.0f);
  EXPECT_FLOAT_EQ(l2_norm(zero), 0.0f);
}

TEST(L2Norm, MatchesScalarLoopOracle) {
  SplitMix64 rng(5);
  std::vector<float> v(64);
  for (float& x : v) x = static_cast<float>(rng.next_normal());
  // independent accumulation
  double ss = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) ss += double(v[i]) * double(v[i]);
  EXPECT_NEAR(l2_norm(v), std::sqrt(ss), 1e-6);
}

TEST(L2Norm, Homogeneity) {
  SplitMix64 rng(6);
  for (int iter = 0; iter < 100; ++iter) {
    std::vector<float> v(1 + rng.next_below(32));
    for (float& x : v) x = static_cast<float>(rng.next_normal());
    const float c = static_cast<float>(rng.next_normal() * 3.0);
    std::vector<float> cv(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) cv[i] = c * v[i];
    const float lhs = l2_norm(cv);
    const float rhs = std::fabs(c) * l2_norm(v);
    const float denom = std::max(1e-6f, std::max(lhs, rhs));
    EXPECT_LE(std::fabs(lhs - rhs) / denom, 1e-5f);
  }
}

TEST(SeededInit, ZerosAndDeterminism) {
  const Tensor2D z = seeded_init(4, 5, InitScheme::zeros(), 99);
  for (float v : z.data) EXPECT_EQ(v, 0.0f);
  const Tensor2D a = seeded_init(8, 8, InitScheme::normal(0.02), 1234);
  const Tensor2D b = seeded_init(8, 8, InitScheme::normal(0.02), 1234);
  EXPECT_EQ(a.data, b.data);
  const Tensor2D c = seeded_init(8, 8, InitScheme::normal(0.02), 1235);
  EXPECT_NE(a.data, c.data);
}

TEST(SeededInit, NormalSampleMean) {
  // 10^4 draws of normal(0.02): sample mean within 3*sigma/100 of zero.
  const Tensor2D t = seeded_init(100, 100, InitScheme::normal(0.02), 2024);
  double mean = 0.0;
  for (float v : t.data) mean += v;
  mean /= static_cast<double>(t.size());
  EXPECT_LE(std::fabs(mean), 3.0 * 0.02 / 100.0);
}

TEST(SeededInit, InvalidSigmaThrows) {
  EXPECT_THROW(seeded_init(2, 2, InitScheme::normal(0.0), 1), ConfigError);
}

TEST(Matmul, OverflowToInfinityIsCaught) {
  Tensor2D a(1, 2, 3e38f);
  Tensor2D b(2, 1, 3e38f);
  EXPECT_THROW(matmul(a, b), NumericError);
}

TEST(Rng, UniformContract) {
  // next_uniform must equal (next_u64 >> 11) * 2^-53 on the same stream.
  SplitMix64 a(77), b(77);
  for (int i = 0; i < 100; ++i) {
    const double expect =
        static_cast<double>(a.next_u64() >> 11) * std::pow(2.0, -53);
    EXPECT_EQ(b.next_uniform(), expect);
  }
}

}  // namespace
}  // namespace kvnorm
