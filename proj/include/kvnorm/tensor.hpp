// Copyright 2026 the kvnorm authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "kvnorm/errors.hpp"
#include "kvnorm/rng.hpp"

namespace kvnorm {

// Dense row-major float32 matrix. The sole numeric carrier of the project.
struct Tensor2D {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Tensor2D() = default;
  Tensor2D(std::size_t r, std::size_t c, float fill = 0.0f)
      : rows(r), cols(c), data(r * c, fill) {}

  float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const float> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Tensor2D& o) const {
    return rows == o.rows && cols == o.cols;
  }
};

inline void ensure_finite(const Tensor2D& t, const char* op) {
  for (float v : t.data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value in result");
    }
  }
}

// C = A * B with a fixed i-k-j loop nest. The k-major inner accumulation
// order is part of the contract: results are bit-stable across runs.
inline Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: inner dimensions differ (" +
                     std::to_string(a.cols) + " vs " + std::to_string(b.rows) +
                     ")");
  }
  Tensor2D c(a.rows, b.cols, 0.0f);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const float* arow = a.data.data() + i * a.cols;
    float* crow = c.data.data() + i * b.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const float aik = arow[k];
      const float* brow = b.data.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) {
        crow[j] += aik * brow[j];
      }
    }
  }
  ensure_finite(c, "matmul");
  return c;
}

// Row-wise softmax with per-row max subtraction. `mask`, when given, is a
// row-major byte matrix of the same shape; zero entries are excluded and
// come out exactly 0. A fully masked row is an error.
inline Tensor2D softmax_rows(const Tensor2D& m,
                             const std::vector<std::uint8_t>* mask = nullptr) {
  if (mask != nullptr && mask->size() != m.size()) {
    throw ShapeError("softmax_rows: mask shape differs from input");
  }
  Tensor2D out(m.rows, m.cols, 0.0f);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const float* in = m.data.data() + i * m.cols;
    const std::uint8_t* mrow = mask ? mask->data() + i * m.cols : nullptr;
    float maxv = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < m.cols; ++j) {
      if (mrow && mrow[j] == 0) continue;
      maxv = std::max(maxv, in[j]);
    }
    if (maxv == -std::numeric_limits<float>::infinity()) {
      throw NumericError("softmax_rows: fully masked row " + std::to_string(i));
    }
    double denom = 0.0;
    float* o = out.data.data() + i * m.cols;
    for (std::size_t j = 0; j < m.cols; ++j) {
      if (mrow && mrow[j] == 0) continue;
      o[j] = std::exp(in[j] - maxv);
      denom += o[j];
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (std::size_t j = 0; j < m.cols; ++j) {
      o[j] *= inv;
    }
  }
  ensure_finite(out, "softmax_rows");
  return out;
}

inline Tensor2D transpose(const Tensor2D& a) {
  Tensor2D t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < a.cols; ++j) {
      t.at(j, i) = a.at(i, j);
    }
  }
  return t;
}

// Euclidean norm, accumulated in double. Zero iff v is the zero vector.
inline float l2_norm(std::span<const float> v) {
  double sum = 0.0;
  for (float x : v) {
    sum += static_cast<double>(x) * static_cast<double>(x);
  }
  return static_cast<float>(std::sqrt(sum));
}

struct InitScheme {
  enum class Kind { zeros, normal } kind = Kind::zeros;
  double sigma = 0.0;

  static InitScheme zeros() { return {Kind::zeros, 0.0}; }
  static InitScheme normal(double sigma) { return {Kind::normal, sigma}; }
};

// Deterministic seeded initialization. Values are drawn in row-major order
// from a SplitMix64(seed) stream per the repo-wide PRNG contract.
inline Tensor2D seeded_init(std::size_t rows, std::size_t cols,
                            InitScheme scheme, std::uint64_t seed) {
  Tensor2D t(rows, cols, 0.0f);
  if (scheme.kind == InitScheme::Kind::normal) {
    if (!(scheme.sigma > 0.0)) {
      throw ConfigError("seeded_init: normal scheme requires sigma > 0");
    }
    SplitMix64 rng(seed);
    for (float& v : t.data) {
      v = static_cast<float>(scheme.sigma * rng.next_normal());
    }
  }
  ensure_finite(t, "seeded_init");
  return t;
}

}  // namespace kvnorm
