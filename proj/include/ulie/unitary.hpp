/*
 * Copyright 2026 The ulie Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>

#include "ulie/counters.hpp"
#include "ulie/lie.hpp"
#include "ulie/tensor.hpp"

namespace ulie {

enum class Mapping : std::uint32_t {
  /// m = c_in * d_H * d_W, k = c_out
  FanInToFanOut = 0,
  /// explicit (m, k) with m * k equal to the filter element count
  Custom = 1,
};

/**
 * Shape of a convolution filter bank and how it is viewed as an m x k matrix.
 *
 * With the default mapping, m is the flattened receptive field and k the
 * number of output channels, so the matrix maps one Toeplitz row (one patch)
 * to one output pixel vector.
 */
class FilterSpec {
 public:
  FilterSpec(std::size_t c_out, std::size_t c_in, std::size_t d_h, std::size_t d_w)
      : c_out_(c_out), c_in_(c_in), d_h_(d_h), d_w_(d_w), m_(c_in * d_h * d_w), k_(c_out) {
    validate();
  }

  static FilterSpec custom(std::size_t c_out, std::size_t c_in, std::size_t d_h, std::size_t d_w,
                           std::size_t m, std::size_t k) {
    FilterSpec s(c_out, c_in, d_h, d_w);
    s.mapping_ = Mapping::Custom;
    s.m_ = m;
    s.k_ = k;
    s.validate();
    return s;
  }

  /// A fully connected layer is a 1x1 filter bank.
  static FilterSpec dense(std::size_t fan_in, std::size_t fan_out) {
    return FilterSpec(fan_out, fan_in, 1, 1);
  }

  std::size_t c_out() const noexcept { return c_out_; }
  std::size_t c_in() const noexcept { return c_in_; }
  std::size_t d_h() const noexcept { return d_h_; }
  std::size_t d_w() const noexcept { return d_w_; }
  Mapping mapping() const noexcept { return mapping_; }

  std::size_t m() const noexcept { return m_; }
  std::size_t k() const noexcept { return k_; }
  std::size_t element_count() const noexcept { return c_out_ * c_in_ * d_h_ * d_w_; }

  /// Ambient dimension of the rotation the weight is cut from.
  std::size_t lie_dim() const noexcept { return std::max(m_, k_); }
  /// Number of kept columns (and active Lie parameter columns).
  std::size_t lie_cols() const noexcept { return std::min(m_, k_); }

  bool operator==(const FilterSpec&) const = default;

 private:
  void validate() const {
    if (c_out_ == 0 || c_in_ == 0 || d_h_ == 0 || d_w_ == 0) {
      throw ShapeError("FilterSpec: all filter dimensions must be positive");
    }
    if (m_ == 0 || k_ == 0 || m_ * k_ != element_count()) {
      throw ShapeError("FilterSpec: m*k = " + std::to_string(m_) + "*" + std::to_string(k_) +
                       " does not match filter element count " + std::to_string(element_count()));
    }
  }

  std::size_t c_out_, c_in_, d_h_, d_w_;
  Mapping mapping_ = Mapping::FanInToFanOut;
  std::size_t m_, k_;
};

enum class WeightCase {
  /// fan-in > fan-out: orthogonal projection, outputs renormalized
  Project,
  /// fan-in <= fan-out: isometric embedding, norms preserved exactly
  Isometry,
};

/**
 * Effective fan-in x fan-out matrix W with `y = x W` for a row vector x.
 *
 * Project case: W holds the first k columns of the m x m rotation.
 * Isometry case: W is the transpose of the first m columns of the k x k
 * rotation, so its rows are orthonormal.
 */
class UnitaryWeight {
 public:
  UnitaryWeight(Matrix w)
      : w_(std::move(w)),
        case_(w_.rows() > w_.cols() ? WeightCase::Project : WeightCase::Isometry) {}

  const Matrix& matrix() const noexcept { return w_; }
  WeightCase weight_case() const noexcept { return case_; }
  std::size_t fan_in() const noexcept { return w_.rows(); }
  std::size_t fan_out() const noexcept { return w_.cols(); }
  std::size_t source_dim() const noexcept { return std::max(w_.rows(), w_.cols()); }

  /// The kept columns of the rotation (V^T V = I).
  Matrix basis() const { return case_ == WeightCase::Project ? w_ : transpose(w_); }

 private:
  Matrix w_;
  WeightCase case_;
};

/// First `n` columns of `u`.
inline Matrix take_columns(const Matrix& u, std::size_t n) {
  if (n == 0 || n > u.cols()) {
    throw ShapeError("take_columns: cannot keep " + std::to_string(n) + " columns of " + u.shape());
  }
  Matrix out(u.rows(), n);
  for (std::size_t i = 0; i < u.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = u(i, j);
  return out;
}

/// Orients the leading columns of a rotation `u` into an m x k map.
inline UnitaryWeight weight_from_rotation(const Matrix& u, std::size_t m, std::size_t k) {
  if (!u.is_square() || u.rows() != std::max(m, k)) {
    throw ShapeError("weight_from_rotation: rotation " + u.shape() + " for m=" + std::to_string(m) +
                     " k=" + std::to_string(k));
  }
  Matrix kept = take_columns(u, std::min(m, k));
  return UnitaryWeight(m > k ? std::move(kept) : transpose(kept));
}

inline void check_lie_matches(const LieParams& lp, const FilterSpec& spec) {
  if (lp.m() != spec.lie_dim() || lp.k() != spec.lie_cols()) {
    throw ShapeError("LieParams (m=" + std::to_string(lp.m()) + ", k=" + std::to_string(lp.k()) +
                     ") do not match filter mapping (m=" + std::to_string(spec.m()) +
                     ", k=" + std::to_string(spec.k()) + "): need m=" +
                     std::to_string(spec.lie_dim()) + ", k=" + std::to_string(spec.lie_cols()));
  }
}

inline UnitaryWeight build_weight(const LieParams& lp, const FilterSpec& spec,
                                  const ExpmConfig& cfg = {}) {
  check_lie_matches(lp, spec);
  return weight_from_rotation(expm(lie_to_skew(lp), cfg), spec.m(), spec.k());
}

enum class ZeroNormPolicy { EpsilonGuard, Error };

struct NormalizeOptions {
  ZeroNormPolicy zero_policy = ZeroNormPolicy::EpsilonGuard;
  /// Norm-scale guard: rows are divided by sqrt(|y|^2 + epsilon^2).
  double epsilon = 1e-12;
  /// Rescale unit outputs back to the input row's norm instead of 1.
  bool preserve_input_norm = false;
};

/// Raised by the Error policy when a projected row has zero norm.
class ZeroNormError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Divides each row of `y` by its Euclidean norm; `x` supplies the target
/// norms when `opts.preserve_input_norm` is set.
inline void normalize_rows(Matrix& y, const Matrix& x, const NormalizeOptions& opts) {
  counters().row_normalizations.fetch_add(1, std::memory_order_relaxed);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    double sq = 0.0;
    for (double v : row) sq += v * v;
    if (opts.zero_policy == ZeroNormPolicy::Error && sq == 0.0) {
      throw ZeroNormError("normalize_rows: row " + std::to_string(r) + " has zero norm");
    }
    const double denom = opts.zero_policy == ZeroNormPolicy::Error ? std::sqrt(sq)
                                                                   : std::sqrt(sq + opts.epsilon * opts.epsilon);
    const double target = opts.preserve_input_norm ? l2_norm(x.row(r)) : 1.0;
    const double f = target / denom;
    for (double& v : row) v *= f;
  }
}

inline Matrix apply_weight(const UnitaryWeight& w, const Matrix& x, const NormalizeOptions& opts = {}) {
  if (x.cols() != w.fan_in()) {
    throw ShapeError("apply_weight: rows of length " + std::to_string(x.cols()) +
                     " into weight with fan-in " + std::to_string(w.fan_in()));
  }
  Matrix y = matmul(x, w.matrix());
  if (w.weight_case() == WeightCase::Project) normalize_rows(y, x, opts);
  return y;
}

/// (c_out, c_in, d_H, d_W) filters whose flattening under `spec` is `w`.
inline Tensor4 reshape_to_filters(const Matrix& w, const FilterSpec& spec) {
  if (w.rows() != spec.m() || w.cols() != spec.k()) {
    throw ShapeError("reshape_to_filters: weight " + w.shape() + " for mapping m=" +
                     std::to_string(spec.m()) + " k=" + std::to_string(spec.k()));
  }
  Tensor4 f(spec.c_out(), spec.c_in(), spec.d_h(), spec.d_w());
  if (spec.mapping() == Mapping::Custom) {
    std::copy(w.data().begin(), w.data().end(), f.data().begin());
    return f;
  }
  const std::size_t kh = spec.d_h(), kw = spec.d_w();
  for (std::size_t o = 0; o < spec.c_out(); ++o)
    for (std::size_t i = 0; i < spec.c_in(); ++i)
      for (std::size_t p = 0; p < kh; ++p)
        for (std::size_t q = 0; q < kw; ++q) f(o, i, p, q) = w((i * kh + p) * kw + q, o);
  return f;
}

inline Tensor4 reshape_to_filters(const UnitaryWeight& w, const FilterSpec& spec) {
  return reshape_to_filters(w.matrix(), spec);
}

/// Inverse of reshape_to_filters.
inline Matrix flatten_filters(const Tensor4& f, const FilterSpec& spec) {
  if (f.n() != spec.c_out() || f.c() != spec.c_in() || f.h() != spec.d_h() || f.w() != spec.d_w()) {
    throw ShapeError("flatten_filters: tensor " + f.shape() + " does not match spec");
  }
  Matrix w(spec.m(), spec.k());
  if (spec.mapping() == Mapping::Custom) {
    std::copy(f.data().begin(), f.data().end(), w.data().begin());
    return w;
  }
  const std::size_t kh = spec.d_h(), kw = spec.d_w();
  for (std::size_t o = 0; o < spec.c_out(); ++o)
    for (std::size_t i = 0; i < spec.c_in(); ++i)
      for (std::size_t p = 0; p < kh; ++p)
        for (std::size_t q = 0; q < kw; ++q) w((i * kh + p) * kw + q, o) = f(o, i, p, q);
  return w;
}

}  // namespace ulie
