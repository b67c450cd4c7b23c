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

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ulie/counters.hpp"
#include "ulie/tensor.hpp"

namespace ulie {

/// Raised when exponentiation would need more squarings than configured.
class OverflowError : public std::overflow_error {
 public:
  using std::overflow_error::overflow_error;
};

/**
 * Trainable generator of an m x m rotation.
 *
 * Only the strictly-lower-triangular entries of the first k columns are free;
 * the diagonal and everything right of column k-1 are implicitly zero. Values
 * are packed column by column: column 0 rows 1..m-1, then column 1 rows
 * 2..m-1, and so on.
 */
class LieParams {
 public:
  LieParams(std::size_t m, std::size_t k) : LieParams(m, k, std::vector<double>(packed_size(m, k))) {}

  LieParams(std::size_t m, std::size_t k, std::vector<double> values)
      : m_(m), k_(k), values_(std::move(values)) {
    if (k == 0 || m == 0 || k > m) {
      throw ShapeError("LieParams: need 1 <= k <= m, got m=" + std::to_string(m) +
                       " k=" + std::to_string(k));
    }
    if (values_.size() != packed_size(m, k)) {
      throw ShapeError("LieParams: expected " + std::to_string(packed_size(m, k)) +
                       " packed values for m=" + std::to_string(m) + " k=" + std::to_string(k) +
                       ", got " + std::to_string(values_.size()));
    }
  }

  /// k*m - k(k+1)/2
  static constexpr std::size_t packed_size(std::size_t m, std::size_t k) noexcept {
    return k * m - k * (k + 1) / 2;
  }

  static LieParams random_uniform(Rng& rng, std::size_t m, std::size_t k, double lo, double hi) {
    LieParams lp(m, k);
    for (double& v : lp.values_) v = rng.uniform(lo, hi);
    return lp;
  }

  std::size_t m() const noexcept { return m_; }
  std::size_t k() const noexcept { return k_; }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  /// Position of entry (row, col) in the packed array; requires row > col, col < k.
  std::size_t packed_index(std::size_t row, std::size_t col) const noexcept {
    // Columns before `col` contribute (m-1) + (m-2) + ... + (m-col) entries.
    return col * m_ - col * (col + 1) / 2 + (row - col - 1);
  }

  bool operator==(const LieParams&) const = default;

 private:
  std::size_t m_;
  std::size_t k_;
  std::vector<double> values_;
};

/// A = L - L^T, with A^T == -A bit for bit.
class SkewSymmetric {
 public:
  std::size_t m() const noexcept { return a_.rows(); }
  const Matrix& matrix() const noexcept { return a_; }

 private:
  explicit SkewSymmetric(Matrix a) : a_(std::move(a)) {}
  friend SkewSymmetric lie_to_skew(const LieParams& lp);

  Matrix a_;
};

struct ExpmConfig {
  std::size_t taylor_degree = 18;
  double scale_threshold = 1.0;
  std::size_t max_squarings = 32;
  /// false reproduces the bare truncated series with no scaling-and-squaring.
  bool scaling = true;

  static ExpmConfig strict_taylor() {
    ExpmConfig cfg;
    cfg.scaling = false;
    return cfg;
  }
};

inline Matrix unpack(const LieParams& lp) {
  Matrix l(lp.m(), lp.m());
  const auto v = lp.values();
  std::size_t idx = 0;
  for (std::size_t j = 0; j < lp.k(); ++j)
    for (std::size_t i = j + 1; i < lp.m(); ++i) l(i, j) = v[idx++];
  return l;
}

inline SkewSymmetric lie_to_skew(const LieParams& lp) {
  const std::size_t m = lp.m();
  Matrix a(m, m);
  const auto v = lp.values();
  std::size_t idx = 0;
  for (std::size_t j = 0; j < lp.k(); ++j) {
    for (std::size_t i = j + 1; i < m; ++i) {
      a(i, j) = v[idx];
      a(j, i) = -v[idx];
      ++idx;
    }
  }
  return SkewSymmetric(std::move(a));
}

/// Pullback of lie_to_skew: packed gradient g_ij = G(i,j) - G(j,i).
inline std::vector<double> skew_grad_to_packed(const Matrix& grad, std::size_t m, std::size_t k) {
  if (grad.rows() != m || grad.cols() != m) {
    throw ShapeError("skew_grad_to_packed: gradient " + grad.shape() + " for m=" + std::to_string(m));
  }
  std::vector<double> out(LieParams::packed_size(m, k));
  std::size_t idx = 0;
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = j + 1; i < m; ++i) out[idx++] = grad(i, j) - grad(j, i);
  return out;
}

namespace detail {

/// Block size for Paterson-Stockmeyer evaluation of a degree-`degree`
/// polynomial: minimizes the matrix product count, ties go to the larger block.
inline std::size_t ps_block_size(std::size_t degree) {
  std::size_t best = 1;
  std::size_t best_cost = std::numeric_limits<std::size_t>::max();
  for (std::size_t s = 1; s <= degree; ++s) {
    const std::size_t blocks = degree / s + 1;
    const bool scalar_top = degree % s == 0;
    const std::size_t cost = (s - 1) + (blocks - 1) - (scalar_top ? 1 : 0);
    if (cost <= best_cost) {
      best_cost = cost;
      best = s;
    }
  }
  return best;
}

inline std::vector<double> taylor_coefficients(std::size_t degree) {
  std::vector<double> c(degree + 1);
  c[0] = 1.0;
  for (std::size_t n = 1; n <= degree; ++n) c[n] = c[n - 1] / static_cast<double>(n);
  return c;
}

}  // namespace detail

/**
 * Forward intermediates of one exponential, kept so the pullback can replay
 * the same products in reverse.
 *
 * The polynomial is p(X) = sum_{n<=deg} X^n / n! evaluated as
 *   H_{q-1} = B_{q-1},  H_j = B_j + X^s H_{j+1},  p(X) = H_0,
 * where B_j holds the coefficients js .. js+s-1 against X^0 .. X^{s-1}.
 */
struct ExpmTrace {
  ExpmConfig cfg;
  std::size_t squarings = 0;
  double scale = 1.0;
  std::size_t block = 1;
  bool scalar_top = false;
  std::vector<Matrix> powers;   // powers[i] = X^(i+1), i < block
  std::vector<Matrix> horner;   // horner[j] = H_j
  std::vector<Matrix> squares;  // squares[0] = p(X), squares[t+1] = squares[t]^2

  const Matrix& result() const { return squares.back(); }
};

inline ExpmTrace expm_trace(const Matrix& a, const ExpmConfig& cfg = {}) {
  if (!a.is_square()) throw ShapeError("expm: input must be square, got " + a.shape());
  if (cfg.taylor_degree < 1) throw ContractError("expm: taylor_degree must be >= 1");
  counters().expm_calls.fetch_add(1, std::memory_order_relaxed);

  const std::size_t n = a.rows();
  ExpmTrace t;
  t.cfg = cfg;

  const double norm = one_norm(a);
  if (!std::isfinite(norm)) throw OverflowError("expm: input has non-finite entries");
  if (cfg.scaling && norm > cfg.scale_threshold) {
    auto s = static_cast<std::size_t>(std::ceil(std::log2(norm / cfg.scale_threshold)));
    while (std::ldexp(norm, -static_cast<int>(s)) > cfg.scale_threshold) ++s;
    if (s > cfg.max_squarings) {
      throw OverflowError("expm: needs " + std::to_string(s) + " squarings (limit " +
                          std::to_string(cfg.max_squarings) + "), 1-norm " + std::to_string(norm));
    }
    t.squarings = s;
  }
  t.scale = std::ldexp(1.0, -static_cast<int>(t.squarings));

  const std::size_t deg = cfg.taylor_degree;
  const auto c = detail::taylor_coefficients(deg);
  const std::size_t s = detail::ps_block_size(deg);
  const std::size_t q = deg / s + 1;
  t.block = s;
  t.scalar_top = deg % s == 0;

  t.powers.reserve(s);
  t.powers.push_back(t.squarings == 0 ? a : scale(a, t.scale));
  for (std::size_t i = 2; i <= s; ++i) {
    const std::size_t lo = i / 2;
    t.powers.push_back(matmul(t.powers[lo - 1], t.powers[i - lo - 1]));
  }

  auto block_sum = [&](std::size_t j) {
    Matrix b(n, n);
    const std::size_t first = j * s;
    for (std::size_t d = 0; d < n; ++d) b(d, d) = c[first];
    for (std::size_t i = 1; i < s && first + i <= deg; ++i) axpy(c[first + i], t.powers[i - 1], b);
    return b;
  };

  t.horner.resize(q);
  std::size_t j;
  if (t.scalar_top) {
    Matrix h = block_sum(q - 2);
    axpy(c[deg], t.powers[s - 1], h);
    t.horner[q - 2] = std::move(h);
    j = q - 2;
  } else {
    t.horner[q - 1] = block_sum(q - 1);
    j = q - 1;
  }
  while (j-- > 0) {
    t.horner[j] = add(block_sum(j), matmul(t.powers[s - 1], t.horner[j + 1]));
  }

  t.squares.reserve(t.squarings + 1);
  t.squares.push_back(t.horner[0]);
  for (std::size_t k = 0; k < t.squarings; ++k) {
    t.squares.push_back(matmul(t.squares.back(), t.squares.back()));
  }
  return t;
}

/// Reverse-mode pullback of the exact product sequence recorded in `t`.
inline Matrix expm_backward(const ExpmTrace& t, const Matrix& upstream) {
  const Matrix& x0 = t.squares.front();
  require_same_shape(x0, upstream, "expm_backward");
  const std::size_t n = x0.rows();
  const std::size_t s = t.block;
  const std::size_t q = t.horner.size();
  const std::size_t deg = t.cfg.taylor_degree;
  const auto c = detail::taylor_coefficients(deg);

  Matrix g = upstream;
  for (std::size_t k = t.squarings; k-- > 0;) {
    const Matrix& x = t.squares[k];
    g = add(matmul_nt(g, x), matmul_tn(x, g));
  }

  std::vector<Matrix> gpow(s, Matrix(n, n));
  auto scatter_block = [&](std::size_t j, const Matrix& gb) {
    const std::size_t first = j * s;
    for (std::size_t i = 1; i < s && first + i <= deg; ++i) axpy(c[first + i], gb, gpow[i - 1]);
  };

  // g is the adjoint of H_j as we walk outward through the Horner chain.
  const std::size_t last_product = t.scalar_top ? q - 2 : q - 1;
  for (std::size_t j = 0; j < last_product; ++j) {
    scatter_block(j, g);
    axpy(1.0, matmul_nt(g, t.horner[j + 1]), gpow[s - 1]);
    g = matmul_tn(t.powers[s - 1], g);
  }
  scatter_block(last_product, g);
  if (t.scalar_top) axpy(c[deg], g, gpow[s - 1]);

  for (std::size_t i = s; i >= 2; --i) {
    const std::size_t lo = i / 2, hi = i - lo;
    const Matrix& pa = t.powers[lo - 1];
    const Matrix& pb = t.powers[hi - 1];
    const Matrix gi = gpow[i - 1];
    axpy(1.0, matmul_nt(gi, pb), gpow[lo - 1]);
    axpy(1.0, matmul_tn(pa, gi), gpow[hi - 1]);
  }
  return t.squarings == 0 ? gpow[0] : scale(gpow[0], t.scale);
}

inline Matrix expm(const Matrix& a, const ExpmConfig& cfg = {}) {
  auto t = expm_trace(a, cfg);
  return std::move(t.squares.back());
}

inline Matrix expm(const SkewSymmetric& a, const ExpmConfig& cfg = {}) { return expm(a.matrix(), cfg); }

/// Gradient of <upstream, expm(a)> with respect to a.
inline Matrix expm_grad(const Matrix& a, const Matrix& upstream, const ExpmConfig& cfg = {}) {
  require_same_shape(a, upstream, "expm_grad");
  return expm_backward(expm_trace(a, cfg), upstream);
}

inline Matrix expm_grad(const SkewSymmetric& a, const Matrix& upstream, const ExpmConfig& cfg = {}) {
  return expm_grad(a.matrix(), upstream, cfg);
}

}  // namespace ulie
