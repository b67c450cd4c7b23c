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
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ulie/conv.hpp"
#include "ulie/lie.hpp"
#include "ulie/tensor.hpp"
#include "ulie/unitary.hpp"

namespace ulie {

/**
 * Eager reverse-mode tape.
 *
 * Every op computes its value immediately and appends a node holding the
 * input ids plus a pullback closure over whatever forward values it needs.
 * Nodes are appended in evaluation order, so walking them backwards is a
 * valid reverse topological order.
 */
class Tape {
 public:
  using Id = std::size_t;
  /// Maps the output adjoint to one adjoint per input (same order as inputs).
  using Pullback = std::function<std::vector<Matrix>(const Matrix& grad_out)>;

  enum class Op {
    Leaf, Constant, MatMul, Add, AddRow, Scale, Transpose, Skew, Expm, TakeColumns,
    Im2Col, RowNormalize, RowRescale, Relu, MeanPool, CrossEntropy, Sum, Custom,
  };

  struct Node {
    Op op;
    std::vector<Id> inputs;
    Matrix value;
    bool requires_grad;
    Pullback pullback;
  };

  class Gradients {
   public:
    explicit Gradients(std::vector<std::optional<Matrix>> g, const Tape& tape)
        : grads_(std::move(g)), tape_(&tape) {}
    bool has(Id id) const { return id < grads_.size() && grads_[id].has_value(); }
    /// Adjoint of node `id`; zeros when the loss does not depend on it.
    Matrix of(Id id) const {
      if (has(id)) return *grads_[id];
      const Matrix& v = tape_->value(id);
      return Matrix(v.rows(), v.cols());
    }

   private:
    std::vector<std::optional<Matrix>> grads_;
    const Tape* tape_;
  };

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(Id id) const { return nodes_.at(id); }
  const Matrix& value(Id id) const { return nodes_.at(id).value; }

  Id leaf(Matrix value, bool requires_grad = true) {
    return push(Op::Leaf, {}, std::move(value), requires_grad, nullptr);
  }
  Id constant(Matrix value) { return push(Op::Constant, {}, std::move(value), false, nullptr); }

  Id matmul(Id a, Id b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    return push(Op::MatMul, {a, b}, ulie::matmul(av, bv), any_grad({a, b}),
                [av, bv](const Matrix& g) -> std::vector<Matrix> {
                  return {matmul_nt(g, bv), matmul_tn(av, g)};
                });
  }

  Id add(Id a, Id b) {
    return push(Op::Add, {a, b}, ulie::add(value(a), value(b)), any_grad({a, b}),
                [](const Matrix& g) -> std::vector<Matrix> { return {g, g}; });
  }

  /// x + bias broadcast over rows; bias is 1 x cols.
  Id add_row(Id x, Id bias) {
    const Matrix& xv = value(x);
    const Matrix& bv = value(bias);
    if (bv.rows() != 1 || bv.cols() != xv.cols()) {
      throw ShapeError("add_row: bias " + bv.shape() + " for input " + xv.shape());
    }
    Matrix out = xv;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv(0, j);
    return push(Op::AddRow, {x, bias}, std::move(out), any_grad({x, bias}),
                [](const Matrix& g) -> std::vector<Matrix> {
                  Matrix gb(1, g.cols());
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j) gb(0, j) += g(i, j);
                  return {g, gb};
                });
  }

  Id scale(Id x, double s) {
    return push(Op::Scale, {x}, ulie::scale(value(x), s), any_grad({x}),
                [s](const Matrix& g) -> std::vector<Matrix> { return {ulie::scale(g, s)}; });
  }

  Id transpose(Id x) {
    return push(Op::Transpose, {x}, ulie::transpose(value(x)), any_grad({x}),
                [](const Matrix& g) -> std::vector<Matrix> { return {ulie::transpose(g)}; });
  }

  /// Packed Lie parameters (1 x P) to the m x m skew-symmetric generator.
  Id skew(Id packed, std::size_t m, std::size_t k) {
    const Matrix& pv = value(packed);
    if (pv.rows() != 1 || pv.cols() != LieParams::packed_size(m, k)) {
      throw ShapeError("skew: packed " + pv.shape() + " for m=" + std::to_string(m) +
                       " k=" + std::to_string(k));
    }
    LieParams lp(m, k, std::vector<double>(pv.data().begin(), pv.data().end()));
    return push(Op::Skew, {packed}, lie_to_skew(lp).matrix(), any_grad({packed}),
                [m, k](const Matrix& g) -> std::vector<Matrix> {
                  auto packed_grad = skew_grad_to_packed(g, m, k);
                  const std::size_t n = packed_grad.size();
                  return {Matrix(1, n, std::move(packed_grad))};
                });
  }

  Id expm(Id a, const ExpmConfig& cfg = {}) {
    return expm_traced(a, std::make_shared<const ExpmTrace>(expm_trace(value(a), cfg)));
  }

  /// Exponential whose forward pass was computed elsewhere (possibly at an
  /// earlier parameter value, when weights are shared across steps).
  Id expm_traced(Id a, std::shared_ptr<const ExpmTrace> trace) {
    if (trace->result().rows() != value(a).rows()) {
      throw ShapeError("expm_traced: trace does not match input " + value(a).shape());
    }
    Matrix out = trace->result();
    return push(Op::Expm, {a}, std::move(out), any_grad({a}),
                [trace = std::move(trace)](const Matrix& g) -> std::vector<Matrix> {
                  return {expm_backward(*trace, g)};
                });
  }

  Id take_columns(Id u, std::size_t n) {
    const Matrix& uv = value(u);
    const std::size_t rows = uv.rows(), cols = uv.cols();
    return push(Op::TakeColumns, {u}, ulie::take_columns(uv, n), any_grad({u}),
                [rows, cols, n](const Matrix& g) -> std::vector<Matrix> {
                  Matrix gu(rows, cols);
                  for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < n; ++j) gu(i, j) = g(i, j);
                  return {gu};
                });
  }

  /// Pixel-row activation ((batch*h*w) x c_in) to its Toeplitz matrix.
  Id im2col(Id act, std::size_t batch, const ConvGeometry& g) {
    return push(Op::Im2Col, {act}, im2col_rows(value(act), batch, g), any_grad({act}),
                [batch, g](const Matrix& grad) -> std::vector<Matrix> {
                  return {col2im_rows(grad, batch, g)};
                });
  }

  /// y_r / ||y_r|| per row, with the zero-norm policy of `opts`.
  Id row_normalize(Id y, const NormalizeOptions& opts = {}) {
    const Matrix& yv = value(y);
    Matrix out = yv;
    NormalizeOptions unit = opts;
    unit.preserve_input_norm = false;
    normalize_rows(out, yv, unit);
    const double eps = opts.zero_policy == ZeroNormPolicy::EpsilonGuard ? opts.epsilon * opts.epsilon : 0.0;
    return push(Op::RowNormalize, {y}, std::move(out), any_grad({y}),
                [yv, eps](const Matrix& g) -> std::vector<Matrix> {
                  // d(y/n) = (I/n - y y^T / n^3) dy, n = sqrt(|y|^2 + eps^2)
                  Matrix gy(yv.rows(), yv.cols());
                  for (std::size_t r = 0; r < yv.rows(); ++r) {
                    const auto yr = yv.row(r);
                    const auto gr = g.row(r);
                    double sq = 0.0, dot = 0.0;
                    for (std::size_t j = 0; j < yr.size(); ++j) {
                      sq += yr[j] * yr[j];
                      dot += yr[j] * gr[j];
                    }
                    const double n = std::sqrt(sq + eps);
                    if (n == 0.0) continue;
                    const double inv = 1.0 / n, inv3 = inv * inv * inv;
                    for (std::size_t j = 0; j < yr.size(); ++j) gy(r, j) = gr[j] * inv - yr[j] * dot * inv3;
                  }
                  return {gy};
                });
  }

  /// z_r * ||x_r|| per row.
  Id row_rescale(Id z, Id x) {
    const Matrix& zv = value(z);
    const Matrix& xv = value(x);
    if (zv.rows() != xv.rows()) throw ShapeError("row_rescale: " + zv.shape() + " vs " + xv.shape());
    std::vector<double> norms(xv.rows());
    Matrix out = zv;
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      norms[r] = l2_norm(xv.row(r));
      for (double& v : out.row(r)) v *= norms[r];
    }
    return push(Op::RowRescale, {z, x}, std::move(out), any_grad({z, x}),
                [zv, xv, norms](const Matrix& g) -> std::vector<Matrix> {
                  Matrix gz(zv.rows(), zv.cols());
                  Matrix gx(xv.rows(), xv.cols());
                  for (std::size_t r = 0; r < zv.rows(); ++r) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < zv.cols(); ++j) {
                      gz(r, j) = g(r, j) * norms[r];
                      dot += g(r, j) * zv(r, j);
                    }
                    if (norms[r] == 0.0) continue;
                    for (std::size_t j = 0; j < xv.cols(); ++j) gx(r, j) = dot * xv(r, j) / norms[r];
                  }
                  return {gz, gx};
                });
  }

  Id relu(Id x) {
    Matrix out = value(x);
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    Matrix mask = out;
    for (double& v : mask.data()) v = v > 0.0 ? 1.0 : 0.0;
    return push(Op::Relu, {x}, std::move(out), any_grad({x}),
                [mask = std::move(mask)](const Matrix& g) -> std::vector<Matrix> {
                  Matrix gx = g;
                  for (std::size_t i = 0; i < gx.size(); ++i) gx.data()[i] *= mask.data()[i];
                  return {gx};
                });
  }

  /// Mean over each image's pixels: (batch*hw) x c -> batch x c.
  Id mean_pool(Id act, std::size_t batch) {
    const Matrix& av = value(act);
    if (batch == 0 || av.rows() % batch != 0) {
      throw ShapeError("mean_pool: " + av.shape() + " is not a whole number of images");
    }
    const std::size_t hw = av.rows() / batch;
    Matrix out(batch, av.cols());
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t c = 0; c < av.cols(); ++c) out(b, c) += av(b * hw + p, c);
    const double inv = 1.0 / static_cast<double>(hw);
    for (double& v : out.data()) v *= inv;
    return push(Op::MeanPool, {act}, std::move(out), any_grad({act}),
                [batch, hw, inv](const Matrix& g) -> std::vector<Matrix> {
                  Matrix ga(batch * hw, g.cols());
                  for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t p = 0; p < hw; ++p)
                      for (std::size_t c = 0; c < g.cols(); ++c) ga(b * hw + p, c) = g(b, c) * inv;
                  return {ga};
                });
  }

  /// Mean softmax cross-entropy of logits (batch x classes) against labels.
  Id cross_entropy(Id logits, std::span<const int> labels) {
    const Matrix& lv = value(logits);
    if (labels.size() != lv.rows()) {
      throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " + lv.shape());
    }
    Matrix probs(lv.rows(), lv.cols());
    double loss = 0.0;
    for (std::size_t r = 0; r < lv.rows(); ++r) {
      const auto row = lv.row(r);
      const double mx = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (std::size_t j = 0; j < row.size(); ++j) z += std::exp(row[j] - mx);
      for (std::size_t j = 0; j < row.size(); ++j) probs(r, j) = std::exp(row[j] - mx) / z;
      const auto label = static_cast<std::size_t>(labels[r]);
      if (labels[r] < 0 || label >= lv.cols()) throw ShapeError("cross_entropy: label out of range");
      loss += -(row[label] - mx - std::log(z));
    }
    const double inv = 1.0 / static_cast<double>(lv.rows());
    std::vector<int> lab(labels.begin(), labels.end());
    return push(Op::CrossEntropy, {logits}, Matrix(1, 1, loss * inv), any_grad({logits}),
                [probs = std::move(probs), lab = std::move(lab), inv](const Matrix& g) -> std::vector<Matrix> {
                  Matrix gl = probs;
                  for (std::size_t r = 0; r < gl.rows(); ++r) gl(r, static_cast<std::size_t>(lab[r])) -= 1.0;
                  return {ulie::scale(gl, inv * g(0, 0))};
                });
  }

  Id sum(Id x) {
    const Matrix& xv = value(x);
    double s = 0.0;
    for (double v : xv.data()) s += v;
    const std::size_t r = xv.rows(), c = xv.cols();
    return push(Op::Sum, {x}, Matrix(1, 1, s), any_grad({x}),
                [r, c](const Matrix& g) -> std::vector<Matrix> { return {Matrix(r, c, g(0, 0))}; });
  }

  /// Escape hatch for ops defined outside the tape.
  Id custom(std::vector<Id> inputs, Matrix value, Pullback pullback) {
    const bool rg = any_grad(inputs);
    return push(Op::Custom, std::move(inputs), std::move(value), rg, std::move(pullback));
  }

  Gradients backward(Id loss) const {
    const Matrix& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ContractError("backward: loss must be a 1x1 scalar, got " + lv.shape());
    }
    std::vector<std::optional<Matrix>> grads(nodes_.size());
    grads[loss] = Matrix(1, 1, 1.0);
    for (Id id = loss + 1; id-- > 0;) {
      const Node& n = nodes_[id];
      if (!grads[id] || !n.requires_grad || !n.pullback) continue;
      auto in_grads = n.pullback(*grads[id]);
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const Id in = n.inputs[i];
        if (!nodes_[in].requires_grad) continue;
        if (grads[in]) {
          axpy(1.0, in_grads[i], *grads[in]);
        } else {
          grads[in] = std::move(in_grads[i]);
        }
      }
    }
    return Gradients(std::move(grads), *this);
  }

 private:
  bool any_grad(std::initializer_list<Id> ids) const {
    return std::any_of(ids.begin(), ids.end(), [&](Id i) { return nodes_.at(i).requires_grad; });
  }
  bool any_grad(const std::vector<Id>& ids) const {
    return std::any_of(ids.begin(), ids.end(), [&](Id i) { return nodes_.at(i).requires_grad; });
  }

  Id push(Op op, std::vector<Id> inputs, Matrix value, bool requires_grad, Pullback pullback) {
    nodes_.push_back({op, std::move(inputs), std::move(value), requires_grad, std::move(pullback)});
    return nodes_.size() - 1;
  }

  std::vector<Node> nodes_;
};

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 2e-4;
  /// (epoch, divisor): from `epoch` on, the rate is divided by `divisor`.
  std::vector<std::pair<std::size_t, double>> schedule{{100, 10.0}, {150, 10.0}, {200, 10.0}};

  void validate() const {
    if (!(lr > 0.0)) throw ContractError("SgdConfig: lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ContractError("SgdConfig: momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ContractError("SgdConfig: weight_decay must be non-negative");
  }

  double lr_at(std::size_t epoch) const {
    double rate = lr;
    for (const auto& [at, divisor] : schedule)
      if (epoch >= at) rate /= divisor;
    return rate;
  }
};

/// Momentum buffers, one per parameter block.
struct SgdState {
  std::vector<std::vector<double>> velocity;
};

/// v <- momentum v + (g + wd w);  w <- w - lr(epoch) v
inline void sgd_step(std::span<const std::span<double>> params, std::span<const Matrix> grads,
                     SgdState& state, const SgdConfig& cfg, std::size_t epoch) {
  if (params.size() != grads.size()) {
    throw ShapeError("sgd_step: " + std::to_string(params.size()) + " parameter blocks but " +
                     std::to_string(grads.size()) + " gradients");
  }
  if (state.velocity.size() != params.size()) {
    state.velocity.resize(params.size());
  }
  const double lr = cfg.lr_at(epoch);
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto w = params[b];
    auto g = grads[b].data();
    if (w.size() != g.size()) {
      throw ShapeError("sgd_step: block " + std::to_string(b) + " has " + std::to_string(w.size()) +
                       " values but gradient has " + std::to_string(g.size()));
    }
    auto& v = state.velocity[b];
    if (v.size() != w.size()) v.assign(w.size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = cfg.momentum * v[i] + (g[i] + cfg.weight_decay * w[i]);
      w[i] -= lr * v[i];
    }
  }
}

struct GradCheckReport {
  std::vector<double> relative_errors;
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double tolerance = 0.0;
  bool passed = true;
};

/// Relative error with the denominator floored, so parameters with
/// vanishing gradients are judged on absolute error at that scale.
inline double gradient_relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/**
 * Compares reverse-mode gradients against central differences.
 *
 * `loss_fn` rebuilds the scalar loss on a fresh tape from leaves holding the
 * current parameter values; it is called 2P + 1 times for P scalars.
 */
inline GradCheckReport grad_check(
    const std::function<Tape::Id(Tape&, const std::vector<Tape::Id>&)>& loss_fn,
    std::vector<Matrix> params, double tolerance, double h = 1e-6, double floor = 1e-3) {
  auto evaluate = [&](const std::vector<Matrix>& ps) {
    Tape tape;
    std::vector<Tape::Id> ids;
    for (const auto& p : ps) ids.push_back(tape.leaf(p));
    const Tape::Id loss = loss_fn(tape, ids);
    return std::make_pair(std::move(tape), std::make_pair(ids, loss));
  };

  auto [tape, refs] = evaluate(params);
  const auto grads = tape.backward(refs.second);

  GradCheckReport report;
  report.tolerance = tolerance;
  std::size_t flat = 0;
  for (std::size_t b = 0; b < params.size(); ++b) {
    const Matrix analytic = grads.of(refs.first[b]);
    for (std::size_t i = 0; i < params[b].size(); ++i, ++flat) {
      const double orig = params[b].data()[i];
      params[b].data()[i] = orig + h;
      auto [tp, rp] = evaluate(params);
      const double fp = tp.value(rp.second)(0, 0);
      params[b].data()[i] = orig - h;
      auto [tm, rm] = evaluate(params);
      const double fm = tm.value(rm.second)(0, 0);
      params[b].data()[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = gradient_relative_error(analytic.data()[i], numeric, floor);
      report.relative_errors.push_back(err);
      if (err > report.max_relative_error || !std::isfinite(err)) {
        report.max_relative_error = err;
        report.worst_index = flat;
      }
    }
  }
  report.passed = std::isfinite(report.max_relative_error) && report.max_relative_error <= tolerance;
  return report;
}

}  // namespace ulie
