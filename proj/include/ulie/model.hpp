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
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "ulie/autograd.hpp"
#include "ulie/conv.hpp"
#include "ulie/lie.hpp"
#include "ulie/tensor.hpp"
#include "ulie/unitary.hpp"

namespace ulie {

/**
 * One convolution of the stack. Exactly one weight source is set:
 * trainable Lie parameters, a frozen exponentiated weight, or a free
 * (non-unitary) filter matrix for baselines.
 */
struct ConvLayer {
  FilterSpec spec;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::optional<LieParams> lie;
  std::optional<UnitaryWeight> cached;
  std::optional<Matrix> plain;

  static ConvLayer unitary(const FilterSpec& spec, LieParams lp, std::size_t stride = 1, std::size_t pad = 0) {
    check_lie_matches(lp, spec);
    ConvLayer l{spec, stride, pad, std::move(lp), std::nullopt, std::nullopt};
    return l;
  }
  static ConvLayer frozen(const FilterSpec& spec, UnitaryWeight w, std::size_t stride = 1, std::size_t pad = 0) {
    if (w.fan_in() != spec.m() || w.fan_out() != spec.k()) {
      throw ShapeError("ConvLayer::frozen: weight " + w.matrix().shape() + " does not match spec");
    }
    return ConvLayer{spec, stride, pad, std::nullopt, std::move(w), std::nullopt};
  }
  static ConvLayer unconstrained(const FilterSpec& spec, Matrix w, std::size_t stride = 1, std::size_t pad = 0) {
    if (spec.mapping() != Mapping::FanInToFanOut || w.rows() != spec.m() || w.cols() != spec.k()) {
      throw ShapeError("ConvLayer::unconstrained: weight " + w.shape() + " does not match spec");
    }
    return ConvLayer{spec, stride, pad, std::nullopt, std::nullopt, std::move(w)};
  }

  bool is_unitary() const noexcept { return lie.has_value() || cached.has_value(); }

  ConvGeometry geometry(std::size_t h, std::size_t w) const {
    return ConvGeometry::for_filters(spec, h, w, stride, pad);
  }
};

struct DenseHead {
  Matrix w;  // features x classes
  Matrix b;  // 1 x classes
};

struct NetworkOptions {
  ExpmConfig expm;
  NormalizeOptions normalize;
  /// Batch-parallel inference; results are identical for any count.
  std::size_t threads = 1;
};

/// Conv stack (relu after every conv), global average pool, dense head.
class Network {
 public:
  Network(std::vector<ConvLayer> convs, DenseHead head, NetworkOptions opts = {})
      : convs_(std::move(convs)), head_(std::move(head)), opts_(opts) {
    for (std::size_t i = 1; i < convs_.size(); ++i) {
      if (convs_[i].spec.c_in() != convs_[i - 1].spec.c_out()) {
        throw ShapeError("Network: layer " + std::to_string(i) + " expects " +
                         std::to_string(convs_[i].spec.c_in()) + " channels, previous layer emits " +
                         std::to_string(convs_[i - 1].spec.c_out()));
      }
    }
    const std::size_t features = convs_.empty() ? head_.w.rows() : convs_.back().spec.c_out();
    if (head_.w.rows() != features || head_.b.rows() != 1 || head_.b.cols() != head_.w.cols()) {
      throw ShapeError("Network: head " + head_.w.shape() + " / bias " + head_.b.shape() +
                       " does not fit " + std::to_string(features) + " features");
    }
  }

  const std::vector<ConvLayer>& layers() const noexcept { return convs_; }
  std::vector<ConvLayer>& layers() noexcept { return convs_; }
  const DenseHead& head() const noexcept { return head_; }
  DenseHead& head() noexcept { return head_; }
  const NetworkOptions& options() const noexcept { return opts_; }
  NetworkOptions& options() noexcept { return opts_; }
  std::size_t classes() const noexcept { return head_.w.cols(); }
  std::size_t input_channels() const noexcept {
    return convs_.empty() ? head_.w.rows() : convs_.front().spec.c_in();
  }

  /// True when no layer still needs an exponential to run.
  bool is_cached() const {
    return std::none_of(convs_.begin(), convs_.end(), [](const ConvLayer& l) { return l.lie.has_value(); });
  }
  bool has_lie_parameters() const {
    return std::none_of(convs_.begin(), convs_.end(), [](const ConvLayer& l) { return l.cached.has_value(); });
  }

  /// Forward weight of a unitary layer: the frozen one, or exponentiated now.
  UnitaryWeight unitary_weight(const ConvLayer& l) const {
    if (l.cached) return *l.cached;
    return build_weight(*l.lie, l.spec, opts_.expm);
  }

  /// Logits for a batch, without recording a tape.
  Matrix predict(const Tensor4& batch) const {
    std::vector<std::optional<UnitaryWeight>> weights;
    weights.reserve(convs_.size());
    for (const auto& l : convs_) {
      weights.push_back(l.is_unitary() ? std::optional<UnitaryWeight>(unitary_weight(l)) : std::nullopt);
    }
    const std::size_t threads = std::max<std::size_t>(1, std::min(opts_.threads, batch.n()));
    if (threads == 1) return predict_with(weights, batch);

    const std::size_t per = (batch.n() + threads - 1) / threads;
    std::vector<Matrix> parts(threads);
    {
      std::vector<std::jthread> pool;
      for (std::size_t t = 0; t < threads; ++t) {
        const std::size_t lo = t * per, hi = std::min(batch.n(), lo + per);
        if (lo >= hi) break;
        pool.emplace_back([&, t, lo, hi] { parts[t] = predict_with(weights, slice(batch, lo, hi)); });
      }
    }
    Matrix out(batch.n(), classes());
    std::size_t row = 0;
    for (std::size_t t = 0; t < threads && row < batch.n(); ++t)
      for (std::size_t r = 0; r < parts[t].rows(); ++r, ++row)
        std::copy(parts[t].row(r).begin(), parts[t].row(r).end(), out.row(row).begin());
    return out;
  }

  /// Views of every trainable scalar, in the order `parameter_values` uses.
  std::vector<std::span<double>> parameter_blocks() {
    std::vector<std::span<double>> blocks;
    for (auto& l : convs_) {
      if (l.lie && !l.lie->values().empty()) blocks.push_back(l.lie->values());
      if (l.plain) blocks.push_back(l.plain->data());
    }
    blocks.push_back(head_.w.data());
    blocks.push_back(head_.b.data());
    return blocks;
  }

  /// Current parameters as tape-ready matrices (lie blocks are 1 x P).
  std::vector<Matrix> parameter_values() const {
    std::vector<Matrix> out;
    for (const auto& l : convs_) {
      if (l.lie && !l.lie->values().empty()) {
        const auto v = l.lie->values();
        out.emplace_back(1, v.size(), std::vector<double>(v.begin(), v.end()));
      }
      if (l.plain) out.push_back(*l.plain);
    }
    out.push_back(head_.w);
    out.push_back(head_.b);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& m : parameter_values()) n += m.size();
    return n;
  }

  /**
   * Records the loss on `tape`. `params` are leaves matching
   * parameter_values(). When `traces` is given, it holds one exponential
   * trace slot per layer; slots are reused unless `refresh` is set, which is
   * how weights get shared across several optimizer steps.
   */
  Tape::Id tape_loss(Tape& tape, std::span<const Tape::Id> params, const Tensor4& batch,
                     std::span<const int> labels,
                     std::vector<std::shared_ptr<const ExpmTrace>>* traces = nullptr,
                     bool refresh = true) const {
    return tape.cross_entropy(tape_logits(tape, params, batch, traces, refresh), labels);
  }

  Tape::Id tape_logits(Tape& tape, std::span<const Tape::Id> params, const Tensor4& batch,
                       std::vector<std::shared_ptr<const ExpmTrace>>* traces = nullptr,
                       bool refresh = true) const {
    check_input(batch);
    if (traces && traces->size() != convs_.size()) traces->resize(convs_.size());
    std::size_t p = 0;
    std::size_t h = batch.h(), w = batch.w();
    Tape::Id act = tape.constant(nchw_to_rows(batch));
    for (std::size_t li = 0; li < convs_.size(); ++li) {
      const ConvLayer& l = convs_[li];
      const ConvGeometry g = l.geometry(h, w);
      const Tape::Id cols = tape.im2col(act, batch.n(), g);
      Tape::Id weight;
      if (l.lie) {
        weight = tape_unitary_weight(tape, l, params, p, traces ? &(*traces)[li] : nullptr, refresh);
      } else if (l.cached) {
        weight = tape.constant(conv_columns(*l.cached, l.spec));
      } else {
        weight = params[p++];
      }
      Tape::Id y = tape.matmul(cols, weight);
      if (l.is_unitary() && l.spec.m() > l.spec.k()) {
        Tape::Id z = tape.row_normalize(y, opts_.normalize);
        y = opts_.normalize.preserve_input_norm ? tape.row_rescale(z, cols) : z;
      }
      act = tape.relu(y);
      h = g.h_out();
      w = g.w_out();
    }
    const Tape::Id pooled = tape.mean_pool(act, batch.n());
    const Tape::Id wid = params[p++];
    const Tape::Id bid = params[p++];
    return tape.add_row(tape.matmul(pooled, wid), bid);
  }

 private:
  void check_input(const Tensor4& batch) const {
    if (batch.n() == 0 || batch.c() != input_channels()) {
      throw ShapeError("Network: input " + batch.shape() + " but first layer expects " +
                       std::to_string(input_channels()) + " channels");
    }
  }

  static Tensor4 slice(const Tensor4& t, std::size_t lo, std::size_t hi) {
    const std::size_t per = t.c() * t.h() * t.w();
    std::vector<double> d(t.data().begin() + static_cast<std::ptrdiff_t>(lo * per),
                          t.data().begin() + static_cast<std::ptrdiff_t>(hi * per));
    return Tensor4(hi - lo, t.c(), t.h(), t.w(), std::move(d));
  }

  Matrix predict_with(const std::vector<std::optional<UnitaryWeight>>& weights, const Tensor4& batch) const {
    check_input(batch);
    Matrix act = nchw_to_rows(batch);
    std::size_t h = batch.h(), w = batch.w();
    for (std::size_t li = 0; li < convs_.size(); ++li) {
      const ConvLayer& l = convs_[li];
      const ConvGeometry g = l.geometry(h, w);
      const Matrix cols = im2col_rows(act, batch.n(), g);
      act = weights[li] ? unitary_conv_rows(cols, *weights[li], l.spec, opts_.normalize) : matmul(cols, *l.plain);
      for (double& v : act.data()) v = v > 0.0 ? v : 0.0;
      h = g.h_out();
      w = g.w_out();
    }
    const std::size_t hw = act.rows() / batch.n();
    Matrix pooled(batch.n(), act.cols());
    for (std::size_t b = 0; b < batch.n(); ++b)
      for (std::size_t q = 0; q < hw; ++q)
        for (std::size_t c = 0; c < act.cols(); ++c) pooled(b, c) += act(b * hw + q, c);
    const double inv = 1.0 / static_cast<double>(hw);
    for (double& v : pooled.data()) v *= inv;
    Matrix logits = matmul(pooled, head_.w);
    for (std::size_t r = 0; r < logits.rows(); ++r)
      for (std::size_t c = 0; c < logits.cols(); ++c) logits(r, c) += head_.b(0, c);
    return logits;
  }

  Tape::Id tape_unitary_weight(Tape& tape, const ConvLayer& l, std::span<const Tape::Id> params,
                               std::size_t& p, std::shared_ptr<const ExpmTrace>* slot, bool refresh) const {
    const std::size_t dim = l.spec.lie_dim(), kept = l.spec.lie_cols();
    Tape::Id u;
    if (l.lie->values().empty()) {
      u = tape.constant(Matrix::identity(dim));
    } else {
      const Tape::Id a = tape.skew(params[p++], dim, kept);
      if (slot) {
        if (refresh || !*slot) *slot = std::make_shared<const ExpmTrace>(expm_trace(tape.value(a), opts_.expm));
        u = tape.expm_traced(a, *slot);
      } else {
        u = tape.expm(a, opts_.expm);
      }
    }
    Tape::Id w = tape.take_columns(u, kept);
    if (l.spec.m() <= l.spec.k()) w = tape.transpose(w);
    if (l.spec.mapping() == Mapping::Custom) w = relayout_custom(tape, w, l.spec);
    return w;
  }

  // Custom mappings permute weight entries into the column layout the
  // Toeplitz product needs; record that permutation as a gather.
  static Tape::Id relayout_custom(Tape& tape, Tape::Id w, const FilterSpec& spec) {
    Matrix index(spec.m(), spec.k());
    for (std::size_t i = 0; i < index.size(); ++i) index.data()[i] = static_cast<double>(i);
    const Matrix perm = filters_to_columns(reshape_to_filters(index, spec));
    const Matrix& wv = tape.value(w);
    Matrix out(perm.rows(), perm.cols());
    for (std::size_t i = 0; i < perm.size(); ++i) {
      out.data()[i] = wv.data()[static_cast<std::size_t>(perm.data()[i])];
    }
    const std::size_t rows = wv.rows(), cols = wv.cols();
    return tape.custom({w}, std::move(out), [perm, rows, cols](const Matrix& g) -> std::vector<Matrix> {
      Matrix gw(rows, cols);
      for (std::size_t i = 0; i < perm.size(); ++i) gw.data()[static_cast<std::size_t>(perm.data()[i])] += g.data()[i];
      return {gw};
    });
  }

  std::vector<ConvLayer> convs_;
  DenseHead head_;
  NetworkOptions opts_;
};

/// Freezes every unitary layer's exponentiated weight. Idempotent.
inline Network cache_weights(const Network& net) {
  std::vector<ConvLayer> layers;
  layers.reserve(net.layers().size());
  for (const auto& l : net.layers()) {
    if (l.lie) {
      layers.push_back(ConvLayer::frozen(l.spec, net.unitary_weight(l), l.stride, l.pad));
    } else {
      layers.push_back(l);
    }
  }
  return Network(std::move(layers), net.head(), net.options());
}

/// Layer shapes of the reference `toy6` architecture (c_out, c_in, kernel, stride, pad).
struct LayerShape {
  std::size_t c_out, c_in, kernel, stride, pad;
};

/**
 * toy6: six unitary convolutions and a dense head.
 *
 *   conv 3x3  c_in->4   pad 1            Project  (m = 9 c_in)
 *   conv 1x1  4->4                       square
 *   conv 3x3  4->8      stride 2, pad 1  Project  (m = 36)
 *   conv 1x1  8->8                       square
 *   conv 1x1  8->16                      Isometry (embedding)
 *   conv 1x1  16->16                     square
 *   mean pool, dense 16->classes
 */
inline std::vector<LayerShape> toy6_shapes(std::size_t in_channels) {
  return {{4, in_channels, 3, 1, 1}, {4, 4, 1, 1, 0},  {8, 4, 3, 2, 1},
          {8, 8, 1, 1, 0},           {16, 8, 1, 1, 0}, {16, 16, 1, 1, 0}};
}

inline DenseHead random_head(Rng& rng, std::size_t features, std::size_t classes, double std) {
  return {random_gaussian(rng, features, classes, std), Matrix(1, classes)};
}

inline Network make_unitary_network(const std::vector<LayerShape>& shapes, std::size_t classes, Rng& rng,
                                    double lie_init = 0.5, double head_std = 0.1, NetworkOptions opts = {}) {
  std::vector<ConvLayer> layers;
  for (const auto& s : shapes) {
    FilterSpec spec(s.c_out, s.c_in, s.kernel, s.kernel);
    LieParams lp(spec.lie_dim(), spec.lie_cols());
    for (double& v : lp.values()) v = rng.uniform(-lie_init, lie_init);
    layers.push_back(ConvLayer::unitary(spec, std::move(lp), s.stride, s.pad));
  }
  const std::size_t features = layers.empty() ? 1 : layers.back().spec.c_out();
  return Network(std::move(layers), random_head(rng, features, classes, head_std), opts);
}

/// Same shapes with free Gaussian filters (He scaling) and no unit normalization.
inline Network make_plain_network(const std::vector<LayerShape>& shapes, std::size_t classes, Rng& rng,
                                  double head_std = 0.1, NetworkOptions opts = {}) {
  std::vector<ConvLayer> layers;
  for (const auto& s : shapes) {
    FilterSpec spec(s.c_out, s.c_in, s.kernel, s.kernel);
    const double std = std::sqrt(2.0 / static_cast<double>(spec.m()));
    layers.push_back(ConvLayer::unconstrained(spec, random_gaussian(rng, spec.m(), spec.k(), std), s.stride, s.pad));
  }
  const std::size_t features = layers.empty() ? 1 : layers.back().spec.c_out();
  return Network(std::move(layers), random_head(rng, features, classes, head_std), opts);
}

inline Network make_toy6(std::size_t in_channels, std::size_t classes, Rng& rng, double lie_init = 0.5,
                         double head_std = 0.1, NetworkOptions opts = {}) {
  return make_unitary_network(toy6_shapes(in_channels), classes, rng, lie_init, head_std, opts);
}

/// Reverse-mode vs central differences over every parameter of `net`.
inline GradCheckReport grad_check_network(const Network& net, const Tensor4& batch, std::span<const int> labels,
                                          double tolerance, double h = 1e-6, double floor = 1e-3) {
  const std::vector<int> lab(labels.begin(), labels.end());
  return grad_check(
      [&](Tape& tape, const std::vector<Tape::Id>& ids) { return net.tape_loss(tape, ids, batch, lab); },
      net.parameter_values(), tolerance, h, floor);
}

}  // namespace ulie
