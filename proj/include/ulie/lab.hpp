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
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ulie/autograd.hpp"
#include "ulie/counters.hpp"
#include "ulie/lie.hpp"
#include "ulie/model.hpp"
#include "ulie/store.hpp"
#include "ulie/tensor.hpp"
#include "ulie/unitary.hpp"

namespace ulie {

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  Tensor4 images;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const noexcept { return labels.size(); }

  /// Images `idx` gathered into one batch.
  Tensor4 gather(std::span<const std::size_t> idx, std::vector<int>* labels_out = nullptr) const {
    const std::size_t per = images.c() * images.h() * images.w();
    std::vector<double> d;
    d.reserve(idx.size() * per);
    if (labels_out) labels_out->clear();
    for (std::size_t i : idx) {
      auto src = images.data().subspan(i * per, per);
      d.insert(d.end(), src.begin(), src.end());
      if (labels_out) labels_out->push_back(labels[i]);
    }
    return Tensor4(idx.size(), images.c(), images.h(), images.w(), std::move(d));
  }
};

/**
 * Synthetic texture classes. Each class owns one seeded Gaussian template;
 * a sample is amplitude * template (optionally cyclically shifted) plus
 * white noise. Templates depend only on `template_seed`, so train and test
 * splits drawn with different sample seeds share classes.
 */
struct PatternSetConfig {
  std::size_t classes = 10;
  std::size_t channels = 1;
  std::size_t size = 8;
  std::size_t per_class = 50;
  double noise = 0.1;
  double amp_lo = 0.5, amp_hi = 1.5;
  bool cyclic_shift = true;
  std::uint64_t template_seed = 7;
};

/// 10 classes of shifted 8x8 textures.
inline PatternSetConfig patterns10() { return {}; }

/// 2 classes of unshifted 4x4 templates: separable by the template difference.
inline PatternSetConfig separable2() {
  PatternSetConfig c;
  c.classes = 2;
  c.size = 4;
  c.per_class = 100;
  c.noise = 0.05;
  c.cyclic_shift = false;
  return c;
}

inline std::vector<Tensor4> pattern_templates(const PatternSetConfig& cfg) {
  Rng rng(cfg.template_seed);
  std::vector<Tensor4> out;
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    Tensor4 t(1, cfg.channels, cfg.size, cfg.size);
    for (double& v : t.data()) v = rng.gaussian();
    out.push_back(std::move(t));
  }
  return out;
}

inline Dataset make_pattern_set(const PatternSetConfig& cfg, std::uint64_t sample_seed) {
  const auto templates = pattern_templates(cfg);
  Rng rng(sample_seed);
  const std::size_t n = cfg.classes * cfg.per_class, s = cfg.size;
  Dataset ds{Tensor4(n, cfg.channels, s, s), std::vector<int>(n), cfg.classes};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % cfg.classes;
    ds.labels[i] = static_cast<int>(c);
    const double amp = rng.uniform(cfg.amp_lo, cfg.amp_hi);
    const std::size_t dy = cfg.cyclic_shift ? rng.index(s) : 0, dx = cfg.cyclic_shift ? rng.index(s) : 0;
    for (std::size_t ch = 0; ch < cfg.channels; ++ch)
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x)
          ds.images(i, ch, y, x) = amp * templates[c](0, ch, (y + dy) % s, (x + dx) % s) + cfg.noise * rng.gaussian();
  }
  return ds;
}

/// Reads the CIFAR-10 binary format (label byte + 3x32x32 planes), scaled to [0, 1].
inline Dataset load_cifar10_binary(const std::string& path, std::size_t limit = 0) {
  constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
  const auto bytes = read_file(path);
  if (bytes.size() % kRecord != 0) {
    throw ParseError(ParseError::Code::Malformed, path + ": size is not a whole number of CIFAR-10 records");
  }
  std::size_t n = bytes.size() / kRecord;
  if (limit != 0) n = std::min(n, limit);
  Dataset ds{Tensor4(n, 3, 32, 32), std::vector<int>(n), 10};
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kRecord;
    if (rec[0] > 9) throw ParseError(ParseError::Code::Malformed, path + ": label out of range");
    ds.labels[i] = rec[0];
    for (std::size_t j = 0; j < 3 * 32 * 32; ++j) ds.images.data()[i * 3072 + j] = rec[1 + j] / 255.0;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Records and CSV

struct CurvePoint {
  std::size_t epoch;
  std::string split;
  double loss;
  double accuracy;
};

struct RunRecord {
  /// Activation norm after each layer (norm propagation runs).
  std::vector<double> layer_norms;
  /// Layer at which a norm first became non-finite, if any.
  std::optional<std::size_t> divergence_depth;
  std::vector<CurvePoint> curves;
  /// Epoch at which the training loss became non-finite, if any.
  std::optional<std::size_t> diverged_at_epoch;
  std::vector<std::pair<std::string, double>> phase_seconds;
};

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path);
}

inline std::string norms_csv(std::span<const double> norms) {
  std::string s = "layer_index,norm\n";
  for (std::size_t i = 0; i < norms.size(); ++i) s += std::to_string(i + 1) + "," + format_double(norms[i]) + "\n";
  return s;
}

inline std::string curves_csv(std::span<const CurvePoint> pts) {
  std::string s = "epoch,split,loss,accuracy\n";
  for (const auto& p : pts) {
    s += std::to_string(p.epoch) + "," + p.split + "," + format_double(p.loss) + "," + format_double(p.accuracy) + "\n";
  }
  return s;
}

// ---------------------------------------------------------------------------
// Norm propagation

enum class WeightKind { Unitary, Gaussian, GaussianNormalized };

struct StackConfig {
  std::size_t depth = 100;
  std::size_t width = 64;
  WeightKind kind = WeightKind::Unitary;
  /// Entry std for Gaussian layers (GaussianNormalized uses 1/sqrt(width)).
  double gaussian_std = 1.0;
  bool relu = false;
  std::uint64_t seed = 0;
  /// Lie parameters of unitary layers are uniform in [-lie_range, lie_range].
  double lie_range = 1.0;
  ExpmConfig expm;
};

/// Square layer weights for a stack, drawn deterministically from cfg.seed.
inline std::vector<Matrix> stack_weights(const StackConfig& cfg) {
  if (cfg.depth == 0) throw ContractError("StackConfig: depth must be >= 1");
  Rng rng(cfg.seed);
  std::vector<Matrix> ws;
  ws.reserve(cfg.depth);
  const std::size_t m = cfg.width;
  for (std::size_t d = 0; d < cfg.depth; ++d) {
    switch (cfg.kind) {
      case WeightKind::Unitary:
        ws.push_back(build_weight(LieParams::random_uniform(rng, m, m, -cfg.lie_range, cfg.lie_range),
                                  FilterSpec::dense(m, m), cfg.expm)
                         .matrix());
        break;
      case WeightKind::Gaussian:
        ws.push_back(random_gaussian(rng, m, m, cfg.gaussian_std));
        break;
      case WeightKind::GaussianNormalized:
        ws.push_back(random_gaussian(rng, m, m, 1.0 / std::sqrt(static_cast<double>(m))));
        break;
    }
  }
  return ws;
}

/// Activation norms of `probe` through a stack with the given weights.
inline RunRecord propagate(std::span<const Matrix> weights, std::span<const double> probe, bool relu) {
  RunRecord rec;
  Matrix x(1, probe.size(), std::vector<double>(probe.begin(), probe.end()));
  for (std::size_t d = 0; d < weights.size(); ++d) {
    x = matmul(x, weights[d]);
    if (relu)
      for (double& v : x.data()) v = v > 0.0 ? v : 0.0;
    const double n = l2_norm(x.data());
    if (!std::isfinite(n)) {
      rec.divergence_depth = d + 1;
      break;
    }
    rec.layer_norms.push_back(n);
  }
  return rec;
}

inline RunRecord norm_propagation(const StackConfig& cfg, std::span<const double> probe) {
  if (probe.size() != cfg.width) {
    throw ShapeError("norm_propagation: probe of length " + std::to_string(probe.size()) + " for width " +
                     std::to_string(cfg.width));
  }
  const auto ws = stack_weights(cfg);
  return propagate(ws, probe, cfg.relu);
}

/// Unit-norm probe in a Gaussian-random direction.
inline std::vector<double> random_probe(Rng& rng, std::size_t width) {
  std::vector<double> p(width);
  for (double& v : p) v = rng.gaussian();
  const double n = l2_norm(p);
  for (double& v : p) v /= n;
  return p;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(v.size() - 1, lo + 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct NormSummary {
  /// Median over probes of the norm after each layer (divergent probes count as +inf).
  std::vector<double> median_norms;
  /// Median over probes of final / initial norm.
  double median_ratio;
  std::optional<std::size_t> first_divergence;
};

/// norm_propagation over several unit probes sharing one stack.
inline NormSummary norm_statistics(const StackConfig& cfg, std::size_t probes = 10) {
  const auto ws = stack_weights(cfg);
  Rng prng(cfg.seed ^ 0xA5A5A5A5ULL);
  std::vector<std::vector<double>> per_layer(cfg.depth);
  std::vector<double> ratios;
  NormSummary out{};
  for (std::size_t p = 0; p < probes; ++p) {
    const auto probe = random_probe(prng, cfg.width);
    const auto rec = propagate(ws, probe, cfg.relu);
    for (std::size_t d = 0; d < cfg.depth; ++d) {
      per_layer[d].push_back(d < rec.layer_norms.size() ? rec.layer_norms[d] : INFINITY);
    }
    ratios.push_back(rec.divergence_depth ? INFINITY : rec.layer_norms.back() / l2_norm(probe));
    if (rec.divergence_depth && (!out.first_divergence || *rec.divergence_depth < *out.first_divergence)) {
      out.first_divergence = rec.divergence_depth;
    }
  }
  for (auto& v : per_layer) out.median_norms.push_back(median(v));
  out.median_ratio = median(ratios);
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  /// Recompute each layer's exponential every this many steps; 1 = every step.
  std::size_t exp_every = 1;
  std::uint64_t seed = 0;
};

struct Evaluation {
  double loss;
  double accuracy;
};

inline Evaluation evaluate(const Network& net, const Dataset& ds) {
  const Matrix logits = net.predict(ds.images);
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    const double mx = row[best];
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    loss += -(row[static_cast<std::size_t>(ds.labels[r])] - mx - std::log(z));
    if (best == static_cast<std::size_t>(ds.labels[r])) ++correct;
  }
  const double n = static_cast<double>(logits.rows());
  return {loss / n, static_cast<double>(correct) / n};
}

/**
 * Minibatch SGD on `net` in place. Curves hold an evaluation of both splits
 * before training (epoch 0) and after every epoch. A non-finite loss, or
 * parameters too large to exponentiate, stops the run and is reported
 * through `diverged_at_epoch`.
 */
inline RunRecord train_toy(Network& net, const Dataset& train, const Dataset& test, const SgdConfig& cfg,
                           const TrainOptions& opts) {
  cfg.validate();
  if (opts.batch_size == 0 || opts.exp_every == 0) throw ContractError("train_toy: batch_size and exp_every must be >= 1");
  RunRecord rec;
  Rng rng(opts.seed);
  SgdState state;
  std::vector<std::shared_ptr<const ExpmTrace>> traces;
  std::size_t step = 0;
  using clock = std::chrono::steady_clock;
  double train_seconds = 0.0, eval_seconds = 0.0;

  auto record = [&](std::size_t epoch) {
    const auto t0 = clock::now();
    Evaluation tr, te;
    try {
      tr = evaluate(net, train);
      te = evaluate(net, test);
    } catch (const OverflowError&) {
      return false;  // parameters too large to exponentiate
    }
    rec.curves.push_back({epoch, "train", tr.loss, tr.accuracy});
    rec.curves.push_back({epoch, "test", te.loss, te.accuracy});
    eval_seconds += std::chrono::duration<double>(clock::now() - t0).count();
    return std::isfinite(tr.loss);
  };

  record(0);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> labels;
  for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
    const auto t0 = clock::now();
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t lo = 0; lo < order.size(); lo += opts.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + opts.batch_size);
      const Tensor4 batch = train.gather(std::span(order).subspan(lo, hi - lo), &labels);
      Tape tape;
      std::vector<Tape::Id> ids;
      for (auto& p : net.parameter_values()) ids.push_back(tape.leaf(std::move(p)));
      const bool refresh = step % opts.exp_every == 0;
      Tape::Id loss;
      try {
        loss = net.tape_loss(tape, ids, batch, labels, &traces, refresh);
      } catch (const OverflowError&) {
        rec.diverged_at_epoch = epoch;
        break;
      }
      if (!std::isfinite(tape.value(loss)(0, 0))) {
        rec.diverged_at_epoch = epoch;
        break;
      }
      const auto grads = tape.backward(loss);
      std::vector<Matrix> gs;
      for (Tape::Id id : ids) gs.push_back(grads.of(id));
      sgd_step(net.parameter_blocks(), gs, state, cfg, epoch - 1);
      ++step;
    }
    train_seconds += std::chrono::duration<double>(clock::now() - t0).count();
    if (rec.diverged_at_epoch || !record(epoch)) {
      if (!rec.diverged_at_epoch) rec.diverged_at_epoch = epoch;
      break;
    }
  }
  rec.phase_seconds = {{"train", train_seconds}, {"evaluate", eval_seconds}};
  return rec;
}

struct OverfitGap {
  double train_loss;
  double test_loss;
  double gap;
};

/// Final-epoch train and test losses of a run.
inline OverfitGap overfit_gap(const RunRecord& run) {
  std::optional<double> tr, te;
  std::size_t last = 0;
  for (const auto& p : run.curves) last = std::max(last, p.epoch);
  for (const auto& p : run.curves) {
    if (p.epoch != last) continue;
    if (p.split == "train") tr = p.loss;
    if (p.split == "test") te = p.loss;
  }
  if (!tr || !te) throw ContractError("overfit_gap: run lacks a final train/test evaluation");
  return {*tr, *te, *te - *tr};
}

// ---------------------------------------------------------------------------
// Inference benchmark

/**
 * Baseline forward pass: the network's conv weights used as plain filters,
 * each conv followed by per-sample per-channel normalization (instance
 * norm) instead of unit row normalization.
 */
inline Matrix predict_instance_norm(const std::vector<Matrix>& conv_weights, const Network& net, const Tensor4& batch,
                                    double eps = 1e-5) {
  Matrix act = nchw_to_rows(batch);
  std::size_t h = batch.h(), w = batch.w();
  const std::size_t n = batch.n();
  for (std::size_t li = 0; li < net.layers().size(); ++li) {
    const ConvGeometry g = net.layers()[li].geometry(h, w);
    act = matmul(im2col_rows(act, n, g), conv_weights[li]);
    counters().instance_normalizations.fetch_add(1, std::memory_order_relaxed);
    const std::size_t hw = g.positions();
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t c = 0; c < act.cols(); ++c) {
        double mean = 0.0, var = 0.0;
        for (std::size_t p = 0; p < hw; ++p) mean += act(b * hw + p, c);
        mean /= static_cast<double>(hw);
        for (std::size_t p = 0; p < hw; ++p) {
          const double d = act(b * hw + p, c) - mean;
          var += d * d;
        }
        const double inv = 1.0 / std::sqrt(var / static_cast<double>(hw) + eps);
        for (std::size_t p = 0; p < hw; ++p) {
          double& v = act(b * hw + p, c);
          v = (v - mean) * inv;
          v = v > 0.0 ? v : 0.0;
        }
      }
    }
    h = g.h_out();
    w = g.w_out();
  }
  const std::size_t hw = act.rows() / n;
  Matrix pooled(n, act.cols());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t c = 0; c < act.cols(); ++c) pooled(b, c) += act(b * hw + p, c) / static_cast<double>(hw);
  Matrix logits = matmul(pooled, net.head().w);
  for (std::size_t r = 0; r < logits.rows(); ++r)
    for (std::size_t c = 0; c < logits.cols(); ++c) logits(r, c) += net.head().b(0, c);
  return logits;
}

struct BenchRow {
  std::string variant;
  std::size_t batch;
  double median_us;
  double p10_us;
  double p90_us;
};

inline std::string bench_csv(std::span<const BenchRow> rows) {
  std::string s = "variant,batch,median_us,p10_us,p90_us\n";
  for (const auto& r : rows) {
    s += r.variant + "," + std::to_string(r.batch) + "," + format_double(r.median_us) + "," +
         format_double(r.p10_us) + "," + format_double(r.p90_us) + "\n";
  }
  return s;
}

/**
 * Times cached-unitary inference against the instance-norm baseline on the
 * same conv stack, alternating the two variants every repeat. Times are
 * wall-clock microseconds per image.
 */
inline std::vector<BenchRow> bench_inference(const Network& model, const Tensor4& batch, std::size_t repeats) {
  const Network cached = model.is_cached() ? model : cache_weights(model);
  std::vector<Matrix> plain;
  for (const auto& l : cached.layers()) {
    plain.push_back(l.cached ? conv_columns(*l.cached, l.spec) : *l.plain);
  }
  using clock = std::chrono::steady_clock;
  std::vector<double> ta, tb;
  ta.reserve(repeats);
  tb.reserve(repeats);
  const double per_image = 1e6 / static_cast<double>(batch.n());
  volatile double sink = 0.0;
  for (std::size_t r = 0; r < repeats; ++r) {
    auto t0 = clock::now();
    sink = sink + cached.predict(batch)(0, 0);
    auto t1 = clock::now();
    sink = sink + predict_instance_norm(plain, cached, batch)(0, 0);
    auto t2 = clock::now();
    ta.push_back(std::chrono::duration<double>(t1 - t0).count() * per_image);
    tb.push_back(std::chrono::duration<double>(t2 - t1).count() * per_image);
  }
  return {{"cached_unitary", batch.n(), median(ta), percentile(ta, 0.1), percentile(ta, 0.9)},
          {"instance_norm", batch.n(), median(tb), percentile(tb, 0.1), percentile(tb, 0.9)}};
}

}  // namespace ulie
