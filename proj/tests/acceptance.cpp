// Copyright 2026 The ulie Authors. Licensed under the Apache License, Version 2.0.
//
// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>

#include "oracles.hpp"
#include "ulie/ulie.hpp"

using namespace ulie;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances and budgets.
constexpr double kUnitarityTol = 1e-10;
constexpr double kUnitaritySeconds = 30.0;
constexpr double kExpmOracleTol = 1e-9;
constexpr double kIsometryRelTol = 1e-10;
constexpr double kUnitRowTol = 1e-12;
constexpr double kContractionSlack = 1e-12;
constexpr double kConvTol = 1e-12;
constexpr double kGradRelTol = 1e-5;
constexpr double kGradStep = 1e-6;
constexpr double kGradFloor = 1e-3;
constexpr double kStackRelTol = 1e-6;
constexpr double kStabilitySeconds = 10.0;
constexpr double kMinDiskReduction = 0.15;
constexpr double kMinTrainAccuracy = 0.99;
constexpr double kTrainingSeconds = 300.0;

struct Outcome {
  bool pass;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Outcome unitarity() {
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst = 0.0;
  for (std::size_t m : {4u, 16u, 64u, 256u}) {
    for (int i = 0; i < 100; ++i) {
      const auto lp = LieParams::random_uniform(rng, m, m, -5.0, 5.0);
      worst = std::max(worst, orthonormality_error(expm(lie_to_skew(lp))));
    }
  }
  const double secs = seconds_since(t0);
  return {worst < kUnitarityTol && secs < kUnitaritySeconds,
          "max |U^T U - I| = " + fmt("%.3e", worst) + " (tol 1e-10), " + fmt("%.1f", secs) + " s (budget 30 s)"};
}

Outcome expm_oracle() {
  Rng rng(202);
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    const std::size_t m = 1 + rng.index(64);
    const std::size_t k = 1 + rng.index(m);
    const Matrix a = lie_to_skew(LieParams::random_uniform(rng, m, k, -2.0, 2.0)).matrix();
    worst = std::max(worst, oracle::max_abs_difference(expm(a), oracle::expm_reference(a)));
  }
  return {worst < kExpmOracleTol, "max-abs vs degree-30 reference = " + fmt("%.3e", worst) + " over 50 matrices (tol 1e-9)"};
}

Outcome norm_contracts() {
  Rng rng(303);
  double iso = 0.0, unit = 0.0, contraction = -INFINITY;
  std::size_t rows = 0;
  while (rows < 10000) {
    const std::size_t m = 1 + rng.index(40), k = 1 + rng.index(40);
    const auto lp = LieParams::random_uniform(rng, std::max(m, k), std::min(m, k), -3.0, 3.0);
    const UnitaryWeight w = weight_from_rotation(expm(lie_to_skew(lp)), m, k);
    const Matrix x = random_gaussian(rng, 100, m, 1.0);
    const Matrix raw = matmul(x, w.matrix());
    const Matrix y = apply_weight(w, x);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const double nx = l2_norm(x.row(r)), ny = l2_norm(y.row(r));
      if (w.weight_case() == WeightCase::Isometry) {
        iso = std::max(iso, std::abs(ny / nx - 1.0));
      } else {
        unit = std::max(unit, std::abs(ny - 1.0));
        contraction = std::max(contraction, l2_norm(raw.row(r)) - nx);
      }
    }
    rows += x.rows();
  }
  const bool ok = iso <= kIsometryRelTol && unit <= kUnitRowTol && contraction <= kContractionSlack;
  return {ok, std::to_string(rows) + " rows: isometry rel err " + fmt("%.2e", iso) + " (tol 1e-10), unit-row err " +
                  fmt("%.2e", unit) + " (tol 1e-12), max(|y|-|x|) before normalization " + fmt("%.2e", contraction) +
                  " (<= 1e-12)"};
}

Outcome conv_equivalence() {
  Rng rng(404);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t c_in = 1 + rng.index(4), c_out = 1 + rng.index(4);
    const std::size_t dh = 1 + rng.index(3), dw = 1 + rng.index(3);
    const std::size_t pad = rng.index(2), stride = 1 + rng.index(2);
    const std::size_t h = std::max<std::size_t>(dh, 1 + rng.index(8));
    const std::size_t w = std::max<std::size_t>(dw, 1 + rng.index(8));
    const ConvGeometry g(c_in, h, w, dh, dw, c_out, stride, pad);
    Tensor4 img(1 + rng.index(3), c_in, h, w), f(c_out, c_in, dh, dw);
    for (double& v : img.data()) v = rng.gaussian();
    for (double& v : f.data()) v = rng.gaussian();
    const Tensor4 a = conv_toeplitz(img, f, g), b = conv_direct(img, f, g);
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  }
  return {worst <= kConvTol, "200 instances, max-abs Toeplitz vs direct = " + fmt("%.2e", worst) + " (tol 1e-12)"};
}

Outcome gradients() {
  Rng rng(505);
  const Network net = make_toy6(1, 10, rng);
  const auto ds = make_pattern_set(patterns10(), 9);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  std::vector<int> labels;
  const Tensor4 batch = ds.gather(idx, &labels);
  const auto report = grad_check_network(net, batch, labels, kGradRelTol, kGradStep, kGradFloor);
  return {report.passed, std::to_string(report.relative_errors.size()) + " parameters, max relative error " +
                             fmt("%.2e", report.max_relative_error) + " (tol 1e-5, h 1e-6, denominator floor 1e-3)"};
}

Outcome stability() {
  const auto t0 = Clock::now();
  StackConfig ucfg;
  ucfg.seed = 606;
  Rng prng(607);
  const auto probe = random_probe(prng, 64);
  const auto urec = norm_propagation(ucfg, probe);
  double uerr = 0.0;
  for (double n : urec.layer_norms) uerr = std::max(uerr, std::abs(n - 1.0));
  const bool ucomplete = urec.layer_norms.size() == 100;

  std::vector<double> ratios;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    StackConfig g;
    g.kind = WeightKind::Gaussian;
    g.gaussian_std = 1.0;
    g.seed = 6000 + seed;
    Rng pr(7000 + seed);
    const auto rec = norm_propagation(g, random_probe(pr, 64));
    ratios.push_back(rec.divergence_depth ? INFINITY : rec.layer_norms.back());
  }
  const double med = median(ratios);
  const double secs = seconds_since(t0);
  const bool ok = ucomplete && uerr <= kStackRelTol && (med < 0.1 || med > 10.0) && secs < kStabilitySeconds;
  return {ok, "unitary depth-100 rel err " + fmt("%.2e", uerr) + " (tol 1e-6); gaussian median final/initial " +
                  fmt("%.3e", med) + " (outside [0.1, 10]); " + fmt("%.2f", secs) + " s (budget 10 s)"};
}

Network trained_toy6(std::uint64_t seed) {
  Rng rng(seed);
  Network net = make_toy6(1, 10, rng);
  const auto ds = make_pattern_set(patterns10(), seed);
  train_toy(net, ds, ds, SgdConfig{}, TrainOptions{3, 32, 1, seed});
  return net;
}

Outcome caching() {
  const Network net = trained_toy6(707);
  const auto ds = make_pattern_set(patterns10(), 708);
  const Matrix live = load(save(net, StoreMode::LiePacked)).predict(ds.images);
  const Network dense = load(save(net, StoreMode::DenseCached));
  counters().reset();
  const Matrix cached = dense.predict(ds.images);
  const auto calls = counters().expm_calls.load();
  const bool identical = cached == live;
  return {identical && calls == 0, std::string("dense-cached vs lie-mode outputs on ") + std::to_string(ds.size()) +
                                       " images: " + (identical ? "bit-identical" : "DIFFERENT") +
                                       "; exponentials after caching = " + std::to_string(calls)};
}

Outcome disk_savings() {
  const std::size_t lie64 = stored_values(64, StoreMode::LiePacked), dense64 = stored_values(64, StoreMode::DenseCached);
  const Network net = trained_toy6(808);
  const double lie = static_cast<double>(save(net, StoreMode::LiePacked).size());
  const double dense = static_cast<double>(save(net, StoreMode::DenseCached).size());
  const double reduction = 1.0 - lie / dense;
  const bool ok = lie64 == 2016 && dense64 == 4096 && reduction >= kMinDiskReduction;
  return {ok, "64x64 layer " + std::to_string(lie64) + " vs " + std::to_string(dense64) + " values (" +
                  fmt("%.1f", 100.0 * (1.0 - double(lie64) / double(dense64))) + "% fewer); toy6 files " +
                  fmt("%.0f", lie) + " vs " + fmt("%.0f", dense) + " bytes, " + fmt("%.1f", 100.0 * reduction) +
                  "% smaller (>= 15%)"};
}

Outcome timing() {
  const Network net = trained_toy6(909);
  const auto ds = make_pattern_set(patterns10(), 910);
  std::vector<std::size_t> idx(32);
  std::iota(idx.begin(), idx.end(), 0);
  const auto rows = bench_inference(net, ds.gather(idx), 1000);
  return {rows[0].median_us <= rows[1].median_us,
          "median us/image over 1000 batches of 32: cached_unitary " + fmt("%.2f", rows[0].median_us) +
              ", instance_norm " + fmt("%.2f", rows[1].median_us)};
}

Outcome learning() {
  const auto t0 = Clock::now();
  std::string detail;
  bool ok = true;
  for (std::uint64_t seed : {0, 1, 2}) {
    Rng rng(seed);
    Network net = make_toy6(1, 2, rng);
    const auto cfg = separable2();
    const auto tr = make_pattern_set(cfg, 100 + seed), te = make_pattern_set(cfg, 200 + seed);
    const auto rec = train_toy(net, tr, te, SgdConfig{}, TrainOptions{50, 32, 1, seed});
    double best = 0.0;
    std::size_t first = 0;
    for (const auto& p : rec.curves)
      if (p.split == "train") {
        if (p.accuracy >= kMinTrainAccuracy && best < kMinTrainAccuracy) first = p.epoch;
        best = std::max(best, p.accuracy);
      }
    ok = ok && best >= kMinTrainAccuracy && !rec.diverged_at_epoch;
    detail += "seed " + std::to_string(seed) + " best train acc " + fmt("%.3f", best) + " (epoch " +
              std::to_string(first) + "); ";

    Rng rng2(seed);
    Network slow = make_toy6(1, 2, rng2);
    SgdConfig sgd;
    sgd.lr = 0.01;
    const auto r2 = train_toy(slow, tr, te, sgd, TrainOptions{10, 32, 1, seed});
    double prev = INFINITY;
    bool monotone = true;
    for (const auto& p : r2.curves)
      if (p.split == "train") {
        monotone = monotone && p.loss <= prev;
        prev = p.loss;
      }
    ok = ok && monotone;
    if (!monotone) detail += "seed " + std::to_string(seed) + " lr 0.01 loss increased; ";
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < kTrainingSeconds;
  return {ok, detail + "lr 0.01 loss non-increasing over 10 epochs; " + fmt("%.1f", secs) + " s (budget 300 s)"};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"1 unitarity", unitarity},           {"2 exponential oracle", expm_oracle},
      {"3 rectangular norm contracts", norm_contracts}, {"4 convolution equivalence", conv_equivalence},
      {"5 gradient correctness", gradients}, {"6 stability", stability},
      {"7 caching equivalence", caching},    {"8 disk savings", disk_savings},
      {"9 timing direction", timing},        {"10 toy learning", learning},
  };
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
