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

// ulie: weight checks, norm-stability runs, toy training, export and bench.
//
// Every run writes <out>/manifest.txt (key=value) holding the full
// configuration and a git-style SHA-1 of the run's inputs. Failures are
// reported on stderr as one `key=value` record per line.

#include <openssl/evp.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ulie/ulie.hpp"

namespace fs = std::filesystem;
using namespace ulie;

namespace {

struct Global {
  std::uint64_t seed = 0;
  std::string out = "./out";
  bool strict_taylor = false;
  std::size_t threads = 1;

  ExpmConfig expm() const { return strict_taylor ? ExpmConfig::strict_taylor() : ExpmConfig{}; }
  NetworkOptions network() const {
    NetworkOptions o;
    o.expm = expm();
    o.threads = threads;
    return o;
  }
};

/// Ordered key=value configuration recorded in the manifest.
using Config = std::vector<std::pair<std::string, std::string>>;

std::string hex(const unsigned char* d, unsigned n) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (unsigned i = 0; i < n; ++i) {
    s += digits[d[i] >> 4];
    s += digits[d[i] & 15];
  }
  return s;
}

/// SHA-1 of "blob <len>\0" + content, as git computes object ids.
std::string git_blob_hash(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, content.data(), content.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  return hex(md, len);
}

std::string canonical(const Config& cfg) {
  std::string s;
  for (const auto& [k, v] : cfg) s += k + "=" + v + "\n";
  return s;
}

/// Writes the manifest; `inputs` is whatever the run consumed beyond its flags.
void write_manifest(const Global& g, const std::string& command, Config cfg, const std::string& inputs) {
  Config full{{"command", command},
              {"seed", std::to_string(g.seed)},
              {"out", g.out},
              {"strict_taylor", g.strict_taylor ? "true" : "false"},
              {"threads", std::to_string(g.threads)}};
  full.insert(full.end(), cfg.begin(), cfg.end());
  full.emplace_back("input_hash", git_blob_hash(canonical(full) + inputs));
  write_text((fs::path(g.out) / "manifest.txt").string(), canonical(full));
}

void report_failure(const Config& fields) {
  std::string line;
  for (const auto& [k, v] : fields) line += (line.empty() ? "" : " ") + k + "=" + v;
  std::cerr << line << "\n";
}

std::string str(double v) { return format_double(v); }

std::string tensor_bytes(const Tensor4& t) {
  return std::string(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(double));
}

// ---------------------------------------------------------------------------
// check

struct CheckOptions {
  std::size_t dim = 64;
  std::size_t cols = 16;
  std::size_t trials = 20;
  std::size_t grad_samples = 32;
  double range = 5.0;
};

struct Invariant {
  std::string name;
  double measured = 0.0;
  double tolerance;
};

int run_check(const Global& g, const CheckOptions& o) {
  if (o.cols > o.dim) throw CLI::ValidationError("--cols", "must not exceed --dim");
  const ExpmConfig cfg = g.expm();
  Rng rng(g.seed);
  Invariant orth{"orthogonality", 0.0, 1e-10}, iso{"isometry", 0.0, 1e-10}, proj{"projection_unit_norm", 0.0, 1e-12},
      contraction{"projection_contraction", -INFINITY, 1e-12}, grad{"gradient", 0.0, 1e-5};
  const std::size_t m = o.dim, k = o.cols;

  for (std::size_t t = 0; t < o.trials; ++t) {
    const auto lp = LieParams::random_uniform(rng, m, k, -o.range, o.range);
    const Matrix u = expm(lie_to_skew(lp), cfg);
    orth.measured = std::max(orth.measured, orthonormality_error(u));

    // m -> k keeps k columns and normalizes when m > k; k -> m embeds.
    const UnitaryWeight down = weight_from_rotation(u, m, k);
    const UnitaryWeight up = weight_from_rotation(u, k, m);
    const Matrix xd = random_gaussian(rng, 64, m, 1.0);
    const Matrix xu = random_gaussian(rng, 64, k, 1.0);
    const Matrix yd = apply_weight(down, xd);
    const Matrix raw = matmul(xd, down.matrix());
    const Matrix yu = apply_weight(up, xu);
    for (std::size_t r = 0; r < 64; ++r) {
      iso.measured = std::max(iso.measured, std::abs(l2_norm(yu.row(r)) / l2_norm(xu.row(r)) - 1.0));
      if (down.weight_case() == WeightCase::Project) {
        proj.measured = std::max(proj.measured, std::abs(l2_norm(yd.row(r)) - 1.0));
        contraction.measured = std::max(contraction.measured, l2_norm(raw.row(r)) - l2_norm(xd.row(r)));
      } else {
        iso.measured = std::max(iso.measured, std::abs(l2_norm(yd.row(r)) / l2_norm(xd.row(r)) - 1.0));
      }
    }

    // Reverse mode vs central differences on a sample of packed entries.
    auto glp = LieParams::random_uniform(rng, m, k, -1.0, 1.0);
    const Matrix upstream = random_gaussian(rng, m, m, 1.0);
    const auto analytic = skew_grad_to_packed(expm_grad(lie_to_skew(glp), upstream, cfg), m, k);
    auto objective = [&] {
      const Matrix e = expm(lie_to_skew(glp), cfg);
      double s = 0.0;
      for (std::size_t i = 0; i < e.size(); ++i) s += e.data()[i] * upstream.data()[i];
      return s;
    };
    const std::size_t samples = std::min(o.grad_samples, analytic.size());
    for (std::size_t s = 0; s < samples; ++s) {
      const std::size_t i = samples == analytic.size() ? s : rng.index(analytic.size());
      const double keep = glp.values()[i], h = 1e-6;
      glp.values()[i] = keep + h;
      const double fp = objective();
      glp.values()[i] = keep - h;
      const double fm = objective();
      glp.values()[i] = keep;
      grad.measured = std::max(grad.measured, gradient_relative_error(analytic[i], (fp - fm) / (2 * h), 1e-3));
    }
  }
  if (!std::isfinite(contraction.measured)) contraction.measured = 0.0;  // no projection at m == k

  fs::create_directories(g.out);
  write_manifest(g, "check",
                 {{"dim", std::to_string(m)}, {"cols", std::to_string(k)}, {"trials", std::to_string(o.trials)},
                  {"grad_samples", std::to_string(o.grad_samples)}, {"range", str(o.range)}},
                 "");
  int failures = 0;
  for (const auto& inv : {orth, iso, proj, contraction, grad}) {
    const bool ok = inv.measured <= inv.tolerance;
    std::cout << "invariant=" << inv.name << " measured=" << str(inv.measured) << " tolerance=" << str(inv.tolerance)
              << " status=" << (ok ? "pass" : "fail") << "\n";
    if (!ok) {
      ++failures;
      report_failure({{"error", "invariant"}, {"name", inv.name}, {"measured", str(inv.measured)},
                      {"tolerance", str(inv.tolerance)}});
    }
  }
  return failures == 0 ? 0 : 1;
}

// ---------------------------------------------------------------------------
// stability

struct StabilityOptions {
  std::size_t depth = 100;
  std::size_t width = 64;
  std::string kind = "unitary";
  double std = 1.0;
  bool relu = false;
  std::size_t probes = 10;
};

int run_stability(const Global& g, const StabilityOptions& o) {
  StackConfig cfg;
  cfg.depth = o.depth;
  cfg.width = o.width;
  cfg.kind = o.kind == "unitary"    ? WeightKind::Unitary
             : o.kind == "gaussian" ? WeightKind::Gaussian
                                    : WeightKind::GaussianNormalized;
  cfg.gaussian_std = o.std;
  cfg.relu = o.relu;
  cfg.seed = g.seed;
  cfg.expm = g.expm();
  const auto s = norm_statistics(cfg, o.probes);

  fs::create_directories(g.out);
  write_text((fs::path(g.out) / "norms.csv").string(), norms_csv(s.median_norms));
  write_manifest(g, "stability",
                 {{"depth", std::to_string(o.depth)}, {"width", std::to_string(o.width)}, {"kind", o.kind},
                  {"std", str(o.std)}, {"relu", o.relu ? "true" : "false"}, {"probes", std::to_string(o.probes)}},
                 "");
  std::cout << "final_initial_ratio=" << str(s.median_ratio) << "\n";
  if (s.first_divergence) {
    std::cout << "divergence_depth=" << *s.first_divergence << "\n";
    report_failure({{"finding", "divergence"}, {"depth", std::to_string(*s.first_divergence)}});
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainCliOptions {
  std::size_t epochs = 50;
  std::string arch = "toy6";
  std::string dataset = "patterns10";
  std::string data_path;
  std::size_t limit = 0;
  std::size_t batch = 32;
  std::size_t exp_every = 1;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 2e-4;
};

std::pair<Dataset, Dataset> load_data(const TrainCliOptions& o, std::uint64_t seed) {
  if (o.dataset == "cifar10") {
    if (o.data_path.empty()) throw CLI::ValidationError("--data", "required for --dataset cifar10");
    Dataset all = load_cifar10_binary(o.data_path, o.limit);
    const std::size_t n_test = all.size() / 5;
    std::vector<std::size_t> tr(all.size() - n_test), te(n_test);
    std::iota(tr.begin(), tr.end(), 0);
    std::iota(te.begin(), te.end(), tr.size());
    std::vector<int> ltr, lte;
    Tensor4 itr = all.gather(tr, &ltr), ite = all.gather(te, &lte);
    return {Dataset{std::move(itr), ltr, 10}, Dataset{std::move(ite), lte, 10}};
  }
  const PatternSetConfig cfg = o.dataset == "separable2" ? separable2() : patterns10();
  return {make_pattern_set(cfg, 2 * seed + 1), make_pattern_set(cfg, 2 * seed + 2)};
}

int run_train(const Global& g, const TrainCliOptions& o) {
  auto [train, test] = load_data(o, g.seed);
  Rng rng(g.seed);
  const auto shapes = toy6_shapes(train.images.c());
  Network net = o.arch == "plain6" ? make_plain_network(shapes, train.classes, rng, 0.1, g.network())
                                   : make_toy6(train.images.c(), train.classes, rng, 0.5, 0.1, g.network());
  SgdConfig sgd;
  sgd.lr = o.lr;
  sgd.momentum = o.momentum;
  sgd.weight_decay = o.weight_decay;
  const RunRecord rec = train_toy(net, train, test, sgd, TrainOptions{o.epochs, o.batch, o.exp_every, g.seed});

  fs::create_directories(g.out);
  write_text((fs::path(g.out) / "curves.csv").string(), curves_csv(rec.curves));
  write_file((fs::path(g.out) / "model.ulie").string(), save(net, StoreMode::LiePacked));
  write_manifest(g, "train",
                 {{"epochs", std::to_string(o.epochs)}, {"arch", o.arch}, {"dataset", o.dataset},
                  {"data", o.data_path}, {"limit", std::to_string(o.limit)}, {"batch", std::to_string(o.batch)},
                  {"exp_every", std::to_string(o.exp_every)}, {"lr", str(o.lr)}, {"momentum", str(o.momentum)},
                  {"weight_decay", str(o.weight_decay)}},
                 tensor_bytes(train.images) + tensor_bytes(test.images));

  const auto gap = overfit_gap(rec);
  double train_acc = 0.0, test_acc = 0.0;
  for (const auto& p : rec.curves) (p.split == "train" ? train_acc : test_acc) = p.accuracy;
  std::cout << "train_loss=" << str(gap.train_loss) << " test_loss=" << str(gap.test_loss) << " gap=" << str(gap.gap)
            << " train_accuracy=" << str(train_acc) << " test_accuracy=" << str(test_acc) << "\n";
  for (const auto& [phase, secs] : rec.phase_seconds) std::cout << "seconds_" << phase << "=" << str(secs) << "\n";
  if (rec.diverged_at_epoch) {
    report_failure({{"error", "divergence"}, {"epoch", std::to_string(*rec.diverged_at_epoch)}});
    return 1;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// export and bench

std::string default_model(const Global& g) { return (fs::path(g.out) / "model.ulie").string(); }

int run_export(const Global& g, const std::string& mode, std::string model_path) {
  if (model_path.empty()) model_path = default_model(g);
  const auto in_bytes = read_file(model_path);
  const Network net = load(in_bytes, g.network());
  const auto lie = net.has_lie_parameters() ? save(net, StoreMode::LiePacked) : std::vector<std::uint8_t>{};
  const auto dense = save(net, StoreMode::DenseCached);
  const auto& chosen = mode == "lie" ? lie : dense;
  if (chosen.empty()) throw ShapeError("export: model holds cached weights only; lie mode is unavailable");

  fs::create_directories(g.out);
  const auto target = fs::path(g.out) / (mode == "lie" ? "model.lie.ulie" : "model.dense.ulie");
  write_file(target.string(), chosen);
  write_manifest(g, "export", {{"mode", mode}, {"model", model_path}},
                 std::string(in_bytes.begin(), in_bytes.end()));
  std::cout << "wrote=" << target.string() << " bytes=" << chosen.size() << "\n";
  if (!lie.empty()) {
    const double reduction = 1.0 - static_cast<double>(lie.size()) / static_cast<double>(dense.size());
    std::cout << "lie_bytes=" << lie.size() << " dense_bytes=" << dense.size() << " reduction=" << str(reduction)
              << "\n";
  }
  return 0;
}

int run_bench(const Global& g, std::string model_path, std::size_t batch, std::size_t repeats) {
  if (model_path.empty()) {
    const auto dense = fs::path(g.out) / "model.dense.ulie";
    model_path = fs::exists(dense) ? dense.string() : default_model(g);
  }
  const auto bytes = read_file(model_path);
  const Network net = load(bytes, g.network());
  const auto ds = make_pattern_set(patterns10(), g.seed);
  if (net.input_channels() != ds.images.c()) throw ShapeError("bench: model expects " + std::to_string(net.input_channels()) + " channels");
  std::vector<std::size_t> idx(std::min(batch, ds.size()));
  std::iota(idx.begin(), idx.end(), 0);
  const auto rows = bench_inference(net, ds.gather(idx), repeats);

  fs::create_directories(g.out);
  write_text((fs::path(g.out) / "bench.csv").string(), bench_csv(rows));
  write_manifest(g, "bench", {{"model", model_path}, {"batch", std::to_string(idx.size())}, {"repeats", std::to_string(repeats)}},
                 std::string(bytes.begin(), bytes.end()));
  for (const auto& r : rows) std::cout << "variant=" << r.variant << " median_us=" << str(r.median_us) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unitary weights from Lie parameters: checks, experiments, export and benchmarks"};
  app.require_subcommand(1);
  Global g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_flag("--strict-taylor", g.strict_taylor, "Bare degree-18 Taylor series, no scaling-and-squaring");
  app.add_option("--threads", g.threads, "Batch-parallel inference threads")
      ->check(CLI::Range(std::size_t{1}, std::size_t{256}))
      ->capture_default_str();

  CheckOptions co;
  auto* check = app.add_subcommand("check", "Orthogonality, isometry, projection and gradient invariants");
  check->add_option("--dim", co.dim, "Rotation dimension m")->check(CLI::PositiveNumber)->capture_default_str();
  check->add_option("--cols", co.cols, "Kept columns k (1 <= k <= m)")->check(CLI::PositiveNumber)->capture_default_str();
  check->add_option("--trials", co.trials, "Random trials")->check(CLI::PositiveNumber)->capture_default_str();
  check->add_option("--grad-samples", co.grad_samples, "Packed entries finite-differenced per trial")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  check->add_option("--range", co.range, "Lie parameters drawn from [-range, range]")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  StabilityOptions so;
  auto* stab = app.add_subcommand("stability", "Activation norms through a deep square stack");
  stab->add_option("--depth", so.depth, "Layers")->check(CLI::PositiveNumber)->capture_default_str();
  stab->add_option("--width", so.width, "Layer width")->check(CLI::PositiveNumber)->capture_default_str();
  stab->add_option("--kind", so.kind, "Weight kind")
      ->check(CLI::IsMember({"unitary", "gaussian", "gaussian_normalized"}))
      ->capture_default_str();
  stab->add_option("--std", so.std, "Entry std for gaussian layers")->check(CLI::PositiveNumber)->capture_default_str();
  stab->add_flag("--relu", so.relu, "Apply relu after every layer");
  stab->add_option("--probes", so.probes, "Unit probes")->check(CLI::PositiveNumber)->capture_default_str();

  TrainCliOptions to;
  auto* train = app.add_subcommand("train", "Train a small conv net and save it in lie mode");
  train->add_option("--epochs", to.epochs, "Epochs")->capture_default_str();
  train->add_option("--arch", to.arch, "Architecture")->check(CLI::IsMember({"toy6", "plain6"}))->capture_default_str();
  train->add_option("--dataset", to.dataset, "Dataset")
      ->check(CLI::IsMember({"patterns10", "separable2", "cifar10"}))
      ->capture_default_str();
  train->add_option("--data", to.data_path, "CIFAR-10 binary batch file");
  train->add_option("--limit", to.limit, "Cap on CIFAR-10 records (0 = all)")->capture_default_str();
  train->add_option("--batch", to.batch, "Minibatch size")->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--exp-every", to.exp_every, "Recompute exponentials every N steps")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train->add_option("--lr", to.lr, "Learning rate")->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--momentum", to.momentum, "Momentum")->check(CLI::Range(0.0, 0.999999))->capture_default_str();
  train->add_option("--weight-decay", to.weight_decay, "Weight decay")->check(CLI::NonNegativeNumber)->capture_default_str();

  std::string export_mode = "dense", export_model;
  auto* exp = app.add_subcommand("export", "Re-save a model in lie-packed or dense-cached form");
  exp->add_option("--mode", export_mode, "Storage mode")->check(CLI::IsMember({"lie", "dense"}))->capture_default_str();
  exp->add_option("--model", export_model, "Input model (default <out>/model.ulie)");

  std::string bench_model;
  std::size_t bench_batch = 32, bench_repeats = 1000;
  auto* bench = app.add_subcommand("bench", "Cached-unitary vs instance-norm inference timing");
  bench->add_option("--model", bench_model, "Model (default <out>/model.dense.ulie, else <out>/model.ulie)");
  bench->add_option("--batch", bench_batch, "Images per batch")->check(CLI::PositiveNumber)->capture_default_str();
  bench->add_option("--repeats", bench_repeats, "Timed batches")->check(CLI::PositiveNumber)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    report_failure({{"error", "usage"}, {"message", '"' + std::string(e.what()) + '"'}});
    return e.get_exit_code();
  }

  try {
    if (*check) return run_check(g, co);
    if (*stab) return run_stability(g, so);
    if (*train) return run_train(g, to);
    if (*exp) return run_export(g, export_mode, export_model);
    if (*bench) return run_bench(g, bench_model, bench_batch, bench_repeats);
  } catch (const CLI::ValidationError& e) {
    report_failure({{"error", "usage"}, {"message", '"' + std::string(e.what()) + '"'}});
    return 2;
  } catch (const std::exception& e) {
    report_failure({{"error", "runtime"}, {"message", '"' + std::string(e.what()) + '"'}});
    return 1;
  }
  return 0;
}
