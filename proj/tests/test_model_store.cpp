// Copyright 2026 The ulie Authors. Licensed under the Apache License, Version 2.0.

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "oracles.hpp"
#include "ulie/counters.hpp"
#include "ulie/model.hpp"
#include "ulie/store.hpp"

using namespace ulie;

namespace {

Tensor4 random_batch(Rng& rng, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  Tensor4 t(n, c, h, w);
  for (double& v : t.data()) v = rng.gaussian();
  return t;
}

Network toy(std::uint64_t seed, std::size_t c_in = 1, std::size_t classes = 10) {
  Rng rng(seed);
  return make_toy6(c_in, classes, rng);
}

// Packed size of a (m, k) unitary layer, counted directly from the triangle.
std::size_t triangle_count(std::size_t m, std::size_t k) {
  const std::size_t big = std::max(m, k), small = std::min(m, k);
  std::size_t n = 0;
  for (std::size_t j = 0; j < small; ++j)
    for (std::size_t i = j + 1; i < big; ++i) ++n;
  return n;
}

}  // namespace

TEST(Toy6, LayerShapes) {
  const Network net = toy(1, 3, 10);
  ASSERT_EQ(net.layers().size(), 6u);
  const std::size_t m[] = {27, 4, 36, 8, 8, 16};
  const std::size_t k[] = {4, 4, 8, 8, 16, 16};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(net.layers()[i].spec.m(), m[i]) << i;
    EXPECT_EQ(net.layers()[i].spec.k(), k[i]) << i;
    EXPECT_TRUE(net.layers()[i].lie.has_value());
  }
  EXPECT_EQ(net.head().w.rows(), 16u);
  EXPECT_EQ(net.classes(), 10u);
}

TEST(Toy6, ParameterCountMatchesTriangles) {
  const Network net = toy(2);
  std::size_t expected = 16 * 10 + 10;
  for (const auto& l : net.layers()) expected += triangle_count(l.spec.m(), l.spec.k());
  EXPECT_EQ(net.parameter_count(), expected);
  EXPECT_EQ(expected, 694u);
}

TEST(Network, RejectsChannelMismatch) {
  Rng rng(3);
  EXPECT_THROW(make_unitary_network({{4, 1, 3, 1, 1}, {4, 5, 1, 1, 0}}, 2, rng), ShapeError);
  const Network net = toy(3);
  EXPECT_THROW(net.predict(Tensor4(1, 2, 8, 8)), ShapeError);
}

TEST(Network, ThreadCountDoesNotChangeOutputs) {
  Rng rng(4);
  Network net = toy(4);
  const Tensor4 batch = random_batch(rng, 7, 1, 8, 8);
  const Matrix single = net.predict(batch);
  net.options().threads = 3;
  EXPECT_EQ(net.predict(batch), single);
}

TEST(Network, TapeForwardMatchesPredict) {
  Rng rng(5);
  const Network net = toy(5);
  const Tensor4 batch = random_batch(rng, 3, 1, 8, 8);
  Tape tape;
  std::vector<Tape::Id> ids;
  for (const auto& p : net.parameter_values()) ids.push_back(tape.leaf(p));
  const Matrix logits = tape.value(net.tape_logits(tape, ids, batch));
  EXPECT_LT(max_abs_diff(logits, net.predict(batch)), 1e-13);
}

TEST(Network, Toy6GradientCheck) {
  Rng rng(6);
  const Network net = toy(6);
  const Tensor4 batch = random_batch(rng, 2, 1, 8, 8);
  const std::vector<int> labels{3, 7};
  const auto report = grad_check_network(net, batch, labels, 1e-5);
  EXPECT_TRUE(report.passed) << report.max_relative_error << " at " << report.worst_index;
  EXPECT_EQ(report.relative_errors.size(), net.parameter_count());
}

TEST(Network, CustomMappingGradientCheck) {
  Rng rng(7);
  const FilterSpec spec = FilterSpec::custom(4, 2, 3, 3, 12, 6);
  LieParams lp = LieParams::random_uniform(rng, spec.lie_dim(), spec.lie_cols(), -0.5, 0.5);
  std::vector<ConvLayer> layers{ConvLayer::unitary(spec, std::move(lp), 1, 1)};
  const Network net(std::move(layers), random_head(rng, 4, 3, 0.3));
  const Tensor4 batch = random_batch(rng, 2, 2, 5, 5);
  const std::vector<int> labels{0, 2};
  const auto report = grad_check_network(net, batch, labels, 1e-5);
  EXPECT_TRUE(report.passed) << report.max_relative_error;

  Tape tape;
  std::vector<Tape::Id> ids;
  for (const auto& p : net.parameter_values()) ids.push_back(tape.leaf(p));
  EXPECT_LT(max_abs_diff(tape.value(net.tape_logits(tape, ids, batch)), net.predict(batch)), 1e-13);
}

TEST(Cache, OutputsBitIdenticalAndNoExponentials) {
  Rng rng(8);
  const Network net = toy(8);
  const Tensor4 batch = random_batch(rng, 4, 1, 8, 8);
  const Matrix live = net.predict(batch);
  const Network cached = cache_weights(net);
  EXPECT_TRUE(cached.is_cached());
  EXPECT_FALSE(net.is_cached());
  counters().reset();
  const Matrix frozen = cached.predict(batch);
  EXPECT_EQ(counters().expm_calls.load(), 0u);
  EXPECT_EQ(frozen, live);
}

TEST(Cache, Idempotent) {
  const Network once = cache_weights(toy(9));
  const Network twice = cache_weights(once);
  EXPECT_EQ(save(once, StoreMode::DenseCached), save(twice, StoreMode::DenseCached));
}

TEST(Store, RoundTripBytesBothModes) {
  const Network net = toy(10);
  for (StoreMode mode : {StoreMode::LiePacked, StoreMode::DenseCached}) {
    const auto bytes = save(net, mode);
    EXPECT_EQ(save(load(bytes), mode), bytes);
    EXPECT_EQ(decode(bytes), to_model_file(net, mode));
  }
}

TEST(Store, LieModeReloadsTrainableParameters) {
  Network net = toy(11);
  Network back = load(save(net, StoreMode::LiePacked));
  EXPECT_TRUE(back.has_lie_parameters());
  EXPECT_EQ(back.parameter_values(), net.parameter_values());
}

TEST(Store, DenseModeLoadsInferenceOnlyAndMatchesBitwise) {
  Rng rng(12);
  const Network net = toy(12);
  const Tensor4 batch = random_batch(rng, 5, 1, 8, 8);
  const Network lie = load(save(net, StoreMode::LiePacked));
  const Network dense = load(save(net, StoreMode::DenseCached));
  EXPECT_TRUE(dense.is_cached());
  counters().reset();
  const Matrix out_dense = dense.predict(batch);
  EXPECT_EQ(counters().expm_calls.load(), 0u);
  EXPECT_EQ(out_dense, lie.predict(batch));
  EXPECT_THROW(save(dense, StoreMode::LiePacked), ShapeError);
}

TEST(Store, PlainAndCustomLayersRoundTrip) {
  Rng rng(13);
  const Network plain = make_plain_network(toy6_shapes(1), 4, rng);
  const auto bytes = save(plain, StoreMode::DenseCached);
  EXPECT_EQ(save(load(bytes), StoreMode::DenseCached), bytes);
  EXPECT_EQ(save(load(save(plain, StoreMode::LiePacked)), StoreMode::LiePacked), save(plain, StoreMode::LiePacked));

  const FilterSpec spec = FilterSpec::custom(4, 2, 3, 3, 12, 6);
  std::vector<ConvLayer> layers{
      ConvLayer::unitary(spec, LieParams::random_uniform(rng, 12, 6, -1, 1), 2, 1)};
  const Network custom(std::move(layers), random_head(rng, 4, 3, 0.3));
  const Tensor4 batch = random_batch(rng, 2, 2, 6, 6);
  for (StoreMode mode : {StoreMode::LiePacked, StoreMode::DenseCached}) {
    const auto b = save(custom, mode);
    const Network back = load(b);
    EXPECT_EQ(save(back, mode), b);
    EXPECT_EQ(back.predict(batch), custom.predict(batch));
  }
}

TEST(Store, LittleEndianLayout) {
  ModelFile f;
  f.mode = StoreMode::DenseCached;
  LayerRecord head;
  head.kind = RecordKind::DenseHead;
  head.c_out = 1;
  head.c_in = 1;
  head.d_h = head.d_w = 1;
  head.payload = {1.0, -2.0};
  f.layers.push_back(head);
  const auto bytes = encode(f);
  const std::vector<std::uint8_t> prefix{'U', 'L', 'I', 'E', 1, 0, 1, 1, 0, 0, 0};
  ASSERT_GE(bytes.size(), prefix.size());
  EXPECT_TRUE(std::equal(prefix.begin(), prefix.end(), bytes.begin()));
  // 7 u32 header fields (28 bytes) then u64 length 2, then 1.0 as LE f64.
  const std::size_t len_at = prefix.size() + 28;
  EXPECT_EQ(bytes[len_at], 2);
  for (std::size_t i = 1; i < 8; ++i) EXPECT_EQ(bytes[len_at + i], 0);
  const std::uint8_t one[8] = {0, 0, 0, 0, 0, 0, 0xF0, 0x3F};
  EXPECT_EQ(std::memcmp(bytes.data() + len_at + 8, one, 8), 0);
  EXPECT_EQ(bytes.size(), len_at + 8 + 16);
}

TEST(Store, ParseErrors) {
  const auto good = save(toy(14), StoreMode::LiePacked);

  auto expect_code = [](std::vector<std::uint8_t> b, ParseError::Code code) {
    try {
      decode(b);
      ADD_FAILURE() << "expected ParseError";
    } catch (const ParseError& e) {
      EXPECT_EQ(e.code(), code) << e.what();
    }
  };

  auto bad_magic = good;
  bad_magic[0] = 'X';
  try {
    decode(bad_magic);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.code(), ParseError::Code::BadMagic);
    EXPECT_NE(std::string(e.what()).find("\"ULIE\""), std::string::npos);
  }

  auto version = good;
  version[4] = 2;
  expect_code(version, ParseError::Code::UnsupportedVersion);

  expect_code({good.begin(), good.end() - 3}, ParseError::Code::Truncated);
  expect_code({good.begin(), good.begin() + 9}, ParseError::Code::Truncated);

  auto trailing = good;
  trailing.push_back(0);
  expect_code(trailing, ParseError::Code::Malformed);
  expect_code({}, ParseError::Code::BadMagic);
}

TEST(Store, EmptyLayerListIsValid) {
  const std::vector<std::uint8_t> bytes{'U', 'L', 'I', 'E', 1, 0, 0, 0, 0, 0, 0};
  const ModelFile f = decode(bytes);
  EXPECT_TRUE(f.layers.empty());
  EXPECT_EQ(encode(f), bytes);
  EXPECT_THROW(to_network(f), ParseError);  // a runnable network still needs its head
}

TEST(Store, SquareLayerStorageCounts) {
  EXPECT_EQ(stored_values(64, StoreMode::LiePacked), 2016u);
  EXPECT_EQ(stored_values(64, StoreMode::DenseCached), 4096u);
  EXPECT_EQ(triangle_count(64, 64), 2016u);
  const double fewer = 1.0 - 2016.0 / 4096.0;
  EXPECT_NEAR(fewer, 0.508, 5e-4);
}

TEST(Store, Toy6DiskReductionInBand) {
  const Network net = toy(15);
  const auto lie = save(net, StoreMode::LiePacked);
  const auto dense = save(net, StoreMode::DenseCached);
  const double reduction = 1.0 - static_cast<double>(lie.size()) / static_cast<double>(dense.size());
  EXPECT_GE(reduction, 0.15);
  EXPECT_LE(reduction, 0.50);
  const auto lf = to_model_file(net, StoreMode::LiePacked);
  const auto df = to_model_file(net, StoreMode::DenseCached);
  for (std::size_t i = 0; i + 1 < lf.layers.size(); ++i)
    if (net.layers()[i].spec.m() == net.layers()[i].spec.k())
      EXPECT_LT(lf.layers[i].payload.size(), df.layers[i].payload.size());
}

TEST(Store, FileIoErrorsNamePath) {
  const std::string missing = "/nonexistent-dir/model.ulie";
  try {
    read_file(missing);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find(missing), std::string::npos);
  }
  const auto path = (std::filesystem::temp_directory_path() / "ulie_store_test.ulie").string();
  const auto bytes = save(toy(16), StoreMode::DenseCached);
  write_file(path, bytes);
  EXPECT_EQ(read_file(path), bytes);
  std::filesystem::remove(path);
}
