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

// Model file layout (all integers and floats little-endian):
//
//   "ULIE"            4 bytes magic
//   version           u16 (currently 1)
//   mode              u8  0 = lie-packed, 1 = dense-cached
//   layer count       u32
//   per layer:
//     c_out c_in d_H d_W kind stride pad      7 x u32
//     m k                                      2 x u32, only when kind == 1
//     payload length                           u64, in floats
//     payload                                  length x f64
//
// kind: 0 unitary conv (default mapping), 1 unitary conv (custom m, k),
//       2 dense head (c_in features -> c_out classes, payload W then bias),
//       3 unconstrained conv (payload m x k filter matrix).
// Unitary payloads are the packed Lie values in mode 0 and the oriented
// m x k weight in mode 1. Everything else is stored identically in both.

#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ulie/lie.hpp"
#include "ulie/model.hpp"
#include "ulie/tensor.hpp"
#include "ulie/unitary.hpp"

namespace ulie {

inline constexpr char kModelMagic[4] = {'U', 'L', 'I', 'E'};
inline constexpr std::uint16_t kModelVersion = 1;

enum class StoreMode : std::uint8_t { LiePacked = 0, DenseCached = 1 };

enum class RecordKind : std::uint32_t { Unitary = 0, UnitaryCustom = 1, DenseHead = 2, Unconstrained = 3 };

class ParseError : public std::runtime_error {
 public:
  enum class Code { BadMagic, UnsupportedVersion, Truncated, Malformed };
  ParseError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LayerRecord {
  std::uint32_t c_out = 0, c_in = 0, d_h = 0, d_w = 0;
  RecordKind kind = RecordKind::Unitary;
  std::uint32_t stride = 1, pad = 0;
  std::uint32_t m = 0, k = 0;  // meaningful for UnitaryCustom only
  std::vector<double> payload;

  bool operator==(const LayerRecord&) const = default;
};

struct ModelFile {
  StoreMode mode = StoreMode::LiePacked;
  std::vector<LayerRecord> layers;

  bool operator==(const ModelFile&) const = default;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(const char* p, std::size_t n) { out_.insert(out_.end(), p, p + n); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void put(std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1, "u8")); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2, "u16")); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4, "u32")); }
  std::uint64_t u64() { return get(8, "u64"); }
  double f64() { return std::bit_cast<double>(get(8, "f64")); }
  std::size_t remaining() const noexcept { return in_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

 private:
  std::uint64_t get(std::size_t bytes, const char* what) {
    if (remaining() < bytes) {
      throw ParseError(ParseError::Code::Truncated, std::string("model file truncated reading ") + what +
                                                        " at byte " + std::to_string(pos_));
    }
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += bytes;
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline std::uint32_t to_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw ShapeError(std::string("model store: ") + what + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

/// Payload length a record must carry in the given mode.
inline std::uint64_t expected_payload(const LayerRecord& r, StoreMode mode) {
  const std::uint64_t elements = std::uint64_t{r.c_out} * r.c_in * r.d_h * r.d_w;
  switch (r.kind) {
    case RecordKind::Unitary:
    case RecordKind::UnitaryCustom: {
      const std::uint64_t m = r.kind == RecordKind::Unitary ? std::uint64_t{r.c_in} * r.d_h * r.d_w : r.m;
      const std::uint64_t k = r.kind == RecordKind::Unitary ? r.c_out : r.k;
      if (mode == StoreMode::DenseCached) return m * k;
      return LieParams::packed_size(std::max(m, k), std::min(m, k));
    }
    case RecordKind::DenseHead:
      return elements + r.c_out;
    case RecordKind::Unconstrained:
      return elements;
  }
  return 0;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const ModelFile& file) {
  detail::ByteWriter w;
  w.raw(kModelMagic, 4);
  w.u16(kModelVersion);
  w.u8(static_cast<std::uint8_t>(file.mode));
  w.u32(detail::to_u32(file.layers.size(), "layer count"));
  for (const auto& r : file.layers) {
    if (r.payload.size() != detail::expected_payload(r, file.mode)) {
      throw ShapeError("encode: layer payload has " + std::to_string(r.payload.size()) + " floats, expected " +
                       std::to_string(detail::expected_payload(r, file.mode)));
    }
    for (auto v : {r.c_out, r.c_in, r.d_h, r.d_w, static_cast<std::uint32_t>(r.kind), r.stride, r.pad}) w.u32(v);
    if (r.kind == RecordKind::UnitaryCustom) {
      w.u32(r.m);
      w.u32(r.k);
    }
    w.u64(r.payload.size());
    for (double v : r.payload) w.f64(v);
  }
  return w.take();
}

inline ModelFile decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(kModelMagic, kModelMagic + 4, bytes.begin())) {
    throw ParseError(ParseError::Code::BadMagic, "not a model file: expected magic \"ULIE\"");
  }
  detail::ByteReader r(bytes.subspan(4));
  const std::uint16_t version = r.u16();
  if (version != kModelVersion) {
    throw ParseError(ParseError::Code::UnsupportedVersion, "unsupported model file version " +
                                                               std::to_string(version) + " (expected " +
                                                               std::to_string(kModelVersion) + ")");
  }
  ModelFile file;
  const std::uint8_t mode = r.u8();
  if (mode > 1) throw ParseError(ParseError::Code::Malformed, "unknown storage mode " + std::to_string(mode));
  file.mode = static_cast<StoreMode>(mode);
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    LayerRecord rec;
    rec.c_out = r.u32();
    rec.c_in = r.u32();
    rec.d_h = r.u32();
    rec.d_w = r.u32();
    const std::uint32_t kind = r.u32();
    if (kind > 3) {
      throw ParseError(ParseError::Code::Malformed, "layer " + std::to_string(i) + ": unknown kind " + std::to_string(kind));
    }
    rec.kind = static_cast<RecordKind>(kind);
    rec.stride = r.u32();
    rec.pad = r.u32();
    if (rec.kind == RecordKind::UnitaryCustom) {
      rec.m = r.u32();
      rec.k = r.u32();
    }
    if (rec.c_out == 0 || rec.c_in == 0 || rec.d_h == 0 || rec.d_w == 0 ||
        (rec.kind == RecordKind::UnitaryCustom &&
         (rec.m == 0 || rec.k == 0 ||
          std::uint64_t{rec.m} * rec.k != std::uint64_t{rec.c_out} * rec.c_in * rec.d_h * rec.d_w))) {
      throw ParseError(ParseError::Code::Malformed, "layer " + std::to_string(i) + ": invalid shape header");
    }
    const std::uint64_t len = r.u64();
    const std::uint64_t expected = detail::expected_payload(rec, file.mode);
    if (len != expected) {
      throw ParseError(ParseError::Code::Malformed, "layer " + std::to_string(i) + ": payload length " +
                                                        std::to_string(len) + ", expected " + std::to_string(expected));
    }
    if (r.remaining() / 8 < len) {
      throw ParseError(ParseError::Code::Truncated, "layer " + std::to_string(i) + ": payload truncated");
    }
    rec.payload.resize(len);
    for (auto& v : rec.payload) v = r.f64();
    file.layers.push_back(std::move(rec));
  }
  if (r.remaining() != 0) {
    throw ParseError(ParseError::Code::Malformed, std::to_string(r.remaining()) + " trailing bytes after last layer");
  }
  return file;
}

/// Storage view of a network. Dense mode exponentiates any Lie layers once.
inline ModelFile to_model_file(const Network& net, StoreMode mode) {
  if (mode == StoreMode::LiePacked && !net.has_lie_parameters()) {
    throw ShapeError("to_model_file: lie-packed mode needs Lie parameters, but the network is cached");
  }
  ModelFile file;
  file.mode = mode;
  for (const auto& l : net.layers()) {
    LayerRecord rec;
    rec.c_out = detail::to_u32(l.spec.c_out(), "c_out");
    rec.c_in = detail::to_u32(l.spec.c_in(), "c_in");
    rec.d_h = detail::to_u32(l.spec.d_h(), "d_H");
    rec.d_w = detail::to_u32(l.spec.d_w(), "d_W");
    rec.stride = detail::to_u32(l.stride, "stride");
    rec.pad = detail::to_u32(l.pad, "pad");
    if (l.is_unitary()) {
      rec.kind = l.spec.mapping() == Mapping::Custom ? RecordKind::UnitaryCustom : RecordKind::Unitary;
      if (rec.kind == RecordKind::UnitaryCustom) {
        rec.m = detail::to_u32(l.spec.m(), "m");
        rec.k = detail::to_u32(l.spec.k(), "k");
      }
      if (mode == StoreMode::LiePacked) {
        rec.payload.assign(l.lie->values().begin(), l.lie->values().end());
      } else {
        const auto w = net.unitary_weight(l);
        rec.payload.assign(w.matrix().data().begin(), w.matrix().data().end());
      }
    } else {
      rec.kind = RecordKind::Unconstrained;
      rec.payload.assign(l.plain->data().begin(), l.plain->data().end());
    }
    file.layers.push_back(std::move(rec));
  }
  LayerRecord head;
  head.kind = RecordKind::DenseHead;
  head.c_out = detail::to_u32(net.head().w.cols(), "classes");
  head.c_in = detail::to_u32(net.head().w.rows(), "features");
  head.d_h = head.d_w = 1;
  head.stride = 1;
  head.pad = 0;
  head.payload.assign(net.head().w.data().begin(), net.head().w.data().end());
  head.payload.insert(head.payload.end(), net.head().b.data().begin(), net.head().b.data().end());
  file.layers.push_back(std::move(head));
  return file;
}

/// Rebuilds a network; the last record must be the dense head.
inline Network to_network(const ModelFile& file, NetworkOptions opts = {}) {
  if (file.layers.empty() || file.layers.back().kind != RecordKind::DenseHead) {
    throw ParseError(ParseError::Code::Malformed, "model has no dense head record");
  }
  std::vector<ConvLayer> layers;
  for (std::size_t i = 0; i + 1 < file.layers.size(); ++i) {
    const auto& r = file.layers[i];
    const FilterSpec spec = r.kind == RecordKind::UnitaryCustom
                                ? FilterSpec::custom(r.c_out, r.c_in, r.d_h, r.d_w, r.m, r.k)
                                : FilterSpec(r.c_out, r.c_in, r.d_h, r.d_w);
    switch (r.kind) {
      case RecordKind::Unitary:
      case RecordKind::UnitaryCustom:
        if (file.mode == StoreMode::LiePacked) {
          layers.push_back(ConvLayer::unitary(spec, LieParams(spec.lie_dim(), spec.lie_cols(), r.payload), r.stride, r.pad));
        } else {
          layers.push_back(ConvLayer::frozen(spec, UnitaryWeight(Matrix(spec.m(), spec.k(), r.payload)), r.stride, r.pad));
        }
        break;
      case RecordKind::Unconstrained:
        layers.push_back(ConvLayer::unconstrained(spec, Matrix(spec.m(), spec.k(), r.payload), r.stride, r.pad));
        break;
      case RecordKind::DenseHead:
        throw ParseError(ParseError::Code::Malformed, "dense head record before the last layer");
    }
  }
  const auto& h = file.layers.back();
  const std::size_t wsize = std::size_t{h.c_in} * h.c_out;
  DenseHead head{Matrix(h.c_in, h.c_out, std::vector<double>(h.payload.begin(), h.payload.begin() + static_cast<std::ptrdiff_t>(wsize))),
                 Matrix(1, h.c_out, std::vector<double>(h.payload.begin() + static_cast<std::ptrdiff_t>(wsize), h.payload.end()))};
  return Network(std::move(layers), std::move(head), opts);
}

inline std::vector<std::uint8_t> save(const Network& net, StoreMode mode) { return encode(to_model_file(net, mode)); }

inline Network load(std::span<const std::uint8_t> bytes, NetworkOptions opts = {}) {
  return to_network(decode(bytes), opts);
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path);
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path + " for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading " + path);
  return bytes;
}

/// Payload floats a mode stores for a square m x m unitary layer.
inline std::size_t stored_values(std::size_t m, StoreMode mode) {
  return mode == StoreMode::DenseCached ? m * m : LieParams::packed_size(m, m);
}

}  // namespace ulie
