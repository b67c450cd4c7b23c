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

#include <cstddef>
#include <string>

#include "ulie/lie.hpp"
#include "ulie/tensor.hpp"
#include "ulie/unitary.hpp"

namespace ulie {

/**
 * Spatial bookkeeping for one convolution.
 *
 * Output extent is floor((h + 2*pad - d_H) / stride) + 1, the usual
 * convention, so stride-2 downsampling of even-sized maps is allowed.
 */
class ConvGeometry {
 public:
  ConvGeometry(std::size_t c_in, std::size_t h, std::size_t w, std::size_t d_h, std::size_t d_w,
               std::size_t c_out, std::size_t stride = 1, std::size_t pad = 0)
      : c_in_(c_in), h_(h), w_(w), d_h_(d_h), d_w_(d_w), c_out_(c_out), stride_(stride), pad_(pad) {
    if (c_in == 0 || h == 0 || w == 0 || d_h == 0 || d_w == 0 || c_out == 0) {
      throw ShapeError("ConvGeometry: all extents must be positive");
    }
    if (stride == 0) throw ShapeError("ConvGeometry: stride must be positive");
    if (h + 2 * pad < d_h || w + 2 * pad < d_w) {
      throw ShapeError("ConvGeometry: kernel " + std::to_string(d_h) + "x" + std::to_string(d_w) +
                       " larger than padded input " + std::to_string(h + 2 * pad) + "x" +
                       std::to_string(w + 2 * pad));
    }
    h_out_ = (h + 2 * pad - d_h) / stride + 1;
    w_out_ = (w + 2 * pad - d_w) / stride + 1;
  }

  /// Geometry of `spec` applied to a (c_in, h, w) input.
  static ConvGeometry for_filters(const FilterSpec& spec, std::size_t h, std::size_t w,
                                  std::size_t stride = 1, std::size_t pad = 0) {
    return ConvGeometry(spec.c_in(), h, w, spec.d_h(), spec.d_w(), spec.c_out(), stride, pad);
  }

  std::size_t c_in() const noexcept { return c_in_; }
  std::size_t h() const noexcept { return h_; }
  std::size_t w() const noexcept { return w_; }
  std::size_t d_h() const noexcept { return d_h_; }
  std::size_t d_w() const noexcept { return d_w_; }
  std::size_t c_out() const noexcept { return c_out_; }
  std::size_t stride() const noexcept { return stride_; }
  std::size_t pad() const noexcept { return pad_; }
  std::size_t h_out() const noexcept { return h_out_; }
  std::size_t w_out() const noexcept { return w_out_; }
  std::size_t patch_size() const noexcept { return c_in_ * d_h_ * d_w_; }
  std::size_t positions() const noexcept { return h_out_ * w_out_; }

  bool operator==(const ConvGeometry&) const = default;

 private:
  std::size_t c_in_, h_, w_, d_h_, d_w_, c_out_, stride_, pad_;
  std::size_t h_out_ = 0, w_out_ = 0;
};

/// One row per output position (batch-major, then h_out, then w_out); columns
/// in (c_in, d_H, d_W) order, matching the default filter flattening.
struct ToeplitzMatrix {
  Matrix mat;
  ConvGeometry geometry;
  std::size_t batch;
};

namespace detail {

inline void check_image(const Tensor4& image, const ConvGeometry& g, const char* what) {
  if (image.c() != g.c_in() || image.h() != g.h() || image.w() != g.w() || image.n() == 0) {
    throw ShapeError(std::string(what) + ": image " + image.shape() + " does not match geometry (" +
                     std::to_string(g.c_in()) + "," + std::to_string(g.h()) + "," +
                     std::to_string(g.w()) + ")");
  }
}

/// Calls fn(row, col, source) for every in-bounds Toeplitz entry, where
/// `source` is the pixel-row index into an (n*h*w) x c_in activation.
template <class Fn>
void for_each_patch_entry(const ConvGeometry& g, std::size_t batch, Fn&& fn) {
  const std::size_t kh = g.d_h(), kw = g.d_w();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad());
  std::size_t row = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t oy = 0; oy < g.h_out(); ++oy) {
      for (std::size_t ox = 0; ox < g.w_out(); ++ox, ++row) {
        for (std::size_t p = 0; p < kh; ++p) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride() + p) - pad;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h())) continue;
          for (std::size_t q = 0; q < kw; ++q) {
            const auto x = static_cast<std::ptrdiff_t>(ox * g.stride() + q) - pad;
            if (x < 0 || x >= static_cast<std::ptrdiff_t>(g.w())) continue;
            const std::size_t src = (b * g.h() + static_cast<std::size_t>(y)) * g.w() +
                                    static_cast<std::size_t>(x);
            for (std::size_t ci = 0; ci < g.c_in(); ++ci) fn(row, (ci * kh + p) * kw + q, src, ci);
          }
        }
      }
    }
  }
}

}  // namespace detail

/// NCHW batch to pixel rows: row (b, y, x), one column per channel.
inline Matrix nchw_to_rows(const Tensor4& t) {
  Matrix out(t.n() * t.h() * t.w(), t.c());
  for (std::size_t b = 0; b < t.n(); ++b)
    for (std::size_t c = 0; c < t.c(); ++c)
      for (std::size_t y = 0; y < t.h(); ++y)
        for (std::size_t x = 0; x < t.w(); ++x) out((b * t.h() + y) * t.w() + x, c) = t(b, c, y, x);
  return out;
}

inline Tensor4 rows_to_nchw(const Matrix& rows, std::size_t n, std::size_t h, std::size_t w) {
  if (rows.rows() != n * h * w) {
    throw ShapeError("rows_to_nchw: " + rows.shape() + " is not " + std::to_string(n) + "x" +
                     std::to_string(h) + "x" + std::to_string(w) + " pixels");
  }
  Tensor4 out(n, rows.cols(), h, w);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < rows.cols(); ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out(b, c, y, x) = rows((b * h + y) * w + x, c);
  return out;
}

/// Toeplitz form of a pixel-row activation ((batch*h*w) x c_in).
inline Matrix im2col_rows(const Matrix& act, std::size_t batch, const ConvGeometry& g) {
  if (act.rows() != batch * g.h() * g.w() || act.cols() != g.c_in()) {
    throw ShapeError("im2col_rows: activation " + act.shape() + " does not match geometry");
  }
  Matrix out(batch * g.positions(), g.patch_size());
  detail::for_each_patch_entry(g, batch, [&](std::size_t r, std::size_t c, std::size_t src, std::size_t ci) {
    out(r, c) = act(src, ci);
  });
  return out;
}

/// Adjoint of im2col_rows: scatter-adds Toeplitz gradients back to pixels.
inline Matrix col2im_rows(const Matrix& cols, std::size_t batch, const ConvGeometry& g) {
  if (cols.rows() != batch * g.positions() || cols.cols() != g.patch_size()) {
    throw ShapeError("col2im_rows: " + cols.shape() + " does not match geometry");
  }
  Matrix out(batch * g.h() * g.w(), g.c_in());
  detail::for_each_patch_entry(g, batch, [&](std::size_t r, std::size_t c, std::size_t src, std::size_t ci) {
    out(src, ci) += cols(r, c);
  });
  return out;
}

inline ToeplitzMatrix im2col(const Tensor4& image, const ConvGeometry& g) {
  detail::check_image(image, g, "im2col");
  return {im2col_rows(nchw_to_rows(image), image.n(), g), g, image.n()};
}

/// Filters (c_out, c_in, d_H, d_W) as a (c_in*d_H*d_W) x c_out matrix.
inline Matrix filters_to_columns(const Tensor4& filters) {
  return flatten_filters(filters, FilterSpec(filters.n(), filters.c(), filters.h(), filters.w()));
}

/// Cross-correlation by nested loops: O(b,o,i,j) = sum I(b,c,i*s+m-p, j*s+n-p) F(o,c,m,n).
inline Tensor4 conv_direct(const Tensor4& image, const Tensor4& filters, const ConvGeometry& g) {
  detail::check_image(image, g, "conv_direct");
  if (filters.n() != g.c_out() || filters.c() != g.c_in() || filters.h() != g.d_h() ||
      filters.w() != g.d_w()) {
    throw ShapeError("conv_direct: filters " + filters.shape() + " do not match geometry");
  }
  Tensor4 out(image.n(), g.c_out(), g.h_out(), g.w_out());
  const auto pad = static_cast<std::ptrdiff_t>(g.pad());
  for (std::size_t b = 0; b < image.n(); ++b)
    for (std::size_t o = 0; o < g.c_out(); ++o)
      for (std::size_t i = 0; i < g.h_out(); ++i)
        for (std::size_t j = 0; j < g.w_out(); ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < g.c_in(); ++c)
            for (std::size_t m = 0; m < g.d_h(); ++m) {
              const auto y = static_cast<std::ptrdiff_t>(i * g.stride() + m) - pad;
              if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h())) continue;
              for (std::size_t n = 0; n < g.d_w(); ++n) {
                const auto x = static_cast<std::ptrdiff_t>(j * g.stride() + n) - pad;
                if (x < 0 || x >= static_cast<std::ptrdiff_t>(g.w())) continue;
                acc += image(b, c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) *
                       filters(o, c, m, n);
              }
            }
          out(b, o, i, j) = acc;
        }
  return out;
}

/// Toeplitz-path convolution with a plain filter bank.
inline Tensor4 conv_toeplitz(const Tensor4& image, const Tensor4& filters, const ConvGeometry& g) {
  const auto t = im2col(image, g);
  return rows_to_nchw(matmul(t.mat, filters_to_columns(filters)), image.n(), g.h_out(), g.w_out());
}

inline void check_spec_geometry(const FilterSpec& spec, const ConvGeometry& g) {
  if (spec.c_in() != g.c_in() || spec.c_out() != g.c_out() || spec.d_h() != g.d_h() ||
      spec.d_w() != g.d_w()) {
    throw ShapeError("filter spec does not match convolution geometry");
  }
}

/// Column form of a unitary weight: the weight itself under the default
/// mapping, re-laid through the filter tensor under a custom one.
inline Matrix conv_columns(const UnitaryWeight& w, const FilterSpec& spec) {
  if (spec.mapping() == Mapping::FanInToFanOut) return w.matrix();
  return filters_to_columns(reshape_to_filters(w, spec));
}

/// Pixel-row form of a unitary convolution; each Toeplitz row is handled
/// independently, including the unit normalization of projected rows.
inline Matrix unitary_conv_rows(const Matrix& toeplitz, const UnitaryWeight& w, const FilterSpec& spec,
                                const NormalizeOptions& opts = {}) {
  if (spec.mapping() == Mapping::FanInToFanOut) return apply_weight(w, toeplitz, opts);
  Matrix y = matmul(toeplitz, conv_columns(w, spec));
  if (w.weight_case() == WeightCase::Project) normalize_rows(y, toeplitz, opts);
  return y;
}

inline Tensor4 unitary_conv_forward(const Tensor4& image, const UnitaryWeight& w, const FilterSpec& spec,
                                    const ConvGeometry& g, const NormalizeOptions& opts = {}) {
  check_spec_geometry(spec, g);
  const auto t = im2col(image, g);
  return rows_to_nchw(unitary_conv_rows(t.mat, w, spec, opts), image.n(), g.h_out(), g.w_out());
}

inline Tensor4 unitary_conv_forward(const Tensor4& image, const LieParams& lp, const FilterSpec& spec,
                                    const ConvGeometry& g, const ExpmConfig& cfg = {},
                                    const NormalizeOptions& opts = {}) {
  check_spec_geometry(spec, g);
  return unitary_conv_forward(image, build_weight(lp, spec, cfg), spec, g, opts);
}

}  // namespace ulie
