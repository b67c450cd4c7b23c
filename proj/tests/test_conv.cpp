// Copyright 2026 The ulie Authors. Licensed under the Apache License, Version 2.0.

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "ulie/conv.hpp"

using namespace ulie;

namespace {

Tensor4 random_tensor(Rng& rng, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  Tensor4 t(n, c, h, w);
  for (double& v : t.data()) v = rng.gaussian();
  return t;
}

double max_diff(const Tensor4& a, const Tensor4& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST(Geometry, OutputExtents) {
  const ConvGeometry g(3, 8, 8, 3, 3, 4, 2, 1);
  EXPECT_EQ(g.h_out(), 4u);
  EXPECT_EQ(g.w_out(), 4u);
  EXPECT_EQ(g.patch_size(), 27u);
  EXPECT_EQ(ConvGeometry(1, 5, 5, 2, 2, 1, 2, 0).h_out(), 2u);  // floor convention
  EXPECT_THROW(ConvGeometry(1, 2, 2, 3, 3, 1), ShapeError);
  EXPECT_THROW(ConvGeometry(1, 2, 2, 1, 1, 1, 0), ShapeError);
}

TEST(ConvDirect, ScalarProduct) {
  const ConvGeometry g(1, 1, 1, 1, 1, 1);
  const Tensor4 out = conv_direct(Tensor4(1, 1, 1, 1, {5}), Tensor4(1, 1, 1, 1, {3}), g);
  EXPECT_EQ(out(0, 0, 0, 0), 15.0);
}

TEST(ConvDirect, HandEvaluatedCrossCorrelation) {
  const ConvGeometry g(1, 2, 2, 2, 2, 1);
  const Tensor4 out = conv_direct(Tensor4(1, 1, 2, 2, {1, 2, 3, 4}), Tensor4(1, 1, 2, 2, {1, 0, 0, 1}), g);
  EXPECT_EQ(out.h(), 1u);
  EXPECT_EQ(out(0, 0, 0, 0), 5.0);
}

TEST(ConvDirect, DeltaFilterIsIdentity) {
  Rng rng(1);
  const Tensor4 img = random_tensor(rng, 2, 1, 4, 5);
  const ConvGeometry g(1, 4, 5, 1, 1, 1);
  const Tensor4 out = conv_direct(img, Tensor4(1, 1, 1, 1, {1.0}), g);
  EXPECT_EQ(max_diff(out, img), 0.0);
}

TEST(ConvDirect, ShapeMismatch) {
  const ConvGeometry g(2, 3, 3, 2, 2, 1);
  EXPECT_THROW(conv_direct(Tensor4(1, 1, 3, 3), Tensor4(1, 2, 2, 2), g), ShapeError);
  EXPECT_THROW(conv_direct(Tensor4(1, 2, 3, 3), Tensor4(1, 2, 3, 3), g), ShapeError);
}

TEST(Im2col, OneByOneKernelListsPixels) {
  const ConvGeometry g(1, 2, 2, 1, 1, 1);
  const auto t = im2col(Tensor4(1, 1, 2, 2, {1, 2, 3, 4}), g);
  EXPECT_EQ(t.mat, (Matrix{{1}, {2}, {3}, {4}}));
}

TEST(Im2col, PatchEnumeration) {
  const ConvGeometry g(1, 3, 3, 2, 2, 1);
  const auto t = im2col(Tensor4(1, 1, 3, 3, {0, 1, 2, 3, 4, 5, 6, 7, 8}), g);
  ASSERT_EQ(t.mat.rows(), 4u);
  ASSERT_EQ(t.mat.cols(), 4u);
  // Position (i, j) covers I(i+m, j+n) in (m, n) row-major order.
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t m = 0; m < 2; ++m)
        for (std::size_t n = 0; n < 2; ++n)
          EXPECT_EQ(t.mat(i * 2 + j, m * 2 + n), static_cast<double>((i + m) * 3 + (j + n)));
  EXPECT_EQ(t.mat(0, 0), 0.0);
  EXPECT_EQ(t.mat(0, 1), 1.0);
  EXPECT_EQ(t.mat(0, 2), 3.0);
  EXPECT_EQ(t.mat(0, 3), 4.0);
}

TEST(Im2col, ToeplitzMatchesDirectOnRandomGeometries) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t c_in = 1 + rng.index(4), c_out = 1 + rng.index(4);
    const std::size_t dh = 1 + rng.index(3), dw = 1 + rng.index(3);
    const std::size_t pad = rng.index(2), stride = 1 + rng.index(2);
    const std::size_t h = std::max<std::size_t>(dh, 1 + rng.index(8));
    const std::size_t w = std::max<std::size_t>(dw, 1 + rng.index(8));
    const ConvGeometry g(c_in, h, w, dh, dw, c_out, stride, pad);
    const Tensor4 img = random_tensor(rng, 1 + rng.index(2), c_in, h, w);
    const Tensor4 f = random_tensor(rng, c_out, c_in, dh, dw);
    EXPECT_LT(max_diff(conv_toeplitz(img, f, g), conv_direct(img, f, g)), 1e-12) << trial;
  }
}

TEST(Im2col, Col2imIsAdjoint) {
  Rng rng(5);
  const ConvGeometry g(3, 6, 5, 3, 2, 2, 2, 1);
  const std::size_t batch = 2;
  const Matrix act = random_gaussian(rng, batch * 30, 3, 1.0);
  const Matrix cols = random_gaussian(rng, batch * g.positions(), g.patch_size(), 1.0);
  const Matrix fwd = im2col_rows(act, batch, g);
  const Matrix back = col2im_rows(cols, batch, g);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < fwd.size(); ++i) lhs += fwd.data()[i] * cols.data()[i];
  for (std::size_t i = 0; i < act.size(); ++i) rhs += act.data()[i] * back.data()[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Padding, CropRecoversValidConvolution) {
  Rng rng(7);
  const Tensor4 img = random_tensor(rng, 1, 2, 6, 7);
  const Tensor4 f = random_tensor(rng, 3, 2, 3, 3);
  const Tensor4 valid = conv_direct(img, f, ConvGeometry(2, 6, 7, 3, 3, 3));
  const Tensor4 padded = conv_toeplitz(img, f, ConvGeometry(2, 6, 7, 3, 3, 3, 1, 1));
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t y = 0; y < valid.h(); ++y)
      for (std::size_t x = 0; x < valid.w(); ++x) EXPECT_NEAR(padded(0, o, y + 1, x + 1), valid(0, o, y, x), 1e-12);
}

TEST(UnitaryConv, ZeroParamsProjectGivesUnitPixels) {
  Rng rng(9);
  const FilterSpec spec(4, 2, 3, 3);
  const ConvGeometry g = ConvGeometry::for_filters(spec, 5, 5, 1, 1);
  const Tensor4 img = random_tensor(rng, 2, 2, 5, 5);
  const Tensor4 out = unitary_conv_forward(img, LieParams(spec.lie_dim(), spec.lie_cols()), spec, g);
  const Matrix rows = nchw_to_rows(out);
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    const double n = l2_norm(rows.row(r));
    // Corner patches can lose every kept coordinate to padding; the guard maps those to zero.
    if (n > 1e-6) EXPECT_NEAR(n, 1.0, 1e-12);
  }
}

TEST(UnitaryConv, ZeroParamsIsometryPreservesPatchNorms) {
  Rng rng(11);
  const FilterSpec spec(8, 2, 2, 2);  // m = 8 = k
  const ConvGeometry g = ConvGeometry::for_filters(spec, 4, 4);
  const Tensor4 img = random_tensor(rng, 1, 2, 4, 4);
  const Tensor4 out = unitary_conv_forward(img, LieParams(8, 8), spec, g);
  const Matrix in_rows = im2col(img, g).mat;
  const Matrix out_rows = nchw_to_rows(out);
  for (std::size_t r = 0; r < in_rows.rows(); ++r)
    EXPECT_NEAR(l2_norm(out_rows.row(r)) / l2_norm(in_rows.row(r)), 1.0, 1e-10);
}

TEST(UnitaryConv, MatchesDirectPathWithRowNormalization) {
  Rng rng(13);
  for (const FilterSpec& spec : {FilterSpec(4, 2, 3, 3), FilterSpec(16, 8, 1, 1), FilterSpec(3, 3, 2, 2),
                                 FilterSpec::custom(4, 2, 3, 3, 12, 6), FilterSpec::custom(2, 2, 2, 2, 4, 4)}) {
    const auto lp = LieParams::random_uniform(rng, spec.lie_dim(), spec.lie_cols(), -1, 1);
    const ConvGeometry g = ConvGeometry::for_filters(spec, 6, 6, 2, 1);
    const Tensor4 img = random_tensor(rng, 2, spec.c_in(), 6, 6);
    const Tensor4 got = unitary_conv_forward(img, lp, spec, g);

    const UnitaryWeight w = build_weight(lp, spec);
    Tensor4 want = conv_direct(img, reshape_to_filters(w, spec), g);
    if (w.weight_case() == WeightCase::Project) {
      for (std::size_t b = 0; b < want.n(); ++b)
        for (std::size_t y = 0; y < want.h(); ++y)
          for (std::size_t x = 0; x < want.w(); ++x) {
            double sq = 0;
            for (std::size_t o = 0; o < want.c(); ++o) sq += want(b, o, y, x) * want(b, o, y, x);
            for (std::size_t o = 0; o < want.c(); ++o) want(b, o, y, x) /= std::sqrt(sq + 1e-24);
          }
    }
    EXPECT_LT(max_diff(got, want), 1e-12);
  }
}

TEST(UnitaryConv, SpecGeometryMismatch) {
  const FilterSpec spec(4, 2, 3, 3);
  EXPECT_THROW(unitary_conv_forward(Tensor4(1, 2, 5, 5), LieParams(18, 4), spec, ConvGeometry(2, 5, 5, 3, 3, 5)),
               ShapeError);
}
