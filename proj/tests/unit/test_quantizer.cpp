// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "../support/helpers.hpp"
#include "palu/error.hpp"
#include "palu/linalg.hpp"
#include "palu/quantizer.hpp"

using namespace palu;

namespace {

DecomposedLayer seeded_layer(std::size_t rank, std::uint64_t seed) {
  const Matrix w = testutil::gaussian(16, 16, seed);
  return decompose(w, 8, 2, Granularity::multi_head(), equal_ranks(2, rank));
}

}  // namespace

TEST(Quantize, LatticeAlignedRow) {
  const auto q = quantize(Matrix{{0, 1, 2, 3}}, 2);
  EXPECT_DOUBLE_EQ(q.scales[0], 1.0);
  EXPECT_EQ(q.zero_points[0], 0);
  EXPECT_EQ(q.codes, (std::vector<std::uint8_t>{0, 1, 2, 3}));
  EXPECT_EQ(dequantize(q), (Matrix{{0, 1, 2, 3}}));
}

TEST(Quantize, ConstantRow) {
  const auto q = quantize(Matrix{{5, 5, 5}}, 4);
  EXPECT_DOUBLE_EQ(q.scales[0], 1e-8 / 15.0);
  EXPECT_EQ(q.codes[0], q.codes[1]);
  EXPECT_EQ(q.codes[1], q.codes[2]);
  const Matrix back = dequantize(q);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_LT(std::abs(back(0, c) - 5.0), 1e-7);
}

TEST(Quantize, ZeroPointClampExample) {
  // s = 2/7 and -min/s = 3.5 exactly, so z rounds away to 4 and the top
  // entry round(1/s) + z = 8 clamps to 7.
  const auto q = quantize(Matrix{{-1, 0, 1}}, 3);
  const auto o = oracle::quantize_row(std::vector<double>{-1, 0, 1}, 3);
  EXPECT_DOUBLE_EQ(q.scales[0], 2.0 / 7.0);
  EXPECT_EQ(q.zero_points[0], 4);
  EXPECT_EQ(q.codes, (std::vector<std::uint8_t>{0, 4, 7}));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(q.codes[c], o.codes[c]);
  const Matrix back = dequantize(q);
  EXPECT_NEAR(back(0, 0), -8.0 / 7.0, 1e-15);
  EXPECT_NEAR(back(0, 2), 6.0 / 7.0, 1e-15);
}

TEST(Quantize, MatchesScalarOracle) {
  for (int bits : {2, 3, 4, 8}) {
    const Matrix x = testutil::gaussian(32, 16, 100 + bits);
    const auto q = quantize(x, bits);
    const Matrix back = dequantize(q);
    for (std::size_t r = 0; r < 32; ++r) {
      const auto o = oracle::quantize_row(x.row(r), bits);
      EXPECT_EQ(q.scales[r], o.scale);
      double mse = 0.0, omse = 0.0;
      for (std::size_t c = 0; c < 16; ++c) {
        EXPECT_EQ(q.codes[r * 16 + c], o.codes[c]);
        mse += (back(r, c) - x(r, c)) * (back(r, c) - x(r, c));
        omse += (o.dequant[c] - x(r, c)) * (o.dequant[c] - x(r, c));
      }
      EXPECT_NEAR(mse, omse, 1e-12);
    }
  }
}

TEST(Quantize, ErrorBoundOnUnclampedEntries) {
  for (int bits : {2, 3, 4, 8}) {
    const Matrix x = testutil::gaussian(200, 24, 7 + bits, 3.0);
    const auto q = quantize(x, bits);
    const Matrix back = dequantize(q);
    const int qmax = (1 << bits) - 1;
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const double s = q.scales[r];
      const auto z = static_cast<double>(q.zero_points[r]);
      for (std::size_t c = 0; c < x.cols(); ++c) {
        const double raw = std::round(x(r, c) / s) + z;
        const bool clamped = raw < 0 || raw > qmax;
        if (!clamped) EXPECT_LE(std::abs(back(r, c) - x(r, c)), s / 2 + 1e-12);
        // clamped entries lie outside the representable interval
        const double lo = (0 - z) * s - s / 2, hi = (qmax - z) * s + s / 2;
        if (clamped) EXPECT_TRUE(x(r, c) <= lo + 1e-12 || x(r, c) >= hi - 1e-12);
      }
    }
  }
}

TEST(Quantize, IdempotentRoundTrip) {
  for (int bits : {2, 3, 4, 8}) {
    const auto q = quantize(testutil::gaussian(40, 12, 300 + bits), bits);
    const auto again = quantize(dequantize(q), bits);
    EXPECT_EQ(again.codes, q.codes) << bits;
  }
}

TEST(Quantize, AppendRowMatchesBatch) {
  const Matrix x = testutil::gaussian(6, 5, 11);
  QuantizedLatent q{0, 5, 3, {}, {}, {}};
  for (std::size_t r = 0; r < 6; ++r) append_quantized_row(q, x.row(r));
  EXPECT_EQ(q, quantize(x, 3));
}

TEST(Quantize, RejectsUnsupportedBits) {
  EXPECT_THROW(quantize(Matrix{{1, 2}}, 5), Error);
  EXPECT_THROW(quantize(Matrix{{1, 2}}, 16), Error);
  QuantizedLatent bad{1, 2, 2, {0, 4}, {1.0}, {0}};
  EXPECT_THROW(bad.validate(), Error);
  QuantizedLatent neg{1, 2, 2, {0, 1}, {-1.0}, {0}};
  EXPECT_THROW(neg.validate(), Error);
}

TEST(Quantize, MseHelperMatchesOracle) {
  const Matrix x = testutil::gaussian(10, 8, 12);
  double total = 0.0;
  for (std::size_t r = 0; r < 10; ++r) {
    const auto o = oracle::quantize_row(x.row(r), 2);
    for (std::size_t c = 0; c < 8; ++c) total += (o.dequant[c] - x(r, c)) * (o.dequant[c] - x(r, c));
  }
  EXPECT_NEAR(quantization_mse(x, 2), total / 80.0, 1e-15);
}

TEST(Packing, ThreeBitsPackEightCodesInThreeBytes) {
  const std::vector<std::uint8_t> codes = {0, 1, 2, 3, 4, 5, 6, 7};
  const auto packed = pack_codes(codes, 3);
  ASSERT_EQ(packed.size(), 3u);
  // LSB-first: bit i*3..i*3+2 holds code i.
  std::uint32_t stream = packed[0] | (packed[1] << 8) | (packed[2] << 16);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ((stream >> (3 * i)) & 7u, codes[i]);
  EXPECT_EQ(unpack_codes(packed, 8, 3), codes);
}

TEST(Packing, RoundTripAllWidths) {
  const palu::CounterRng rng(5);
  for (int bits : {1, 2, 3, 4, 5, 8}) {
    for (std::size_t n : {0u, 1u, 7u, 8u, 9u, 101u}) {
      std::vector<std::uint8_t> codes(n);
      for (std::size_t i = 0; i < n; ++i) codes[i] = static_cast<std::uint8_t>(rng.bits(i, bits) & ((1u << bits) - 1));
      const auto packed = pack_codes(codes, bits);
      EXPECT_EQ(packed.size(), packed_size(n, bits));
      EXPECT_EQ(packed.size(), (n * bits + 7) / 8);
      EXPECT_EQ(unpack_codes(packed, n, bits), codes);
    }
  }
  EXPECT_EQ(pack_codes(std::vector<std::uint8_t>{1, 2, 3, 0}, 2), (std::vector<std::uint8_t>{0x39}));
}

TEST(Hadamard, RankOneLeavesLayerUnchanged) {
  const auto layer = seeded_layer(1, 3);
  const auto rot = fuse_hadamard(layer);
  for (std::size_t g = 0; g < layer.groups.size(); ++g) {
    EXPECT_EQ(rot.layer.groups[g].a, layer.groups[g].a);
    EXPECT_EQ(rot.layer.groups[g].b, layer.groups[g].b);
    EXPECT_EQ(rot.rotation_dims[g], 1u);
  }
}

TEST(Hadamard, RotationIsExact) {
  for (std::size_t rank : {2u, 3u, 4u, 6u, 8u}) {
    const auto layer = seeded_layer(rank, 10 + rank);
    const auto rot = fuse_hadamard(layer);
    EXPECT_LT(max_abs_diff(reconstruct(rot.layer), reconstruct(layer)), 1e-10);
    EXPECT_LT(relative_error(reconstruct(rot.layer), reconstruct(layer)), 1e-9);
  }
}

TEST(Hadamard, InvolutionForPowersOfTwo) {
  const auto layer = seeded_layer(4, 5);
  const auto twice = fuse_hadamard(fuse_hadamard(layer).layer);
  for (std::size_t g = 0; g < layer.groups.size(); ++g) {
    EXPECT_LT(max_abs_diff(twice.layer.groups[g].a, layer.groups[g].a), 1e-10);
  }
}

TEST(Hadamard, PreservesTokenLatentNorms) {
  const auto layer = seeded_layer(8, 6);
  const auto rot = fuse_hadamard(layer);
  const Matrix x = testutil::gaussian(20, 16, 7);
  for (std::size_t g = 0; g < layer.groups.size(); ++g) {
    const Matrix h = oracle::matmul(x, layer.groups[g].a);
    const Matrix hr = oracle::matmul(x, rot.layer.groups[g].a);
    for (std::size_t r = 0; r < 20; ++r) {
      double n0 = 0.0, n1 = 0.0;
      for (std::size_t c = 0; c < h.cols(); ++c) {
        n0 += h(r, c) * h(r, c);
        n1 += hr(r, c) * hr(r, c);
      }
      EXPECT_NEAR(std::sqrt(n0), std::sqrt(n1), 1e-10);
    }
  }
}

TEST(OutlierMetric, ClosedForms) {
  EXPECT_DOUBLE_EQ(outlier_metric(Matrix(3, 5, 1.0)), 1.0);
  Matrix onehot(4, 16);
  for (std::size_t r = 0; r < 4; ++r) onehot(r, r) = 1.0;
  EXPECT_DOUBLE_EQ(outlier_metric(onehot), 4.0);
  Matrix with_zero_row(2, 4);
  with_zero_row(0, 0) = 1.0;
  EXPECT_DOUBLE_EQ(outlier_metric(with_zero_row), 2.0);
}

TEST(OutlierMetric, DecreasesAfterRotationOnSvdLatents) {
  const Matrix w = random_matrix(32, 16, 4, 0.5);
  const auto layer = decompose(w, 16, 1, Granularity::multi_head(), equal_ranks(1, 8));
  const auto rot = fuse_hadamard(layer);
  const Matrix x = testutil::gaussian(64, 32, 9);
  const double before = outlier_metric(oracle::matmul(x, layer.groups[0].a));
  const double after = outlier_metric(oracle::matmul(x, rot.layer.groups[0].a));
  EXPECT_LT(after, before);
}
