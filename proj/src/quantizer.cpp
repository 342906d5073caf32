// SPDX-License-Identifier: Apache-2.0
#include "palu/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "palu/error.hpp"
#include "palu/linalg.hpp"

namespace palu {

namespace {

constexpr double kMinRange = 1e-8;

double qmax_of(int bits) { return static_cast<double>((1 << bits) - 1); }

}  // namespace

bool is_quant_bits(int bits) noexcept {
  return bits == 2 || bits == 3 || bits == 4 || bits == 8;
}

void require_quant_bits(int bits) {
  if (!is_quant_bits(bits)) {
    fail_validation("unsupported quantization width " + std::to_string(bits) +
                    " (expected 2, 3, 4 or 8)");
  }
}

void QuantizedLatent::validate() const {
  require_quant_bits(bits);
  if (codes.size() != rows * cols || scales.size() != rows || zero_points.size() != rows) {
    fail_validation("quantized latent buffers do not match " + std::to_string(rows) + "x" +
                    std::to_string(cols));
  }
  const auto limit = static_cast<unsigned>((1 << bits) - 1);
  for (auto c : codes)
    if (c > limit) fail_validation("quantized code exceeds 2^bits - 1");
  for (double s : scales)
    if (!(s > 0.0)) fail_validation("quantization scale must be positive");
}

RowQuantParams quantize_row(std::span<const double> row, int bits, std::span<std::uint8_t> codes) {
  const double qmax = qmax_of(bits);
  double lo = 0.0, hi = 0.0;
  if (!row.empty()) {
    const auto [mn, mx] = std::minmax_element(row.begin(), row.end());
    lo = *mn;
    hi = *mx;
  }
  RowQuantParams p;
  p.scale = std::max(hi - lo, kMinRange) / qmax;
  p.zero_point = std::llround(-lo / p.scale);
  const auto z = static_cast<double>(p.zero_point);
  for (std::size_t i = 0; i < row.size(); ++i) {
    const double q = std::round(row[i] / p.scale) + z;
    codes[i] = static_cast<std::uint8_t>(std::clamp(q, 0.0, qmax));
  }
  return p;
}

void dequantize_row(std::span<const std::uint8_t> codes, RowQuantParams params,
                    std::span<double> out) {
  for (std::size_t i = 0; i < codes.size(); ++i) {
    out[i] = (static_cast<double>(codes[i]) - static_cast<double>(params.zero_point)) * params.scale;
  }
}

QuantizedLatent quantize(const Matrix& latent, int bits) {
  require_quant_bits(bits);
  latent.require_finite("quantize input");
  QuantizedLatent q;
  q.rows = 0;
  q.cols = latent.cols();
  q.bits = bits;
  q.codes.reserve(latent.size());
  for (std::size_t r = 0; r < latent.rows(); ++r) append_quantized_row(q, latent.row(r));
  return q;
}

void append_quantized_row(QuantizedLatent& q, std::span<const double> row) {
  if (row.size() != q.cols) {
    fail_validation("row of width " + std::to_string(row.size()) + " appended to latent of width " +
                    std::to_string(q.cols));
  }
  const std::size_t offset = q.codes.size();
  q.codes.resize(offset + q.cols);
  const auto p = quantize_row(row, q.bits, std::span(q.codes).subspan(offset, q.cols));
  q.scales.push_back(p.scale);
  q.zero_points.push_back(p.zero_point);
  ++q.rows;
}

Matrix dequantize(const QuantizedLatent& q) {
  Matrix out(q.rows, q.cols);
  for (std::size_t r = 0; r < q.rows; ++r) {
    dequantize_row(std::span(q.codes).subspan(r * q.cols, q.cols), {q.scales[r], q.zero_points[r]},
                   out.row(r));
  }
  return out;
}

double quantization_mse(const Matrix& latent, int bits) {
  if (latent.empty()) return 0.0;
  const Matrix back = dequantize(quantize(latent, bits));
  double sum = 0.0;
  for (std::size_t i = 0; i < latent.size(); ++i) {
    const double d = latent.data()[i] - back.data()[i];
    sum += d * d;
  }
  return sum / static_cast<double>(latent.size());
}

std::size_t packed_size(std::size_t count, int bits) noexcept {
  return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, int bits) {
  if (bits < 1 || bits > 8) fail_validation("pack width must be 1..8 bits");
  std::vector<std::uint8_t> out(packed_size(codes.size(), bits), 0);
  const unsigned mask = (1u << bits) - 1u;
  std::size_t bit = 0;
  for (auto c : codes) {
    const unsigned v = c & mask;
    const std::size_t byte = bit / 8;
    const unsigned shift = bit % 8;
    out[byte] = static_cast<std::uint8_t>(out[byte] | (v << shift));
    if (shift + static_cast<unsigned>(bits) > 8) {
      out[byte + 1] = static_cast<std::uint8_t>(out[byte + 1] | (v >> (8 - shift)));
    }
    bit += static_cast<std::size_t>(bits);
  }
  return out;
}

std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t count,
                                       int bits) {
  if (bits < 1 || bits > 8) fail_validation("pack width must be 1..8 bits");
  if (packed.size() < packed_size(count, bits)) {
    fail_validation("packed buffer of " + std::to_string(packed.size()) + " bytes is too short for " +
                    std::to_string(count) + " codes");
  }
  std::vector<std::uint8_t> out(count);
  const unsigned mask = (1u << bits) - 1u;
  std::size_t bit = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t byte = bit / 8;
    const unsigned shift = bit % 8;
    unsigned v = static_cast<unsigned>(packed[byte]) >> shift;
    if (shift + static_cast<unsigned>(bits) > 8) v |= static_cast<unsigned>(packed[byte + 1]) << (8 - shift);
    out[i] = static_cast<std::uint8_t>(v & mask);
    bit += static_cast<std::size_t>(bits);
  }
  return out;
}

RotatedLayer fuse_hadamard(const DecomposedLayer& layer) {
  RotatedLayer out{layer, {}};
  for (auto& g : out.layer.groups) {
    const Matrix r = hadamard(static_cast<int>(g.rank));
    g.a = matmul(g.a, r);
    g.b = matmul(transpose(r), g.b);
    out.rotation_dims.push_back(g.rank);
  }
  return out;
}

double outlier_metric(const Matrix& latent) {
  if (latent.empty()) fail_validation("outlier_metric of an empty latent");
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < latent.rows(); ++r) {
    double inf = 0.0, sq = 0.0;
    for (double v : latent.row(r)) {
      inf = std::max(inf, std::abs(v));
      sq += v * v;
    }
    if (sq == 0.0) continue;
    total += inf / std::sqrt(sq / static_cast<double>(latent.cols()));
    ++counted;
  }
  return counted == 0 ? 0.0 : total / static_cast<double>(counted);
}

}  // namespace palu
