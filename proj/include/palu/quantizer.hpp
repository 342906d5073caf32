// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "palu/decomposition.hpp"
#include "palu/matrix.hpp"

namespace palu {

/// Bit widths the latent quantizer supports. 16 is accepted by the decode
/// paths as "no quantization" but is not a valid quantizer width.
bool is_quant_bits(int bits) noexcept;
void require_quant_bits(int bits);

/// Scale and zero-point of one token row.
struct RowQuantParams {
  double scale = 1.0;
  std::int64_t zero_point = 0;
};

/// Per-token (per-row) asymmetric uniform quantization of a latent block.
struct QuantizedLatent {
  std::size_t rows = 0;
  std::size_t cols = 0;
  int bits = 4;
  std::vector<std::uint8_t> codes;  // row-major, one code per byte, < 2^bits
  std::vector<double> scales;       // per row, > 0
  std::vector<std::int64_t> zero_points;

  void validate() const;
  friend bool operator==(const QuantizedLatent&, const QuantizedLatent&) = default;
};

/// s = max(max - min, 1e-8) / (2^bits - 1), z = round(-min / s),
/// code = clamp(round(x / s) + z, 0, 2^bits - 1). Rounding is half away
/// from zero.
RowQuantParams quantize_row(std::span<const double> row, int bits, std::span<std::uint8_t> codes);
void dequantize_row(std::span<const std::uint8_t> codes, RowQuantParams params,
                    std::span<double> out);

QuantizedLatent quantize(const Matrix& latent, int bits);
Matrix dequantize(const QuantizedLatent& q);

/// Appends one token row to an existing quantized block.
void append_quantized_row(QuantizedLatent& q, std::span<const double> row);

/// Mean squared dequantization error over all entries.
double quantization_mse(const Matrix& latent, int bits);

/// LSB-first bit stream: code i occupies bits [i*bits, (i+1)*bits). For 3-bit
/// codes this packs 8 codes into every 3 bytes.
std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, int bits);
std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t count,
                                       int bits);
std::size_t packed_size(std::size_t count, int bits) noexcept;

/// Factor pairs with a Hadamard rotation folded in: (A R, R^T B) per group.
struct RotatedLayer {
  DecomposedLayer layer;
  std::vector<std::size_t> rotation_dims;  // per group, equals the group rank
};

RotatedLayer fuse_hadamard(const DecomposedLayer& layer);

/// Mean over rows of ||row||_inf / rms(row). All-zero rows are skipped.
double outlier_metric(const Matrix& latent);

}  // namespace palu
