// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "palu/decomposition.hpp"
#include "palu/matrix.hpp"
#include "palu/quantizer.hpp"

namespace palu {

struct RopeConfig {
  bool enabled = false;
  double base = 10000.0;
};

struct AttentionConfig {
  std::size_t d_model = 0;
  std::size_t n_heads = 0;
  std::size_t head_dim = 0;
  RopeConfig rope;
  std::size_t layers = 1;

  void validate() const;
};

/// Projections for one layer, all d x d. Head h owns columns
/// [h*d_h, (h+1)*d_h) of wq/wk/wv and rows [h*d_h, (h+1)*d_h) of wo.
struct LayerWeights {
  Matrix wq, wk, wv, wo;
};

struct ModelWeights {
  std::vector<LayerWeights> layers;

  void validate(const AttentionConfig& config) const;
};

/// Seeded weights with controlled spectra. Every head slice of wk and wv is
/// sqrt(d_h) * U diag(1, gamma, gamma^2, ...) V^T; wq and wo are Gaussian
/// scaled by 1/sqrt(d).
ModelWeights random_model(const AttentionConfig& config, std::uint64_t seed, double spectrum_decay);

/// Rotary embedding with half-split pairing: dimension i rotates with
/// i + d_h/2 by angle position * base^(-2i/d_h).
std::vector<double> rope_apply(std::span<const double> v, std::size_t position, double base);
void rope_apply_inplace(std::span<double> v, std::size_t position, double base);

std::vector<double> softmax(std::span<const double> logits);

/// Append-only row buffer used for per-layer caches.
class RowStore {
 public:
  explicit RowStore(std::size_t cols = 0) : cols_(cols) {}

  std::size_t rows() const noexcept { return cols_ == 0 ? 0 : data_.size() / cols_; }
  std::size_t cols() const noexcept { return cols_; }
  void append(std::span<const double> row);
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  Matrix to_matrix() const { return Matrix(rows(), cols_, data_); }

 private:
  std::size_t cols_;
  std::vector<double> data_;
};

/// Full-width key/value cache of the reference path. Keys are stored after
/// RoPE.
struct KVCache {
  std::vector<RowStore> keys;
  std::vector<RowStore> values;
  std::size_t tokens = 0;
};

/// Standard multi-head attention decode, one token at a time. Layer l+1 sees
/// x + MHA_l(x); the step output is the last layer's MHA output.
class ReferenceDecoder {
 public:
  ReferenceDecoder(const ModelWeights& weights, const AttentionConfig& config);

  std::vector<double> step(std::span<const double> x);
  const KVCache& cache() const noexcept { return cache_; }
  /// Input rows seen by each layer so far (calibration data for whitening).
  const std::vector<RowStore>& layer_inputs() const noexcept { return inputs_; }

 private:
  ModelWeights weights_;
  AttentionConfig config_;
  KVCache cache_;
  std::vector<RowStore> inputs_;
};

struct ReferenceResult {
  std::vector<std::vector<double>> outputs;
  KVCache cache;
};

ReferenceResult reference_decode(const ModelWeights& weights, const AttentionConfig& config,
                                 const Matrix& tokens);

struct PaluLayer {
  DecomposedLayer key;
  DecomposedLayer value;
};

/// Offline-fused matrices of one layer, stored per head (head h of group g
/// owns r_g columns/rows starting at head_offset[h]).
struct FusedLayer {
  Matrix wq_fused;  // d x sum_h r_g(h); blocks W^q_h (B^k_{g,h})^T, non-RoPE only
  Matrix wo_fused;  // sum_h r_g(h) x d; blocks B^v_{g,h} W^o_h
  std::vector<std::size_t> key_head_offset;
  std::vector<std::size_t> value_head_offset;
};

struct FusedWeights {
  std::vector<FusedLayer> layers;
};

FusedWeights fuse_weights(const ModelWeights& weights, const std::vector<PaluLayer>& layers,
                          const AttentionConfig& config);

/// Everything the latent decode paths read: original weights, factor pairs,
/// fused matrices, and per-head slices of B^k for online key reconstruction.
struct PaluModel {
  AttentionConfig config;
  ModelWeights weights;
  std::vector<PaluLayer> layers;
  FusedWeights fused;
  std::vector<std::vector<Matrix>> key_head_b;  // [layer][head]: r_g x d_h

  static PaluModel build(ModelWeights weights, std::vector<PaluLayer> layers,
                         const AttentionConfig& config);
};

/// Latent cache: per layer the concatenated group latents x A. With bits < 16
/// every appended row is quantized per group before storage and the stored
/// rows are the dequantized values.
struct LatentKVCache {
  std::vector<RowStore> hk;
  std::vector<RowStore> hv;
  std::vector<std::vector<QuantizedLatent>> qk;  // [layer][group], empty when keys stay fp
  std::vector<std::vector<QuantizedLatent>> qv;
  std::size_t tokens = 0;
  int bits = 16;
  bool quantize_keys = true;

  bool quantized() const noexcept { return bits < 16; }
};

/// bits 16 leaves the cache unquantized. quantize_keys=false keeps key
/// latents in full precision (values are still quantized).
LatentKVCache make_latent_cache(const PaluModel& model, int bits = 16, bool quantize_keys = true);

/// Non-RoPE step: scores x (W^q (B^k)^T) H^k^T / sqrt(d_h), output
/// p H^v (B^v W^o). Requires an unquantized cache.
std::vector<double> palu_decode_step_norope(const PaluModel& model, LatentKVCache& cache,
                                            std::span<const double> x);

/// RoPE step: keys rebuilt from latents tile by tile (tile_len cached rows),
/// rotated at their absolute positions, then scored. Values use the fused path.
std::vector<double> palu_decode_step_rope(const PaluModel& model, LatentKVCache& cache,
                                          std::span<const double> x, std::size_t tile_len);

/// Either path over a quantized cache; with a 16-bit cache it is the fp path.
std::vector<double> palu_decode_step_quantized(const PaluModel& model, LatentKVCache& cache,
                                               std::span<const double> x, std::size_t tile_len = 0);

/// Dispatches on the model's RoPE setting and the cache's width.
std::vector<double> palu_decode_step(const PaluModel& model, LatentKVCache& cache,
                                     std::span<const double> x, std::size_t tile_len = 0);

/// Runs the prompt through the latent path token by token and returns the cache.
LatentKVCache palu_prefill(const PaluModel& model, const Matrix& prompt, int bits = 16,
                           bool quantize_keys = true, std::size_t tile_len = 0);

double relative_vector_error(std::span<const double> value, std::span<const double> reference);

}  // namespace palu
