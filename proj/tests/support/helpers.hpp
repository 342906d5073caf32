// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "oracles.hpp"
#include "palu/attention.hpp"
#include "palu/decomposition.hpp"
#include "palu/linalg.hpp"
#include "palu/random.hpp"

namespace testutil {

using palu::Matrix;

inline Matrix gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
  const palu::CounterRng rng(seed, 77);
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = scale * rng.normal(r, c);
  return m;
}

// Key or value rows rebuilt group by group from the factors: (x A_g) B_g.
// With bits < 16 the latent x A_g is passed through the scalar quantizer oracle first.
inline std::function<std::vector<double>(std::span<const double>)> factored(const palu::DecomposedLayer& layer,
                                                                            int bits = 16) {
  return [layer, bits](std::span<const double> x) {
    std::vector<double> out;
    for (const auto& g : layer.groups) {
      std::vector<double> h = oracle::row_times(x, g.a);
      if (bits < 16) h = oracle::quantize_row(h, bits).dequant;
      const auto y = oracle::row_times(h, g.b);
      out.insert(out.end(), y.begin(), y.end());
    }
    return out;
  };
}

// Explicit reconstruct-then-attend oracle over a decomposed model.
inline std::vector<std::vector<double>> explicit_decode(const palu::ModelWeights& w,
                                                       const std::vector<palu::PaluLayer>& layers,
                                                       const palu::AttentionConfig& cfg, const Matrix& tokens,
                                                       int key_bits = 16, int value_bits = 16) {
  std::vector<oracle::OracleLayer> ol;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    ol.push_back({w.layers[l].wq, w.layers[l].wo, factored(layers[l].key, key_bits),
                  factored(layers[l].value, value_bits)});
  }
  return oracle::naive_decode(ol, cfg.n_heads, cfg.head_dim, cfg.rope.enabled, cfg.rope.base, tokens);
}

inline std::vector<std::vector<double>> naive_reference(const palu::ModelWeights& w, const palu::AttentionConfig& cfg,
                                                        const Matrix& tokens) {
  std::vector<oracle::OracleLayer> ol;
  for (const auto& lw : w.layers) ol.push_back(oracle::dense_layer(lw.wq, lw.wk, lw.wv, lw.wo));
  return oracle::naive_decode(ol, cfg.n_heads, cfg.head_dim, cfg.rope.enabled, cfg.rope.base, tokens);
}

}  // namespace testutil
