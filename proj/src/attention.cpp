// SPDX-License-Identifier: Apache-2.0
#include "palu/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "palu/error.hpp"
#include "palu/linalg.hpp"
#include "palu/random.hpp"

namespace palu {

void AttentionConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || head_dim == 0 || layers == 0) {
    fail_validation("attention config needs positive d_model, n_heads, head_dim and layers");
  }
  if (d_model != n_heads * head_dim) {
    fail_validation("d_model " + std::to_string(d_model) + " != n_heads * head_dim = " +
                    std::to_string(n_heads * head_dim));
  }
  if (rope.enabled && !(rope.base > 1.0)) fail_validation("rope base must exceed 1");
  if (rope.enabled && head_dim % 2 != 0) fail_validation("rope needs an even head_dim");
}

void ModelWeights::validate(const AttentionConfig& config) const {
  config.validate();
  if (layers.size() != config.layers) {
    fail_validation("model has " + std::to_string(layers.size()) + " layers, config expects " +
                    std::to_string(config.layers));
  }
  const std::size_t d = config.d_model;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (const Matrix* m : {&layers[l].wq, &layers[l].wk, &layers[l].wv, &layers[l].wo}) {
      if (m->rows() != d || m->cols() != d) {
        fail_validation("layer " + std::to_string(l) + " projection " + m->shape_string() +
                        " is not " + std::to_string(d) + "x" + std::to_string(d));
      }
      m->require_finite("layer " + std::to_string(l) + " weights");
    }
  }
}

ModelWeights random_model(const AttentionConfig& config, std::uint64_t seed, double spectrum_decay) {
  config.validate();
  const std::size_t d = config.d_model;
  const std::size_t dh = config.head_dim;
  const double head_scale = std::sqrt(static_cast<double>(dh));
  const double dense_scale = 1.0 / std::sqrt(static_cast<double>(d));
  auto spectral = [&](std::uint64_t s) {
    std::vector<Matrix> heads;
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      heads.push_back(scale(random_matrix(d, dh, CounterRng::mix(s + h), spectrum_decay), head_scale));
    }
    return hconcat(heads);
  };
  ModelWeights w;
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::uint64_t base = CounterRng::mix(seed * 1000003ULL + l);
    LayerWeights lw;
    lw.wq = scale(random_matrix(d, d, base ^ 0x71ULL), dense_scale);
    lw.wk = spectral(CounterRng::mix(base ^ 0x6bULL));
    lw.wv = spectral(CounterRng::mix(base ^ 0x76ULL));
    lw.wo = scale(random_matrix(d, d, base ^ 0x6fULL), dense_scale);
    w.layers.push_back(std::move(lw));
  }
  return w;
}

void rope_apply_inplace(std::span<double> v, std::size_t position, double base) {
  const std::size_t n = v.size();
  if (n % 2 != 0) fail_validation("rope needs an even head_dim, got " + std::to_string(n));
  const std::size_t half = n / 2;
  const auto pos = static_cast<double>(position);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(n));
    const double angle = pos * freq;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double a = v[i];
    const double b = v[i + half];
    v[i] = a * c - b * s;
    v[i + half] = a * s + b * c;
  }
}

std::vector<double> rope_apply(std::span<const double> v, std::size_t position, double base) {
  std::vector<double> out(v.begin(), v.end());
  rope_apply_inplace(out, position, base);
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

void RowStore::append(std::span<const double> row) {
  if (row.size() != cols_) {
    fail_validation("cache row of width " + std::to_string(row.size()) + " appended to width " +
                    std::to_string(cols_));
  }
  data_.insert(data_.end(), row.begin(), row.end());
}

namespace {

// x (1 x rows) times columns [c0, c1) of m.
std::vector<double> vec_mat(std::span<const double> x, const Matrix& m, std::size_t c0, std::size_t c1) {
  std::vector<double> out(c1 - c0, 0.0);
  for (std::size_t k = 0; k < m.rows(); ++k) {
    const double xk = x[k];
    const auto row = m.row(k);
    for (std::size_t j = c0; j < c1; ++j) out[j - c0] += xk * row[j];
  }
  return out;
}

// x (1 x (r1 - r0)) times rows [r0, r1) of m, accumulated into out.
void vec_rows_mat_acc(std::span<const double> x, const Matrix& m, std::size_t r0,
                      std::span<double> out) {
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double xk = x[k];
    const auto row = m.row(r0 + k);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += xk * row[j];
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void add_into(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

ReferenceDecoder::ReferenceDecoder(const ModelWeights& weights, const AttentionConfig& config)
    : weights_(weights), config_(config) {
  weights_.validate(config_);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    cache_.keys.emplace_back(config_.d_model);
    cache_.values.emplace_back(config_.d_model);
    inputs_.emplace_back(config_.d_model);
  }
}

std::vector<double> ReferenceDecoder::step(std::span<const double> x_in) {
  const std::size_t d = config_.d_model;
  const std::size_t dh = config_.head_dim;
  if (x_in.size() != d) fail_validation("token width " + std::to_string(x_in.size()) + " != d_model");
  const std::size_t pos = cache_.tokens;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> x(x_in.begin(), x_in.end());
  std::vector<double> out;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const auto& w = weights_.layers[l];
    inputs_[l].append(x);
    std::vector<double> q = vec_mat(x, w.wq, 0, d);
    std::vector<double> k = vec_mat(x, w.wk, 0, d);
    const std::vector<double> v = vec_mat(x, w.wv, 0, d);
    if (config_.rope.enabled) {
      for (std::size_t h = 0; h < config_.n_heads; ++h) {
        rope_apply_inplace(std::span(q).subspan(h * dh, dh), pos, config_.rope.base);
        rope_apply_inplace(std::span(k).subspan(h * dh, dh), pos, config_.rope.base);
      }
    }
    cache_.keys[l].append(k);
    cache_.values[l].append(v);
    const std::size_t t = cache_.keys[l].rows();

    out.assign(d, 0.0);
    std::vector<double> logits(t);
    for (std::size_t h = 0; h < config_.n_heads; ++h) {
      const auto qh = std::span<const double>(q).subspan(h * dh, dh);
      for (std::size_t tau = 0; tau < t; ++tau) {
        logits[tau] = dot(qh, cache_.keys[l].row(tau).subspan(h * dh, dh)) * inv_sqrt;
      }
      const auto p = softmax(logits);
      std::vector<double> a(dh, 0.0);
      for (std::size_t tau = 0; tau < t; ++tau) {
        const auto vh = cache_.values[l].row(tau).subspan(h * dh, dh);
        for (std::size_t i = 0; i < dh; ++i) a[i] += p[tau] * vh[i];
      }
      vec_rows_mat_acc(a, w.wo, h * dh, out);
    }
    add_into(x, out);
  }
  ++cache_.tokens;
  return out;
}

ReferenceResult reference_decode(const ModelWeights& weights, const AttentionConfig& config,
                                 const Matrix& tokens) {
  ReferenceDecoder dec(weights, config);
  ReferenceResult result;
  for (std::size_t t = 0; t < tokens.rows(); ++t) result.outputs.push_back(dec.step(tokens.row(t)));
  result.cache = dec.cache();
  return result;
}

namespace {

void require_matching(const DecomposedLayer& layer, const AttentionConfig& config, const char* what,
                      std::size_t l) {
  layer.validate();
  if (layer.d_model != config.d_model || layer.head_dim != config.head_dim ||
      layer.n_heads != config.n_heads) {
    fail_validation(std::string(what) + " factors of layer " + std::to_string(l) +
                    " do not match the attention config");
  }
}

}  // namespace

FusedWeights fuse_weights(const ModelWeights& weights, const std::vector<PaluLayer>& layers,
                          const AttentionConfig& config) {
  FusedWeights fused;
  const std::size_t dh = config.head_dim;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& key = layers[l].key;
    const auto& value = layers[l].value;
    const std::size_t ks = key.granularity.group_size();
    const std::size_t vs = value.granularity.group_size();
    std::vector<Matrix> q_blocks, o_blocks;
    FusedLayer f;
    std::size_t k_off = 0, v_off = 0;
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      const auto& kg = key.groups[h / ks];
      const std::size_t kl = h % ks;
      f.key_head_offset.push_back(k_off);
      k_off += kg.rank;
      if (!config.rope.enabled) {
        const Matrix wq_h = slice_cols(weights.layers[l].wq, h * dh, (h + 1) * dh);
        const Matrix bk_h = slice_cols(kg.b, kl * dh, (kl + 1) * dh);
        q_blocks.push_back(matmul(wq_h, transpose(bk_h)));
      }
      const auto& vg = value.groups[h / vs];
      const std::size_t vl = h % vs;
      f.value_head_offset.push_back(v_off);
      v_off += vg.rank;
      const Matrix bv_h = slice_cols(vg.b, vl * dh, (vl + 1) * dh);
      const Matrix wo_h = slice_rows(weights.layers[l].wo, h * dh, (h + 1) * dh);
      o_blocks.push_back(matmul(bv_h, wo_h));
    }
    if (!q_blocks.empty()) f.wq_fused = hconcat(q_blocks);
    f.wo_fused = vconcat(o_blocks);
    fused.layers.push_back(std::move(f));
  }
  return fused;
}

PaluModel PaluModel::build(ModelWeights weights, std::vector<PaluLayer> layers,
                           const AttentionConfig& config) {
  weights.validate(config);
  if (layers.size() != config.layers) {
    fail_validation("got factors for " + std::to_string(layers.size()) + " layers, config has " +
                    std::to_string(config.layers));
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    require_matching(layers[l].key, config, "key", l);
    require_matching(layers[l].value, config, "value", l);
  }
  PaluModel m;
  m.config = config;
  m.fused = fuse_weights(weights, layers, config);
  const std::size_t dh = config.head_dim;
  for (const auto& pl : layers) {
    std::vector<Matrix> heads;
    const std::size_t s = pl.key.granularity.group_size();
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      const std::size_t local = h % s;
      heads.push_back(slice_cols(pl.key.groups[h / s].b, local * dh, (local + 1) * dh));
    }
    m.key_head_b.push_back(std::move(heads));
  }
  m.weights = std::move(weights);
  m.layers = std::move(layers);
  return m;
}

LatentKVCache make_latent_cache(const PaluModel& model, int bits, bool quantize_keys) {
  if (bits != 16) require_quant_bits(bits);
  LatentKVCache cache;
  cache.bits = bits;
  cache.quantize_keys = quantize_keys;
  for (const auto& pl : model.layers) {
    cache.hk.emplace_back(pl.key.total_rank());
    cache.hv.emplace_back(pl.value.total_rank());
    std::vector<QuantizedLatent> qk, qv;
    if (bits != 16) {
      for (const auto& g : pl.key.groups)
        if (quantize_keys) qk.push_back({0, g.rank, bits, {}, {}, {}});
      for (const auto& g : pl.value.groups) qv.push_back({0, g.rank, bits, {}, {}, {}});
    }
    cache.qk.push_back(std::move(qk));
    cache.qv.push_back(std::move(qv));
  }
  return cache;
}

namespace {

enum class ScorePath { fused, rope_tiled };

// Projects x through every group's A, quantizing per group when the cache
// asks for it, and appends the (dequantized) latent row.
void append_latent(const DecomposedLayer& layer, std::span<const double> x,
                   std::vector<QuantizedLatent>& quantized, RowStore& store) {
  std::vector<double> row;
  row.reserve(layer.total_rank());
  for (std::size_t g = 0; g < layer.groups.size(); ++g) {
    std::vector<double> h = vec_mat(x, layer.groups[g].a, 0, layer.groups[g].rank);
    if (!quantized.empty()) {
      append_quantized_row(quantized[g], h);
      const auto& q = quantized[g];
      dequantize_row(std::span(q.codes).subspan((q.rows - 1) * q.cols, q.cols),
                     {q.scales.back(), q.zero_points.back()}, h);
    }
    row.insert(row.end(), h.begin(), h.end());
  }
  store.append(row);
}

std::vector<double> latent_step(const PaluModel& model, LatentKVCache& cache,
                                std::span<const double> x_in, ScorePath path, std::size_t tile_len) {
  const auto& cfg = model.config;
  const std::size_t d = cfg.d_model;
  const std::size_t dh = cfg.head_dim;
  if (x_in.size() != d) fail_validation("token width " + std::to_string(x_in.size()) + " != d_model");
  if (cache.hk.size() != model.layers.size()) fail_validation("cache does not belong to this model");
  const std::size_t pos = cache.tokens;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> x(x_in.begin(), x_in.end());
  std::vector<double> out;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& pl = model.layers[l];
    const auto& fused = model.fused.layers[l];
    if (cache.hk[l].cols() != pl.key.total_rank() || cache.hv[l].cols() != pl.value.total_rank()) {
      fail_validation("cache/fused rank mismatch at layer " + std::to_string(l));
    }
    append_latent(pl.key, x, cache.qk[l], cache.hk[l]);
    append_latent(pl.value, x, cache.qv[l], cache.hv[l]);
    const std::size_t t = cache.hk[l].rows();
    const std::size_t tile = tile_len == 0 ? t : tile_len;

    std::vector<double> q_full;
    if (path == ScorePath::rope_tiled) q_full = vec_mat(x, model.weights.layers[l].wq, 0, d);

    out.assign(d, 0.0);
    std::vector<double> logits(t);
    const std::size_t ks = pl.key.granularity.group_size();
    const std::size_t vs = pl.value.granularity.group_size();
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const std::size_t kg = h / ks;
      const std::size_t k_rank = pl.key.groups[kg].rank;
      const std::size_t k_col = pl.key.latent_offset(kg);
      if (path == ScorePath::fused) {
        const std::size_t off = fused.key_head_offset[h];
        const std::vector<double> q_lat = vec_mat(x, fused.wq_fused, off, off + k_rank);
        for (std::size_t tau = 0; tau < t; ++tau) {
          logits[tau] = dot(q_lat, cache.hk[l].row(tau).subspan(k_col, k_rank)) * inv_sqrt;
        }
      } else {
        std::vector<double> qh(q_full.begin() + static_cast<std::ptrdiff_t>(h * dh),
                               q_full.begin() + static_cast<std::ptrdiff_t>((h + 1) * dh));
        rope_apply_inplace(qh, pos, cfg.rope.base);
        const Matrix& bk = model.key_head_b[l][h];
        for (std::size_t start = 0; start < t; start += tile) {
          const std::size_t stop = std::min(t, start + tile);
          // Rebuild this tile's keys, rotate, score.
          Matrix keys(stop - start, dh);
          for (std::size_t tau = start; tau < stop; ++tau) {
            auto k = keys.row(tau - start);
            vec_rows_mat_acc(cache.hk[l].row(tau).subspan(k_col, k_rank), bk, 0, k);
            rope_apply_inplace(k, tau, cfg.rope.base);
          }
          for (std::size_t tau = start; tau < stop; ++tau) {
            logits[tau] = dot(qh, keys.row(tau - start)) * inv_sqrt;
          }
        }
      }
      const auto p = softmax(logits);

      const std::size_t vg = h / vs;
      const std::size_t v_rank = pl.value.groups[vg].rank;
      const std::size_t v_col = pl.value.latent_offset(vg);
      std::vector<double> a(v_rank, 0.0);
      for (std::size_t tau = 0; tau < t; ++tau) {
        const auto hv = cache.hv[l].row(tau).subspan(v_col, v_rank);
        for (std::size_t i = 0; i < v_rank; ++i) a[i] += p[tau] * hv[i];
      }
      vec_rows_mat_acc(a, fused.wo_fused, fused.value_head_offset[h], out);
    }
    add_into(x, out);
  }
  ++cache.tokens;
  return out;
}

}  // namespace

std::vector<double> palu_decode_step_norope(const PaluModel& model, LatentKVCache& cache,
                                            std::span<const double> x) {
  if (model.config.rope.enabled) fail_validation("fused score path is invalid with RoPE enabled");
  if (cache.quantized()) fail_validation("cache is quantized; use the quantized decode step");
  return latent_step(model, cache, x, ScorePath::fused, 0);
}

std::vector<double> palu_decode_step_rope(const PaluModel& model, LatentKVCache& cache,
                                          std::span<const double> x, std::size_t tile_len) {
  if (!model.config.rope.enabled) fail_validation("RoPE decode step on a model without RoPE");
  if (tile_len == 0) fail_validation("tile_len must be at least 1");
  if (cache.quantized()) fail_validation("cache is quantized; use the quantized decode step");
  return latent_step(model, cache, x, ScorePath::rope_tiled, tile_len);
}

std::vector<double> palu_decode_step_quantized(const PaluModel& model, LatentKVCache& cache,
                                               std::span<const double> x, std::size_t tile_len) {
  for (std::size_t l = 0; l < cache.qv.size(); ++l) {
    for (const auto& q : cache.qv[l])
      if (q.bits != cache.bits) fail_validation("bits mismatch across cache");
    for (const auto& q : cache.qk[l])
      if (q.bits != cache.bits) fail_validation("bits mismatch across cache");
  }
  if (model.config.rope.enabled) {
    return latent_step(model, cache, x, ScorePath::rope_tiled, tile_len);
  }
  return latent_step(model, cache, x, ScorePath::fused, 0);
}

std::vector<double> palu_decode_step(const PaluModel& model, LatentKVCache& cache,
                                     std::span<const double> x, std::size_t tile_len) {
  if (cache.quantized()) return palu_decode_step_quantized(model, cache, x, tile_len);
  // tile_len 0 scores the whole cache as one tile
  if (model.config.rope.enabled) return latent_step(model, cache, x, ScorePath::rope_tiled, tile_len);
  return palu_decode_step_norope(model, cache, x);
}

LatentKVCache palu_prefill(const PaluModel& model, const Matrix& prompt, int bits,
                           bool quantize_keys, std::size_t tile_len) {
  LatentKVCache cache = make_latent_cache(model, bits, quantize_keys);
  if (!prompt.empty() && prompt.cols() != model.config.d_model) {
    fail_validation("prompt width " + std::to_string(prompt.cols()) + " != d_model");
  }
  for (std::size_t t = 0; t < prompt.rows(); ++t) palu_decode_step(model, cache, prompt.row(t), tile_len);
  return cache;
}

double relative_vector_error(std::span<const double> value, std::span<const double> reference) {
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double e = value[i] - reference[i];
    diff += e * e;
    ref += reference[i] * reference[i];
  }
  return ref > 0.0 ? std::sqrt(diff / ref) : std::sqrt(diff);
}

}  // namespace palu
