// SPDX-License-Identifier: Apache-2.0
#include "palu/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "palu/error.hpp"
#include "palu/linalg.hpp"
#include "palu/quantizer.hpp"
#include "palu/random.hpp"

namespace palu {

namespace {

using nlohmann::json;

const std::set<std::string> kTopKeys = {
    "synthetic",    "preset",        "granularity",    "group_size",   "budget_rate",
    "min_rank",     "rounding",      "fisher",         "fisher_batches", "fisher_tokens",
    "whitened",     "calib_samples", "bits",           "hadamard",     "quantize_keys",
    "rope",         "rope_base",     "tile_len",       "stream_length", "seed",
    "quant_preset", "report_tokens", "out_dir",        "model_path"};
const std::set<std::string> kSyntheticKeys = {"d_model", "n_heads", "head_dim", "layers",
                                              "spectrum", "seed"};

template <typename T>
T field(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    fail_validation(fmt::format("config field '{}' has the wrong type", key));
  }
}

std::size_t count_field(const json& j, const char* key, std::size_t fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
    fail_validation(fmt::format("config field '{}' must be a non-negative integer", key));
  }
  return v.get<std::size_t>();
}

template <typename F>
auto in_stage(const char* stage, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const Error& e) {
    throw Error(e.kind(), fmt::format("stage '{}': {}", stage, e.what()));
  } catch (const std::exception& e) {
    throw Error(ErrorKind::validation, fmt::format("stage '{}': {}", stage, e.what()));
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_validation("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) fail_validation("failed writing '" + path.string() + "'");
}

std::string layer_key(std::size_t l, const char* kind, std::size_t g, const char* part) {
  return fmt::format("layer{}.{}.g{}.{}", l, kind, g, part);
}

// Output rows of heads [h0, h1) of one attention layer over a causal batch.
Matrix head_outputs(const Matrix& x, const LayerWeights& w, const AttentionConfig& cfg,
                    std::size_t h0, std::size_t h1, const Matrix& wk, const Matrix& wv) {
  const std::size_t n = x.rows();
  const std::size_t dh = cfg.head_dim;
  const Matrix q = matmul(x, w.wq);
  const Matrix k = matmul(x, wk);
  const Matrix v = matmul(x, wv);
  Matrix out(n, cfg.d_model);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = h0; h < h1; ++h) {
    std::vector<std::vector<double>> keys(n);
    for (std::size_t t = 0; t < n; ++t) {
      keys[t].assign(k.row(t).begin() + static_cast<std::ptrdiff_t>(h * dh),
                     k.row(t).begin() + static_cast<std::ptrdiff_t>((h + 1) * dh));
      if (cfg.rope.enabled) rope_apply_inplace(keys[t], t, cfg.rope.base);
    }
    for (std::size_t t = 0; t < n; ++t) {
      std::vector<double> qh(q.row(t).begin() + static_cast<std::ptrdiff_t>(h * dh),
                             q.row(t).begin() + static_cast<std::ptrdiff_t>((h + 1) * dh));
      if (cfg.rope.enabled) rope_apply_inplace(qh, t, cfg.rope.base);
      std::vector<double> logits(t + 1);
      for (std::size_t tau = 0; tau <= t; ++tau) {
        double s = 0.0;
        for (std::size_t i = 0; i < dh; ++i) s += qh[i] * keys[tau][i];
        logits[tau] = s * inv_sqrt;
      }
      const auto p = softmax(logits);
      std::vector<double> a(dh, 0.0);
      for (std::size_t tau = 0; tau <= t; ++tau)
        for (std::size_t i = 0; i < dh; ++i) a[i] += p[tau] * v(tau, h * dh + i);
      auto o = out.row(t);
      for (std::size_t i = 0; i < dh; ++i) {
        const auto wo_row = w.wo.row(h * dh + i);
        for (std::size_t j = 0; j < cfg.d_model; ++j) o[j] += a[i] * wo_row[j];
      }
    }
  }
  return out;
}

Matrix with_slice(const Matrix& w, const Matrix& slice, std::size_t c0) {
  Matrix out = w;
  for (std::size_t r = 0; r < slice.rows(); ++r)
    for (std::size_t c = 0; c < slice.cols(); ++c) out(r, c0 + c) = slice(r, c);
  return out;
}

// Inputs seen by every layer when the reference model decodes `tokens`.
std::vector<Matrix> layer_inputs(const LoadedModel& model, const Matrix& tokens) {
  ReferenceDecoder dec(model.weights, model.config);
  for (std::size_t t = 0; t < tokens.rows(); ++t) dec.step(tokens.row(t));
  std::vector<Matrix> out;
  for (const auto& store : dec.layer_inputs()) out.push_back(store.to_matrix());
  return out;
}

json layers_meta(const std::vector<PaluLayer>& layers) {
  if (layers.empty()) fail_validation("no decomposed layers");
  const auto& k = layers.front().key;
  return {{"kind", "decomposed"},
          {"layers", layers.size()},
          {"granularity", k.granularity.name()},
          {"group_size", k.granularity.group_size()},
          {"d_model", k.d_model},
          {"head_dim", k.head_dim},
          {"n_heads", k.n_heads}};
}

}  // namespace

PipelineConfig PipelineConfig::from_json(const json& j) {
  if (!j.is_object()) fail_validation("config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!kTopKeys.count(key)) fail_validation("unknown config key '" + key + "'");

  PipelineConfig c;
  if (j.contains("synthetic")) {
    const auto& s = j.at("synthetic");
    if (!s.is_object()) fail_validation("config field 'synthetic' must be an object");
    for (const auto& [key, _] : s.items())
      if (!kSyntheticKeys.count(key)) fail_validation("unknown synthetic key '" + key + "'");
    SyntheticSpec spec;
    spec.d_model = count_field(s, "d_model", spec.d_model);
    spec.n_heads = count_field(s, "n_heads", spec.n_heads);
    spec.head_dim = count_field(s, "head_dim", spec.head_dim);
    spec.layers = count_field(s, "layers", spec.layers);
    spec.spectrum = field<double>(s, "spectrum", spec.spectrum);
    if (s.contains("seed")) spec.seed = count_field(s, "seed", 0);
    if (spec.layers == 0) fail_validation("synthetic.layers must be at least 1");
    if (spec.d_model == 0 || spec.n_heads == 0 || spec.head_dim == 0) {
      fail_validation("synthetic d_model, n_heads and head_dim must be positive");
    }
    if (spec.d_model != spec.n_heads * spec.head_dim) {
      fail_validation("synthetic d_model must equal n_heads * head_dim");
    }
    if (!(spec.spectrum > 0.0 && spec.spectrum <= 1.0)) {
      fail_validation("synthetic.spectrum must lie in (0, 1]");
    }
    c.synthetic = spec;
  }
  if (j.contains("preset")) c.preset = field<std::string>(j, "preset", "");
  c.granularity = field<std::string>(j, "granularity", c.granularity);
  c.group_size = count_field(j, "group_size", c.group_size);
  c.budget_rate = field<double>(j, "budget_rate", c.budget_rate);
  c.min_rank = count_field(j, "min_rank", c.min_rank);
  c.rounding = field<std::string>(j, "rounding", c.rounding);
  c.fisher = field<bool>(j, "fisher", c.fisher);
  c.fisher_batches = count_field(j, "fisher_batches", c.fisher_batches);
  c.fisher_tokens = count_field(j, "fisher_tokens", c.fisher_tokens);
  c.whitened = field<bool>(j, "whitened", c.whitened);
  c.calib_samples = count_field(j, "calib_samples", c.calib_samples);
  c.bits = field<int>(j, "bits", c.bits);
  c.hadamard = field<bool>(j, "hadamard", c.hadamard);
  c.quantize_keys = field<bool>(j, "quantize_keys", c.quantize_keys);
  c.rope = field<bool>(j, "rope", c.rope);
  c.rope_base = field<double>(j, "rope_base", c.rope_base);
  c.tile_len = count_field(j, "tile_len", c.tile_len);
  c.stream_length = count_field(j, "stream_length", c.stream_length);
  c.seed = count_field(j, "seed", c.seed);
  c.quant_preset = field<std::string>(j, "quant_preset", c.quant_preset);
  c.report_tokens = count_field(j, "report_tokens", c.report_tokens);
  c.out_dir = field<std::string>(j, "out_dir", c.out_dir);
  if (j.contains("model_path")) c.model_path = field<std::string>(j, "model_path", "");

  if (!(c.budget_rate > 0.0 && c.budget_rate <= 1.0)) fail_validation("budget_rate must lie in (0, 1]");
  if (c.bits != 16) require_quant_bits(c.bits);
  if (c.group_size == 0) fail_validation("group_size must be at least 1");
  if (c.min_rank == 0) fail_validation("min_rank must be at least 1");
  if (c.fisher_batches == 0 || c.fisher_tokens == 0) {
    fail_validation("fisher_batches and fisher_tokens must be at least 1");
  }
  if (c.stream_length == 0) fail_validation("stream_length must be at least 1");
  if (c.tile_len == 0) fail_validation("tile_len must be at least 1");
  if (c.rope && !(c.rope_base > 1.0)) fail_validation("rope_base must exceed 1");
  if (c.quant_preset != "none" && c.quant_preset != "palu-table2" && c.quant_preset != "rope-fp16-keys") {
    fail_validation("quant_preset must be none, palu-table2 or rope-fp16-keys");
  }
  if (c.quant_preset == "rope-fp16-keys") c.quantize_keys = false;
  RankRounding::parse(c.rounding);
  if (c.preset) ModelPreset::by_name(*c.preset);
  return c;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail_validation("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail_validation("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return from_json(j);
}

json PipelineConfig::to_json() const {
  json j;
  if (synthetic) {
    j["synthetic"] = {{"d_model", synthetic->d_model},   {"n_heads", synthetic->n_heads},
                      {"head_dim", synthetic->head_dim}, {"layers", synthetic->layers},
                      {"spectrum", synthetic->spectrum}};
    if (synthetic->seed) j["synthetic"]["seed"] = *synthetic->seed;
  }
  if (preset) j["preset"] = *preset;
  j["granularity"] = granularity;
  j["group_size"] = group_size;
  j["budget_rate"] = budget_rate;
  j["min_rank"] = min_rank;
  j["rounding"] = rounding;
  j["fisher"] = fisher;
  j["fisher_batches"] = fisher_batches;
  j["fisher_tokens"] = fisher_tokens;
  j["whitened"] = whitened;
  j["calib_samples"] = calib_samples;
  j["bits"] = bits;
  j["hadamard"] = hadamard;
  j["quantize_keys"] = quantize_keys;
  j["rope"] = rope;
  j["rope_base"] = rope_base;
  j["tile_len"] = tile_len;
  j["stream_length"] = stream_length;
  j["seed"] = seed;
  j["quant_preset"] = quant_preset;
  j["report_tokens"] = report_tokens;
  j["out_dir"] = out_dir;
  if (model_path) j["model_path"] = *model_path;
  return j;
}

std::uint64_t PipelineConfig::stage_seed(const std::string& stage) const { return derive_seed(seed, stage); }

AttentionConfig PipelineConfig::attention_config() const {
  if (!synthetic) fail_validation("config has no synthetic model spec");
  AttentionConfig a;
  a.d_model = synthetic->d_model;
  a.n_heads = synthetic->n_heads;
  a.head_dim = synthetic->head_dim;
  a.layers = synthetic->layers;
  a.rope = {rope, rope_base};
  a.validate();
  return a;
}

Granularity PipelineConfig::granularity_for(std::size_t n_heads) const {
  const Granularity g = Granularity::parse(granularity, group_size, n_heads);
  g.validate(n_heads);
  return g;
}

const json& pipeline_config_schema() {
  static const json schema = [] {
    auto count = [](int minimum) { return json{{"type", "integer"}, {"minimum", minimum}}; };
    json props = {
        {"synthetic",
         {{"type", "object"},
          {"additionalProperties", false},
          {"required", {"d_model", "n_heads", "head_dim", "layers"}},
          {"properties",
           {{"d_model", count(1)},
            {"n_heads", count(1)},
            {"head_dim", count(1)},
            {"layers", count(1)},
            {"spectrum", {{"type", "number"}, {"exclusiveMinimum", 0}, {"maximum", 1}}},
            {"seed", count(0)}}}}},
        {"preset", {{"type", "string"}, {"enum", {"llama2-7b"}}}},
        {"granularity",
         {{"type", "string"},
          {"enum", {"multi_head", "group_head", "joint_head", "m-lrd", "g-lrd", "j-lrd"}}}},
        {"group_size", count(1)},
        {"budget_rate", {{"type", "number"}, {"exclusiveMinimum", 0}, {"maximum", 1}}},
        {"min_rank", count(1)},
        {"rounding", {{"type", "string"}, {"pattern", "^(none|pow2|block:[1-9][0-9]*)$"}}},
        {"fisher", {{"type", "boolean"}}},
        {"fisher_batches", count(1)},
        {"fisher_tokens", count(1)},
        {"whitened", {{"type", "boolean"}}},
        {"calib_samples", count(0)},
        {"bits", {{"type", "integer"}, {"enum", {2, 3, 4, 8, 16}}}},
        {"hadamard", {{"type", "boolean"}}},
        {"quantize_keys", {{"type", "boolean"}}},
        {"rope", {{"type", "boolean"}}},
        {"rope_base", {{"type", "number"}, {"exclusiveMinimum", 1}}},
        {"tile_len", count(1)},
        {"stream_length", count(1)},
        {"seed", count(0)},
        {"quant_preset", {{"type", "string"}, {"enum", {"none", "palu-table2", "rope-fp16-keys"}}}},
        {"report_tokens", count(0)},
        {"out_dir", {{"type", "string"}}},
        {"model_path", {{"type", "string"}}}};
    return json{{"$schema", "https://json-schema.org/draft/2020-12/schema"},
                {"title", "palu pipeline config"},
                {"type", "object"},
                {"additionalProperties", false},
                {"properties", props}};
  }();
  return schema;
}

TensorContainer model_to_container(const ModelWeights& weights, const AttentionConfig& config,
                                   json meta) {
  weights.validate(config);
  TensorContainer c;
  for (std::size_t l = 0; l < weights.layers.size(); ++l) {
    const auto& w = weights.layers[l];
    c.add(fmt::format("layer{}.wq", l), w.wq);
    c.add(fmt::format("layer{}.wk", l), w.wk);
    c.add(fmt::format("layer{}.wv", l), w.wv);
    c.add(fmt::format("layer{}.wo", l), w.wo);
  }
  meta["kind"] = "model";
  meta["d_model"] = config.d_model;
  meta["n_heads"] = config.n_heads;
  meta["head_dim"] = config.head_dim;
  meta["layers"] = config.layers;
  c.meta() = std::move(meta);
  return c;
}

LoadedModel model_from_container(const TensorContainer& c) {
  LoadedModel m;
  try {
    if (c.meta().value("kind", "") != "model") fail_validation("container is not a model");
    m.config.d_model = c.meta().at("d_model").get<std::size_t>();
    m.config.n_heads = c.meta().at("n_heads").get<std::size_t>();
    m.config.head_dim = c.meta().at("head_dim").get<std::size_t>();
    m.config.layers = c.meta().at("layers").get<std::size_t>();
  } catch (const json::exception& e) {
    fail_validation(std::string("model container meta is incomplete: ") + e.what());
  }
  for (std::size_t l = 0; l < m.config.layers; ++l) {
    m.weights.layers.push_back({c.matrix(fmt::format("layer{}.wq", l)), c.matrix(fmt::format("layer{}.wk", l)),
                                c.matrix(fmt::format("layer{}.wv", l)), c.matrix(fmt::format("layer{}.wo", l))});
  }
  m.meta = c.meta();
  m.weights.validate(m.config);
  return m;
}

LoadedModel generate_model(const PipelineConfig& cfg) {
  if (!cfg.synthetic) fail_validation("gen-model needs a synthetic spec");
  LoadedModel m;
  m.config = cfg.attention_config();
  const std::uint64_t seed = cfg.synthetic->seed.value_or(cfg.stage_seed("gen-model"));
  m.weights = random_model(m.config, seed, cfg.synthetic->spectrum);
  m.meta = {{"kind", "model"}, {"seed", seed}, {"spectrum", cfg.synthetic->spectrum}};
  return m;
}

LoadedModel obtain_model(const PipelineConfig& cfg) {
  if (!cfg.model_path) return generate_model(cfg);
  LoadedModel m = model_from_container(TensorContainer::read(*cfg.model_path));
  m.config.rope = {cfg.rope, cfg.rope_base};
  m.config.validate();
  return m;
}

Matrix token_stream(std::size_t tokens, std::size_t d_model, std::uint64_t seed) {
  const CounterRng rng(seed, 0x746f6b);
  Matrix m(tokens, d_model);
  for (std::size_t r = 0; r < tokens; ++r)
    for (std::size_t c = 0; c < d_model; ++c) m(r, c) = rng.normal(r, c);
  return m;
}

std::vector<FisherScore> fisher_scores(const LoadedModel& model, const PipelineConfig& cfg) {
  const auto& ac = model.config;
  const Granularity gran = cfg.granularity_for(ac.n_heads);
  const std::size_t s = gran.group_size();
  const std::size_t width = ac.head_dim * s;
  const std::uint64_t seed = cfg.stage_seed("fisher");

  // Per batch: layer inputs from the reference model and seeded targets.
  std::vector<std::vector<Matrix>> inputs;
  std::vector<std::vector<Matrix>> targets;
  for (std::size_t b = 0; b < cfg.fisher_batches; ++b) {
    inputs.push_back(layer_inputs(model, token_stream(cfg.fisher_tokens, ac.d_model, seed + 2 * b)));
    std::vector<Matrix> t;
    for (std::size_t l = 0; l < ac.layers; ++l) {
      t.push_back(token_stream(cfg.fisher_tokens, ac.d_model, CounterRng::mix(seed + 2 * b + 1) + l));
    }
    targets.push_back(std::move(t));
  }

  std::vector<FisherScore> scores;
  for (std::size_t l = 0; l < ac.layers; ++l) {
    const auto& w = model.weights.layers[l];
    for (const char* kind : {"k", "v"}) {
      const bool is_key = kind[0] == 'k';
      const Matrix& full = is_key ? w.wk : w.wv;
      for (std::size_t g = 0; g < gran.group_count(ac.n_heads); ++g) {
        const std::size_t h0 = g * s;
        const std::size_t c0 = h0 * ac.head_dim;
        // Heads outside the group do not depend on this slice.
        std::vector<Matrix> rest;
        for (std::size_t b = 0; b < cfg.fisher_batches; ++b) {
          const Matrix& x = inputs[b][l];
          rest.push_back(subtract(
              subtract(head_outputs(x, w, ac, 0, ac.n_heads, w.wk, w.wv), head_outputs(x, w, ac, h0, h0 + s, w.wk, w.wv)),
              targets[b][l]));
        }
        const BatchLoss loss = [&](const Matrix& slice, std::size_t b) {
          const Matrix wk = is_key ? with_slice(w.wk, slice, c0) : w.wk;
          const Matrix wv = is_key ? w.wv : with_slice(w.wv, slice, c0);
          const Matrix r = add(rest[b], head_outputs(inputs[b][l], w, ac, h0, h0 + s, wk, wv));
          const double n = frobenius_norm(r);
          return 0.5 * n * n;
        };
        scores.push_back(estimate_fisher(fmt::format("layer{}.{}.g{}", l, kind, g),
                                         slice_cols(full, c0, c0 + width), loss, cfg.fisher_batches));
      }
    }
  }
  return scores;
}

RankPlan plan_for(const LoadedModel& model, const PipelineConfig& cfg,
                  const std::vector<FisherScore>* scores) {
  const auto& ac = model.config;
  const Granularity gran = cfg.granularity_for(ac.n_heads);
  const auto ids = kv_target_ids(ac.layers, gran.group_count(ac.n_heads));
  std::vector<FisherScore> used;
  if (scores != nullptr) {
    for (const auto& id : ids) {
      auto it = std::find_if(scores->begin(), scores->end(), [&](const FisherScore& f) { return f.target_id == id; });
      if (it == scores->end()) fail_validation("no Fisher score for target '" + id + "'");
      used.push_back(*it);
    }
  } else {
    for (const auto& id : ids) used.push_back({id, 1.0});
  }
  const std::vector<std::size_t> widths(ids.size(), gran.group_size() * ac.head_dim);
  return allocate(used, widths, ac.d_model, cfg.budget_rate, cfg.min_rank, RankRounding::parse(cfg.rounding));
}

std::vector<PaluLayer> decompose_model(const LoadedModel& model, const PipelineConfig& cfg,
                                       const RankPlan& plan) {
  const auto& ac = model.config;
  const Granularity gran = cfg.granularity_for(ac.n_heads);
  const std::size_t groups = gran.group_count(ac.n_heads);
  std::vector<Matrix> calib;
  if (cfg.whitened) {
    const std::size_t n = cfg.calib_samples == 0 ? 2 * ac.d_model : cfg.calib_samples;
    calib = layer_inputs(model, token_stream(n, ac.d_model, cfg.stage_seed("calibration")));
  }
  std::vector<PaluLayer> out;
  for (std::size_t l = 0; l < ac.layers; ++l) {
    auto ranks_of = [&](const char* kind) {
      std::vector<std::size_t> ranks;
      for (std::size_t g = 0; g < groups; ++g) {
        const auto id = fmt::format("layer{}.{}.g{}", l, kind, g);
        const auto r = plan.rank_of(id);
        if (!r) fail_validation("plan has no rank for '" + id + "'");
        ranks.push_back(*r);
      }
      return ranks;
    };
    const auto mode = cfg.whitened ? DecompositionMode::whitened : DecompositionMode::plain;
    std::optional<CalibrationSet> cs;
    if (cfg.whitened) cs = CalibrationSet{calib[l], fmt::format("layer{} inputs", l)};
    const auto* cp = cs ? &*cs : nullptr;
    const auto& w = model.weights.layers[l];
    out.push_back({decompose(w.wk, ac.head_dim, ac.n_heads, gran, ranks_of("k"), mode, cp),
                   decompose(w.wv, ac.head_dim, ac.n_heads, gran, ranks_of("v"), mode, cp)});
  }
  return out;
}

std::vector<PaluLayer> rotate_model(const std::vector<PaluLayer>& layers) {
  std::vector<PaluLayer> out;
  for (const auto& pl : layers) out.push_back({fuse_hadamard(pl.key).layer, fuse_hadamard(pl.value).layer});
  return out;
}

TensorContainer layers_to_container(const std::vector<PaluLayer>& layers, json meta) {
  TensorContainer c;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (const char* kind : {"k", "v"}) {
      const auto& layer = kind[0] == 'k' ? layers[l].key : layers[l].value;
      for (std::size_t g = 0; g < layer.groups.size(); ++g) {
        c.add(layer_key(l, kind, g, "a"), layer.groups[g].a);
        c.add(layer_key(l, kind, g, "b"), layer.groups[g].b);
      }
    }
  }
  json m = layers_meta(layers);
  for (auto& [k, v] : meta.items()) m[k] = v;
  c.meta() = std::move(m);
  return c;
}

std::vector<PaluLayer> layers_from_container(const TensorContainer& c) {
  std::size_t n_layers = 0, group_size = 0, d_model = 0, head_dim = 0, n_heads = 0;
  std::string gran_name;
  try {
    if (c.meta().value("kind", "") != "decomposed") fail_validation("container does not hold factor pairs");
    n_layers = c.meta().at("layers").get<std::size_t>();
    group_size = c.meta().at("group_size").get<std::size_t>();
    d_model = c.meta().at("d_model").get<std::size_t>();
    head_dim = c.meta().at("head_dim").get<std::size_t>();
    n_heads = c.meta().at("n_heads").get<std::size_t>();
    gran_name = c.meta().at("granularity").get<std::string>();
  } catch (const json::exception& e) {
    fail_validation(std::string("factor container meta is incomplete: ") + e.what());
  }
  const Granularity gran = Granularity::parse(gran_name, group_size, n_heads);
  gran.validate(n_heads);
  std::vector<PaluLayer> out;
  for (std::size_t l = 0; l < n_layers; ++l) {
    PaluLayer pl;
    for (const char* kind : {"k", "v"}) {
      DecomposedLayer layer;
      layer.granularity = gran;
      layer.d_model = d_model;
      layer.head_dim = head_dim;
      layer.n_heads = n_heads;
      for (std::size_t g = 0; g < gran.group_count(n_heads); ++g) {
        FactorPair f{c.matrix(layer_key(l, kind, g, "a")), c.matrix(layer_key(l, kind, g, "b")), 0};
        f.rank = f.a.cols();
        layer.groups.push_back(std::move(f));
      }
      layer.validate();
      (kind[0] == 'k' ? pl.key : pl.value) = std::move(layer);
    }
    out.push_back(std::move(pl));
  }
  return out;
}

TensorContainer cache_to_container(const LatentKVCache& cache, const PaluModel& model) {
  if (!cache.quantized()) fail_validation("cache is not quantized");
  TensorContainer c;
  auto add_block = [&](const std::string& name, const QuantizedLatent& q) {
    c.add(name + ".codes", PackedTensor{{q.rows, q.cols}, q.bits, q.codes});
    Matrix scales(q.rows, 1), zeros(q.rows, 1);
    for (std::size_t r = 0; r < q.rows; ++r) {
      scales(r, 0) = q.scales[r];
      zeros(r, 0) = static_cast<double>(q.zero_points[r]);
    }
    c.add(name + ".scales", std::move(scales));
    c.add(name + ".zero_points", std::move(zeros));
  };
  for (std::size_t l = 0; l < cache.qv.size(); ++l) {
    for (std::size_t g = 0; g < cache.qk[l].size(); ++g) add_block(fmt::format("layer{}.k.g{}", l, g), cache.qk[l][g]);
    for (std::size_t g = 0; g < cache.qv[l].size(); ++g) add_block(fmt::format("layer{}.v.g{}", l, g), cache.qv[l][g]);
    if (cache.qk[l].empty()) c.add(fmt::format("layer{}.k.latent", l), cache.hk[l].to_matrix());
  }
  c.meta() = {{"kind", "latents"},
              {"bits", cache.bits},
              {"tokens", cache.tokens},
              {"quantize_keys", cache.quantize_keys},
              {"layers", model.layers.size()}};
  return c;
}

std::vector<OutlierRow> outlier_rows(const LoadedModel& model, const std::vector<PaluLayer>& layers,
                                     const Matrix& stream) {
  const auto inputs = layer_inputs(model, stream);
  const auto rotated = rotate_model(layers);
  auto latent = [](const DecomposedLayer& layer, const Matrix& x) {
    std::vector<Matrix> blocks;
    for (const auto& g : layer.groups) blocks.push_back(matmul(x, g.a));
    return hconcat(blocks);
  };
  std::vector<OutlierRow> rows;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    rows.push_back({l, "k", outlier_metric(latent(layers[l].key, inputs[l])),
                    outlier_metric(latent(rotated[l].key, inputs[l]))});
    rows.push_back({l, "v", outlier_metric(latent(layers[l].value, inputs[l])),
                    outlier_metric(latent(rotated[l].value, inputs[l]))});
  }
  return rows;
}

RunResult run_decode(const LoadedModel& model, const std::vector<PaluLayer>& layers,
                     const PipelineConfig& cfg) {
  const Matrix stream = token_stream(cfg.stream_length, model.config.d_model, cfg.stage_seed("stream"));
  const auto ref = reference_decode(model.weights, model.config, stream);
  const PaluModel pm = PaluModel::build(model.weights, layers, model.config);
  LatentKVCache cache = make_latent_cache(pm, cfg.bits, cfg.quantize_keys);
  RunResult r;
  double sum = 0.0;
  for (std::size_t t = 0; t < stream.rows(); ++t) {
    const auto y = palu_decode_step(pm, cache, stream.row(t), model.config.rope.enabled ? cfg.tile_len : 0);
    for (double v : y)
      if (!std::isfinite(v)) fail_numerical(fmt::format("non-finite decode output at step {}", t));
    const double e = relative_vector_error(y, ref.outputs[t]);
    r.step_errors.push_back(e);
    r.max_error = std::max(r.max_error, e);
    sum += e;
  }
  r.mean_error = sum / static_cast<double>(stream.rows());
  return r;
}

ModelPreset preset_for(const LoadedModel& model, const PipelineConfig&) {
  ModelPreset p;
  p.name = "synthetic";
  p.layers = model.config.layers;
  p.n_heads = model.config.n_heads;
  p.head_dim = model.config.head_dim;
  p.d_model = model.config.d_model;
  p.kv_dtype_bits = 16;
  p.total_params = 4ULL * p.d_model * p.d_model * p.layers;
  p.weight_dtype_bits = 16;
  return p;
}

std::string errors_csv(const RunResult& run) {
  std::string out = "step,relative_error\n";
  for (std::size_t t = 0; t < run.step_errors.size(); ++t) out += fmt::format("{},{:.17g}\n", t, run.step_errors[t]);
  out += fmt::format("max,{:.17g}\nmean,{:.17g}\n", run.max_error, run.mean_error);
  return out;
}

std::string outliers_csv(const std::vector<OutlierRow>& rows) {
  std::string out = "layer,kind,before,after\n";
  for (const auto& r : rows) out += fmt::format("{},{},{:.17g},{:.17g}\n", r.layer, r.kind, r.before, r.after);
  return out;
}

PipelineResult run_pipeline(const PipelineConfig& cfg) {
  PipelineResult res;
  const std::filesystem::path dir = cfg.out_dir;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail_validation("cannot create output directory '" + dir.string() + "': " + ec.message());
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(dir / name, text);
    res.files.push_back(dir / name);
  };
  auto emit_container = [&](const std::string& name, const TensorContainer& c) {
    c.write(dir / name);
    res.files.push_back(dir / name);
  };

  const LoadedModel model = in_stage("gen-model", [&] {
    LoadedModel m = obtain_model(cfg);
    emit_container("model.palu", model_to_container(m.weights, m.config, m.meta));
    return m;
  });

  std::optional<std::vector<FisherScore>> scores;
  if (cfg.fisher) {
    scores = in_stage("fisher", [&] {
      auto s = fisher_scores(model, cfg);
      emit("scores.json", scores_to_json(s).dump(2) + "\n");
      return s;
    });
  }

  res.plan = in_stage("allocate", [&] {
    RankPlan p = plan_for(model, cfg, scores ? &*scores : nullptr);
    emit("plan.json", plan_to_json(p).dump(2) + "\n");
    return p;
  });

  const auto decomposed = in_stage("decompose", [&] {
    auto layers = decompose_model(model, cfg, res.plan);
    emit_container("decomposed.palu", layers_to_container(layers, {{"rotated", false}}));
    return layers;
  });

  const Matrix stream = token_stream(cfg.stream_length, model.config.d_model, cfg.stage_seed("stream"));
  const auto layers = in_stage("rotate", [&] {
    res.outliers = outlier_rows(model, decomposed, stream);
    emit("outliers.csv", outliers_csv(res.outliers));
    if (!cfg.hadamard) return decomposed;
    auto rotated = rotate_model(decomposed);
    emit_container("rotated.palu", layers_to_container(rotated, {{"rotated", true}}));
    return rotated;
  });

  if (cfg.bits != 16) {
    in_stage("quantize", [&] {
      const PaluModel pm = PaluModel::build(model.weights, layers, model.config);
      const LatentKVCache cache = palu_prefill(pm, stream, cfg.bits, cfg.quantize_keys, cfg.tile_len);
      emit_container("latents.palu", cache_to_container(cache, pm));
      return 0;
    });
  }

  res.run = in_stage("run", [&] {
    RunResult r = run_decode(model, layers, cfg);
    emit("errors.csv", errors_csv(r));
    return r;
  });

  in_stage("report", [&] {
    const ModelPreset preset = preset_for(model, cfg);
    res.cost = cost_report(preset, cfg.report_tokens, res.plan, cfg.bits, cfg.granularity_for(preset.n_heads).group_size());
    emit("cost.json", to_json(res.cost).dump(2) + "\n");
    std::string text;
    text += fmt::format("max relative error     {:.6e}\n", res.run.max_error);
    text += fmt::format("mean relative error    {:.6e}\n\n", res.run.mean_error);
    text += format_plan_report(plan_report(res.plan)) + "\n";
    text += format_cost_report(res.cost);
    if (cfg.preset) {
      const ModelPreset named = ModelPreset::by_name(*cfg.preset);
      const RankPlan plan = uniform_plan(named, cfg.group_size, cfg.budget_rate);
      text += "\n" + format_cost_report(cost_report(named, cfg.report_tokens, plan, cfg.bits, cfg.group_size));
    }
    emit("report.txt", text);
    if (cfg.quant_preset == "palu-table2") {
      const auto rows = compute_table2();
      emit("table2.txt", format_table2(rows));
      const auto bad = compare_table2(rows, expected_table2());
      if (!bad.empty()) throw Error(ErrorKind::golden_mismatch, "table2 mismatch: " + bad.front());
    }
    return 0;
  });
  return res;
}

}  // namespace palu
