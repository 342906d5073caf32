// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "palu/accounting.hpp"
#include "palu/attention.hpp"
#include "palu/container.hpp"
#include "palu/rank_allocator.hpp"

namespace palu {

struct SyntheticSpec {
  std::size_t d_model = 64;
  std::size_t n_heads = 8;
  std::size_t head_dim = 8;
  std::size_t layers = 2;
  double spectrum = 0.5;
  std::optional<std::uint64_t> seed;  // defaults to a seed derived from the config seed
};

/// Every knob of an end-to-end run. Parsed from JSON; unknown keys are
/// rejected (see docs/pipeline_config.schema.json).
struct PipelineConfig {
  std::optional<SyntheticSpec> synthetic;
  std::optional<std::string> preset;  // accounting preset, e.g. "llama2-7b"
  std::string granularity = "group_head";
  std::size_t group_size = 4;
  double budget_rate = 0.5;
  std::size_t min_rank = 1;
  std::string rounding = "none";
  bool fisher = false;
  std::size_t fisher_batches = 1;
  std::size_t fisher_tokens = 8;
  bool whitened = false;
  std::size_t calib_samples = 0;  // 0: 2 * d_model
  int bits = 16;                  // 16 disables quantization
  bool hadamard = false;
  bool quantize_keys = true;
  bool rope = false;
  double rope_base = 10000.0;
  std::size_t tile_len = 16;
  std::size_t stream_length = 32;
  std::uint64_t seed = 0;
  std::string quant_preset = "none";  // none | palu-table2 | rope-fp16-keys
  std::uint64_t report_tokens = 131072;
  std::string out_dir = "out";
  std::optional<std::string> model_path;

  static PipelineConfig from_json(const nlohmann::json& j);
  static PipelineConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  std::uint64_t stage_seed(const std::string& stage) const;
  AttentionConfig attention_config() const;
  Granularity granularity_for(std::size_t n_heads) const;
};

/// JSON Schema (draft 2020-12) describing PipelineConfig.
const nlohmann::json& pipeline_config_schema();

struct LoadedModel {
  AttentionConfig config;
  ModelWeights weights;
  nlohmann::json meta;
};

TensorContainer model_to_container(const ModelWeights& weights, const AttentionConfig& config,
                                   nlohmann::json meta);
LoadedModel model_from_container(const TensorContainer& c);

/// Generates the synthetic model described by the config.
LoadedModel generate_model(const PipelineConfig& cfg);
/// Loads cfg.model_path when set, otherwise generates.
LoadedModel obtain_model(const PipelineConfig& cfg);

/// Seeded stream of token vectors for a named purpose.
Matrix token_stream(std::size_t tokens, std::size_t d_model, std::uint64_t seed);

/// Fisher scores of every K/V group: squared finite-difference gradients of
/// 0.5 * ||MHA_l(X_l) - T||^2 on seeded calibration batches, where X_l are the
/// reference inputs of layer l and T seeded targets.
std::vector<FisherScore> fisher_scores(const LoadedModel& model, const PipelineConfig& cfg);

RankPlan plan_for(const LoadedModel& model, const PipelineConfig& cfg,
                  const std::vector<FisherScore>* scores);

std::vector<PaluLayer> decompose_model(const LoadedModel& model, const PipelineConfig& cfg,
                                       const RankPlan& plan);
std::vector<PaluLayer> rotate_model(const std::vector<PaluLayer>& layers);

TensorContainer layers_to_container(const std::vector<PaluLayer>& layers, nlohmann::json meta);
std::vector<PaluLayer> layers_from_container(const TensorContainer& c);

/// Packed codes + per-token scales/zero-points of every quantized group.
TensorContainer cache_to_container(const LatentKVCache& cache, const PaluModel& model);

struct OutlierRow {
  std::size_t layer = 0;
  std::string kind;  // "k" or "v"
  double before = 0.0;
  double after = 0.0;
};

/// outlier_metric of each layer's latents on the run stream, without and with
/// the Hadamard rotation.
std::vector<OutlierRow> outlier_rows(const LoadedModel& model, const std::vector<PaluLayer>& layers,
                                     const Matrix& stream);

struct RunResult {
  std::vector<double> step_errors;  // relative output error per decode step
  double max_error = 0.0;
  double mean_error = 0.0;
};

/// Decodes the seeded stream through the reference and latent paths.
RunResult run_decode(const LoadedModel& model, const std::vector<PaluLayer>& layers,
                     const PipelineConfig& cfg);

struct PipelineResult {
  RankPlan plan;
  RunResult run;
  std::vector<OutlierRow> outliers;
  CostReport cost;
  std::vector<std::filesystem::path> files;
};

/// generate/load -> fisher -> allocate -> decompose -> rotate -> quantize ->
/// run -> report, writing every stage's output under cfg.out_dir. Errors carry
/// the stage name.
PipelineResult run_pipeline(const PipelineConfig& cfg);

/// Preset used for cost tables of a synthetic model.
ModelPreset preset_for(const LoadedModel& model, const PipelineConfig& cfg);

std::string errors_csv(const RunResult& run);
std::string outliers_csv(const std::vector<OutlierRow>& rows);

}  // namespace palu
