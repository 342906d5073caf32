// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "palu/error.hpp"
#include "palu/linalg.hpp"
#include "palu/pipeline.hpp"

using namespace palu;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("palu_pipeline_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

PipelineConfig small(const std::string& name) {
  PipelineConfig cfg = PipelineConfig::from_json(json{
      {"synthetic", {{"d_model", 32}, {"n_heads", 4}, {"head_dim", 8}, {"layers", 2}}},
      {"group_size", 2},
      {"stream_length", 12},
      {"seed", 5},
  });
  cfg.out_dir = scratch(name).string();
  return cfg;
}

void expect_error(const json& j, ErrorKind kind, const std::string& fragment) {
  try {
    PipelineConfig::from_json(j);
    ADD_FAILURE() << "accepted " << j.dump();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind);
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

}  // namespace

TEST(Config, DefaultsAndRoundTrip) {
  const auto cfg = PipelineConfig::from_json(json::object());
  EXPECT_EQ(cfg.group_size, 4u);
  EXPECT_DOUBLE_EQ(cfg.budget_rate, 0.5);
  EXPECT_EQ(cfg.bits, 16);
  const auto again = PipelineConfig::from_json(cfg.to_json());
  EXPECT_EQ(again.to_json(), cfg.to_json());
}

TEST(Config, RejectsBadInput) {
  expect_error(json{{"budget", 0.5}}, ErrorKind::validation, "budget");
  expect_error(json{{"synthetic", {{"layers", 0}}}}, ErrorKind::validation, "synthetic.layers must be at least 1");
  expect_error(json{{"synthetic", {{"depth", 3}}}}, ErrorKind::validation, "depth");
  expect_error(json{{"budget_rate", 1.5}}, ErrorKind::validation, "budget_rate");
  expect_error(json{{"budget_rate", 0.0}}, ErrorKind::validation, "budget_rate");
  expect_error(json{{"bits", 5}}, ErrorKind::validation, "width 5");
  expect_error(json{{"group_size", -1}}, ErrorKind::validation, "group_size");
  expect_error(json{{"quant_preset", "int1"}}, ErrorKind::validation, "quant_preset");
}

TEST(Config, RopeFp16KeysPreset) {
  const auto cfg = PipelineConfig::from_json(json{{"quant_preset", "rope-fp16-keys"}, {"bits", 3}});
  EXPECT_FALSE(cfg.quantize_keys);
}

TEST(Config, SchemaDocumentIsCurrent) {
  const fs::path doc = fs::path(PALU_SOURCE_DIR) / "docs" / "pipeline_config.schema.json";
  ASSERT_TRUE(fs::exists(doc));
  EXPECT_EQ(json::parse(slurp(doc)), pipeline_config_schema());
  // every config key is described
  const auto& props = pipeline_config_schema().at("properties");
  const json defaults = PipelineConfig{}.to_json();
  for (const auto& [key, _] : defaults.items()) EXPECT_TRUE(props.contains(key)) << key;
}

TEST(GenModel, DeterministicBytes) {
  const auto cfg = small("gen");
  const auto a = generate_model(cfg), b = generate_model(cfg);
  EXPECT_EQ(model_to_container(a.weights, a.config, a.meta).serialize(),
            model_to_container(b.weights, b.config, b.meta).serialize());
  auto other = cfg;
  other.seed = 6;
  const auto c = generate_model(other);
  EXPECT_NE(model_to_container(a.weights, a.config, a.meta).serialize(),
            model_to_container(c.weights, c.config, c.meta).serialize());
}

TEST(GenModel, HeadSpectraDecay) {
  const auto m = generate_model(small("spectrum"));
  for (const auto& layer : m.weights.layers) {
    const Matrix head = slice_cols(layer.wk, 0, 8);
    const auto s = svd(head).singular_values;
    for (std::size_t i = 1; i < s.size(); ++i) EXPECT_NEAR(s[i] / s[i - 1], 0.5, 1e-9);
  }
}

TEST(GenModel, ContainerRoundTrip) {
  const auto m = generate_model(small("model_rt"));
  const auto back = model_from_container(
      TensorContainer::deserialize(model_to_container(m.weights, m.config, m.meta).serialize()));
  EXPECT_EQ(back.config.d_model, m.config.d_model);
  ASSERT_EQ(back.weights.layers.size(), m.weights.layers.size());
  EXPECT_EQ(back.weights.layers[1].wv, m.weights.layers[1].wv);
}

TEST(Pipeline, FullRankIsExact) {
  auto cfg = small("full");
  cfg.budget_rate = 1.0;
  const auto r = run_pipeline(cfg);
  EXPECT_LT(r.run.max_error, 1e-8);
  cfg.rope = true;
  cfg.tile_len = 5;
  EXPECT_LT(run_pipeline(cfg).run.max_error, 1e-8);
}

TEST(Pipeline, SmallerBudgetLargerError) {
  auto cfg = small("budget");
  cfg.budget_rate = 0.5;
  const double e50 = run_pipeline(cfg).run.mean_error;
  cfg.budget_rate = 0.7;
  const double e30 = run_pipeline(cfg).run.mean_error;
  EXPECT_GT(e50, e30);
  EXPECT_GT(e30, 0.0);
}

TEST(Pipeline, WritesEveryStage) {
  auto cfg = small("stages");
  cfg.fisher = true;
  cfg.hadamard = true;
  cfg.bits = 3;
  cfg.preset = "llama2-7b";
  const auto r = run_pipeline(cfg);
  for (const char* f : {"model.palu", "scores.json", "plan.json", "decomposed.palu", "rotated.palu", "latents.palu",
                        "outliers.csv", "errors.csv", "cost.json", "report.txt"}) {
    EXPECT_TRUE(fs::exists(fs::path(cfg.out_dir) / f)) << f;
  }
  EXPECT_EQ(r.outliers.size(), 4u);
  const auto latents = TensorContainer::read(fs::path(cfg.out_dir) / "latents.palu");
  EXPECT_EQ(latents.packed("layer0.k.g0.codes").bits, 3);
  EXPECT_TRUE(std::isfinite(r.run.max_error));
}

TEST(Pipeline, ReportsAreDeterministic) {
  auto cfg = small("det_a");
  cfg.fisher = true;
  cfg.bits = 4;
  run_pipeline(cfg);
  auto again = cfg;
  again.out_dir = scratch("det_b").string();
  run_pipeline(again);
  for (const char* f : {"report.txt", "errors.csv", "plan.json", "cost.json", "latents.palu", "model.palu"}) {
    EXPECT_EQ(slurp(fs::path(cfg.out_dir) / f), slurp(fs::path(again.out_dir) / f)) << f;
  }
}

TEST(Pipeline, StageOutputsReload) {
  auto cfg = small("reload");
  const auto r = run_pipeline(cfg);
  const auto model = model_from_container(TensorContainer::read(fs::path(cfg.out_dir) / "model.palu"));
  const auto layers = layers_from_container(TensorContainer::read(fs::path(cfg.out_dir) / "decomposed.palu"));
  const auto run = run_decode(model, layers, cfg);
  EXPECT_EQ(run.step_errors, r.run.step_errors);
  const auto plan = plan_from_json(json::parse(slurp(fs::path(cfg.out_dir) / "plan.json")));
  EXPECT_EQ(plan.total_rank(), r.plan.total_rank());
}

TEST(Pipeline, Table2PresetMatchesGolden) {
  auto cfg = small("table2");
  cfg.quant_preset = "palu-table2";
  run_pipeline(cfg);
  const auto text = slurp(fs::path(cfg.out_dir) / "table2.txt");
  EXPECT_EQ(text, format_table2(compute_table2()));
}

TEST(Pipeline, ErrorsNameTheStage) {
  auto cfg = small("bad_model");
  cfg.model_path = (fs::path(cfg.out_dir) / "missing.palu").string();
  try {
    run_pipeline(cfg);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::validation);
    EXPECT_NE(std::string(e.what()).find("stage 'gen-model'"), std::string::npos) << e.what();
  }
}

TEST(Pipeline, CsvFormats) {
  RunResult run{{0.5, 0.25}, 0.5, 0.375};
  const auto csv = errors_csv(run);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,relative_error");
  std::vector<OutlierRow> rows = {{0, "k", 3.0, 1.5}};
  EXPECT_NE(outliers_csv(rows).find("0,k,"), std::string::npos);
}
