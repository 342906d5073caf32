// SPDX-License-Identifier: Apache-2.0
// palu: command-line driver for the KV-cache compression pipeline.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "palu/accounting.hpp"
#include "palu/error.hpp"
#include "palu/pipeline.hpp"

namespace fs = std::filesystem;
using namespace palu;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string golden;
  std::string input;
};

PipelineConfig load_config(const Globals& g) {
  PipelineConfig cfg = g.config.empty() ? PipelineConfig::from_json(nlohmann::json::object())
                                        : PipelineConfig::load(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out.empty()) cfg.out_dir = g.out;
  return cfg;
}

fs::path out_dir(const PipelineConfig& cfg) {
  const fs::path dir = cfg.out_dir;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail_validation("cannot create output directory '" + dir.string() + "': " + ec.message());
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_validation("cannot open '" + path.string() + "' for writing");
  out << text;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail_validation("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail_validation("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

// Stage verbs reuse earlier outputs in the out dir when present.
LoadedModel stage_model(PipelineConfig cfg) {
  const fs::path saved = fs::path(cfg.out_dir) / "model.palu";
  if (!cfg.model_path && fs::exists(saved)) cfg.model_path = saved.string();
  return obtain_model(cfg);
}

std::vector<PaluLayer> stage_layers(const PipelineConfig& cfg, const Globals& g) {
  fs::path path = g.input;
  if (path.empty()) {
    const fs::path dir = cfg.out_dir;
    path = cfg.hadamard && fs::exists(dir / "rotated.palu") ? dir / "rotated.palu" : dir / "decomposed.palu";
  }
  return layers_from_container(TensorContainer::read(path));
}

int cmd_gen_model(const Globals& g) {
  const PipelineConfig cfg = load_config(g);
  const LoadedModel m = generate_model(cfg);
  const fs::path path = out_dir(cfg) / "model.palu";
  model_to_container(m.weights, m.config, m.meta).write(path);
  fmt::print("seed {}\n", m.meta.at("seed").get<std::uint64_t>());
  for (std::size_t l = 0; l < m.config.layers; ++l) {
    fmt::print("layer{} wq/wk/wv/wo {}\n", l, m.weights.layers[l].wq.shape_string());
  }
  fmt::print("wrote {}\n", path.string());
  return 0;
}

int cmd_fisher(const Globals& g) {
  const PipelineConfig cfg = load_config(g);
  const auto scores = fisher_scores(stage_model(cfg), cfg);
  const fs::path path = out_dir(cfg) / "scores.json";
  write_text(path, scores_to_json(scores).dump(2) + "\n");
  for (const auto& s : scores) fmt::print("{} {:.6e}\n", s.target_id, s.score);
  return 0;
}

int cmd_allocate(const Globals& g) {
  const PipelineConfig cfg = load_config(g);
  const LoadedModel model = stage_model(cfg);
  std::optional<std::vector<FisherScore>> scores;
  fs::path scores_path = g.input.empty() ? fs::path(cfg.out_dir) / "scores.json" : fs::path(g.input);
  if (!g.input.empty() || (cfg.fisher && fs::exists(scores_path))) {
    scores = scores_from_json(read_json(scores_path));
  }
  const RankPlan plan = plan_for(model, cfg, scores ? &*scores : nullptr);
  write_text(out_dir(cfg) / "plan.json", plan_to_json(plan).dump(2) + "\n");
  std::cout << format_plan_report(plan_report(plan));
  return 0;
}

int cmd_decompose(const Globals& g) {
  const PipelineConfig cfg = load_config(g);
  const LoadedModel model = stage_model(cfg);
  const fs::path plan_path = g.input.empty() ? fs::path(cfg.out_dir) / "plan.json" : fs::path(g.input);
  const RankPlan plan = fs::exists(plan_path) ? plan_from_json(read_json(plan_path)) : plan_for(model, cfg, nullptr);
  const auto layers = decompose_model(model, cfg, plan);
  const fs::path path = out_dir(cfg) / "decomposed.palu";
  layers_to_container(layers, {{"rotated", false}}).write(path);
  fmt::print("wrote {} ({} layers, total rank {})\n", path.string(), layers.size(), plan.total_rank());
  return 0;
}

int cmd_rotate(const Globals& g) {
  PipelineConfig cfg = load_config(g);
  cfg.hadamard = false;  // always read the unrotated factors
  const auto layers = stage_layers(cfg, g);
  const fs::path path = out_dir(cfg) / "rotated.palu";
  layers_to_container(rotate_model(layers), {{"rotated", true}}).write(path);
  fmt::print("wrote {}\n", path.string());
  return 0;
}

int cmd_quantize(const Globals& g) {
  const PipelineConfig cfg = load_config(g);
  if (cfg.bits == 16) fail_validation("quantize needs bits in {2, 3, 4, 8}");
  const LoadedModel model = stage_model(cfg);
  const PaluModel pm = PaluModel::build(model.weights, stage_layers(cfg, g), model.config);
  const Matrix stream = token_stream(cfg.stream_length, model.config.d_model, cfg.stage_seed("stream"));
  const LatentKVCache cache = palu_prefill(pm, stream, cfg.bits, cfg.quantize_keys, cfg.tile_len);
  const fs::path path = out_dir(cfg) / "latents.palu";
  cache_to_container(cache, pm).write(path);
  fmt::print("wrote {} ({} tokens at {} bits)\n", path.string(), cache.tokens, cache.bits);
  return 0;
}

int cmd_run(const Globals& g) {
  const PipelineConfig cfg = load_config(g);
  const LoadedModel model = stage_model(cfg);
  const RunResult r = run_decode(model, stage_layers(cfg, g), cfg);
  write_text(out_dir(cfg) / "errors.csv", errors_csv(r));
  fmt::print("max relative error  {:.6e}\nmean relative error {:.6e}\n", r.max_error, r.mean_error);
  return 0;
}

int cmd_pipeline(const Globals& g) {
  const PipelineConfig cfg = load_config(g);
  const PipelineResult r = run_pipeline(cfg);
  fmt::print("max relative error  {:.6e}\nmean relative error {:.6e}\n", r.run.max_error, r.run.mean_error);
  for (const auto& f : r.files) fmt::print("wrote {}\n", f.string());
  return 0;
}

struct ReportOptions {
  std::vector<double> weight_ratio;
  std::vector<double> weight_ratio_rate;
  bool recon_macs = false;
  bool memory = false;
  std::string preset;
  std::vector<std::uint64_t> tokens;
  double keep = -1.0;
  int bits = 16;
  std::size_t group_size = 0;
  std::size_t heads = 4;
  std::size_t head_dim = 128;
};

int cmd_report(const Globals& g, const ReportOptions& o) {
  if (g.golden == "table2") {
    const auto rows = compute_table2();
    std::cout << format_table2(rows);
    const auto bad = compare_table2(rows, expected_table2());
    for (const auto& line : bad) std::cerr << "mismatch: " << line << "\n";
    if (!bad.empty()) throw Error(ErrorKind::golden_mismatch, "table2 does not match the golden values");
    std::cout << "table2: all rows match\n";
    return 0;
  }
  if (!g.golden.empty()) fail_validation("unknown golden set '" + g.golden + "' (known: table2)");

  if (!o.weight_ratio.empty()) {
    fmt::print("{:.10g}\n", weight_ratio(o.weight_ratio[0], o.weight_ratio[1], o.weight_ratio[2]));
    return 0;
  }
  if (!o.weight_ratio_rate.empty()) {
    const double r = o.weight_ratio_rate[2] * o.weight_ratio_rate[1];
    fmt::print("{:.10g}\n", weight_ratio(o.weight_ratio_rate[0], o.weight_ratio_rate[1], r));
    return 0;
  }
  if (o.recon_macs) {
    std::cout << format_recon_macs_table(o.heads, o.head_dim);
    return 0;
  }

  const PipelineConfig cfg = load_config(g);
  const std::string name = !o.preset.empty() ? o.preset : cfg.preset.value_or("llama2-7b");
  const ModelPreset preset = ModelPreset::by_name(name);
  const std::size_t gs = o.group_size != 0 ? o.group_size : cfg.group_size;
  const double keep = o.keep > 0.0 ? o.keep : cfg.budget_rate;
  const int bits = g.config.empty() || o.bits != 16 ? o.bits : cfg.bits;
  const RankPlan plan = uniform_plan(preset, gs, keep);
  const std::vector<std::uint64_t> tokens = o.tokens.empty() ? std::vector<std::uint64_t>{cfg.report_tokens} : o.tokens;
  if (o.memory) {
    std::vector<MemoryBreakdown> rows;
    for (auto t : tokens) rows.push_back(total_memory_breakdown(preset, t, plan, bits, gs));
    std::cout << format_memory_breakdown(rows);
    return 0;
  }
  for (auto t : tokens) std::cout << format_cost_report(cost_report(preset, t, plan, bits, gs));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"palu: low-rank KV-cache compression toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "pipeline config (JSON)");
  app.add_option("--seed", g.seed, "override the config seed");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--golden", g.golden, "compare against an embedded reference (table2)");

  auto* gen = app.add_subcommand("gen-model", "write a synthetic model container");
  auto* fisher = app.add_subcommand("fisher", "estimate Fisher scores per K/V group");
  auto* allocate_cmd = app.add_subcommand("allocate", "allocate ranks under the budget");
  auto* decompose_cmd = app.add_subcommand("decompose", "factor K/V projections");
  auto* rotate = app.add_subcommand("rotate", "fold Hadamard rotations into the factors");
  auto* quantize_cmd = app.add_subcommand("quantize", "quantize the latent cache of a seeded stream");
  auto* run = app.add_subcommand("run", "decode a seeded stream through both paths");
  auto* pipeline = app.add_subcommand("pipeline", "run every stage end to end");
  auto* report = app.add_subcommand("report", "print accounting tables");
  for (auto* sub : {gen, fisher, allocate_cmd, decompose_cmd, rotate, quantize_cmd, run, pipeline, report}) {
    sub->fallthrough();
  }
  for (auto* sub : {allocate_cmd, decompose_cmd, rotate, quantize_cmd, run}) {
    sub->add_option("--input", g.input, "input file (defaults to the previous stage's output)");
  }

  ReportOptions ro;
  report->add_option("--weight-ratio", ro.weight_ratio, "M N R: factor storage ratio at rank R")->expected(3);
  report->add_option("--weight-ratio-rate", ro.weight_ratio_rate, "M N KEEP: ratio at rank KEEP*N")->expected(3);
  report->add_flag("--recon-macs", ro.recon_macs, "reconstruction MACs per granularity");
  report->add_option("--heads", ro.heads, "head count for --recon-macs");
  report->add_option("--head-dim", ro.head_dim, "head dim for --recon-macs");
  report->add_flag("--memory", ro.memory, "weights + KV memory breakdown");
  report->add_option("--preset", ro.preset, "model preset (llama2-7b)");
  report->add_option("--tokens", ro.tokens, "context lengths");
  report->add_option("--keep", ro.keep, "fraction of latent width kept");
  report->add_option("--bits", ro.bits, "latent bit width (16 = none)");
  report->add_option("--group-size", ro.group_size, "heads per group");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen_model(g);
    if (*fisher) return cmd_fisher(g);
    if (*allocate_cmd) return cmd_allocate(g);
    if (*decompose_cmd) return cmd_decompose(g);
    if (*rotate) return cmd_rotate(g);
    if (*quantize_cmd) return cmd_quantize(g);
    if (*run) return cmd_run(g);
    if (*pipeline) return cmd_pipeline(g);
    if (*report) return cmd_report(g, ro);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
