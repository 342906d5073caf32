// SPDX-License-Identifier: Apache-2.0
#include "palu/accounting.hpp"

#include <cmath>

#include <fmt/format.h>

#include "palu/error.hpp"

namespace palu {

ModelPreset ModelPreset::llama2_7b() {
  ModelPreset p;
  p.name = "llama2-7b";
  p.layers = 32;
  p.n_heads = 32;
  p.head_dim = 128;
  p.d_model = 4096;
  p.kv_dtype_bits = 16;
  p.total_params = 6738415616ULL;
  p.weight_dtype_bits = 16;
  return p;
}

ModelPreset ModelPreset::by_name(const std::string& name) {
  if (name == "llama2-7b") return llama2_7b();
  fail_validation("unknown model preset '" + name + "'");
}

void ModelPreset::validate() const {
  if (layers == 0 || n_heads == 0 || head_dim == 0 || d_model == 0 || kv_dtype_bits <= 0) {
    fail_validation("model preset fields must be positive");
  }
  if (d_model != n_heads * head_dim) fail_validation("preset d_model != n_heads * head_dim");
}

std::vector<std::string> kv_target_ids(std::size_t layers, std::size_t n_groups) {
  std::vector<std::string> ids;
  for (std::size_t l = 0; l < layers; ++l)
    for (const char* kind : {"k", "v"})
      for (std::size_t g = 0; g < n_groups; ++g) ids.push_back(fmt::format("layer{}.{}.g{}", l, kind, g));
  return ids;
}

RankPlan uniform_plan(const ModelPreset& preset, std::size_t group_size, double budget_rate) {
  preset.validate();
  const Granularity gran = Granularity::from_group_size(group_size, preset.n_heads);
  gran.validate(preset.n_heads);
  const auto ids = kv_target_ids(preset.layers, gran.group_count(preset.n_heads));
  std::vector<FisherScore> scores;
  for (const auto& id : ids) scores.push_back({id, 1.0});
  const std::vector<std::size_t> widths(ids.size(), preset.head_dim * group_size);
  return allocate(scores, widths, preset.d_model, budget_rate);
}

KvBytes kv_cache_bytes(const ModelPreset& preset, std::uint64_t tokens, const RankPlan* plan, int bits) {
  preset.validate();
  if (bits <= 0 || bits > 16) fail_validation("cache bits must lie in 1..16");
  KvBytes out;
  const std::uint64_t full_width = 2ULL * preset.layers * preset.n_heads * preset.head_dim;
  out.baseline = full_width * tokens * static_cast<std::uint64_t>(preset.kv_dtype_bits) / 8;
  const std::uint64_t width = plan ? plan->total_rank() : full_width;
  out.compressed = (width * tokens * static_cast<std::uint64_t>(bits) + 7) / 8;
  if (bits < 16) {
    const std::uint64_t groups = plan ? plan->entries.size() : 2ULL * preset.layers * preset.n_heads;
    out.metadata = groups * tokens * 8;
  }
  if (out.baseline > 0) {
    const auto base = static_cast<double>(out.baseline);
    out.compression_rate = 1.0 - static_cast<double>(out.compressed) / base;
    out.compression_rate_with_metadata =
        1.0 - static_cast<double>(out.compressed + out.metadata) / base;
  }
  return out;
}

double weight_ratio(double m, double n, double r) { return (m * r + r * n) / (m * n); }

ReconMacs recon_macs(const Granularity& granularity, std::span<const std::size_t> ranks,
                     std::size_t head_dim, std::size_t n_heads) {
  granularity.validate(n_heads);
  const std::size_t s = granularity.group_size();
  if (ranks.size() != granularity.group_count(n_heads)) {
    fail_validation("recon_macs expects one rank per group");
  }
  ReconMacs out;
  for (std::size_t g = 0; g < ranks.size(); ++g) {
    const std::uint64_t head = static_cast<std::uint64_t>(ranks[g]) * head_dim;
    for (std::size_t i = 0; i < s; ++i) out.per_head.push_back(head);
    out.per_group.push_back(head * s);
    out.total += head * s;
  }
  return out;
}

namespace {

std::uint64_t bytes_of(std::uint64_t elements, int bits) {
  return (elements * static_cast<std::uint64_t>(bits) + 7) / 8;
}

// Factor-pair and fused-matrix element counts summed over the plan.
struct PlanElements {
  std::uint64_t factors = 0;
  std::uint64_t fused = 0;
};

PlanElements plan_elements(const ModelPreset& preset, const RankPlan& plan, std::size_t group_size) {
  PlanElements e;
  for (const auto& entry : plan.entries) {
    const std::uint64_t r = entry.allocated_rank;
    e.factors += preset.d_model * r + r * entry.full_width;
    e.fused += group_size * preset.d_model * r;
  }
  return e;
}

}  // namespace

MemoryBreakdown total_memory_breakdown(const ModelPreset& preset, std::uint64_t tokens,
                                       const RankPlan& plan, int bits, std::size_t group_size) {
  preset.validate();
  MemoryBreakdown m;
  m.tokens = tokens;
  const std::uint64_t kv_proj = 2ULL * preset.layers * preset.d_model * preset.d_model;
  const auto el = plan_elements(preset, plan, group_size);
  m.weight_bytes_baseline = bytes_of(preset.total_params, preset.weight_dtype_bits);
  m.weight_bytes_compressed = bytes_of(preset.total_params - kv_proj + el.factors, preset.weight_dtype_bits);
  m.fused_weight_bytes = bytes_of(el.fused, preset.weight_dtype_bits);
  const KvBytes kv = kv_cache_bytes(preset, tokens, &plan, bits);
  m.kv_bytes_baseline = kv.baseline;
  m.kv_bytes_compressed = kv.compressed;
  m.kv_reduction = kv.compressed > 0 ? static_cast<double>(kv.baseline) / static_cast<double>(kv.compressed) : 1.0;
  m.weight_ratio = static_cast<double>(m.weight_bytes_compressed) / static_cast<double>(m.weight_bytes_baseline);
  m.total_reduction = static_cast<double>(m.weight_bytes_baseline + m.kv_bytes_baseline) /
                      static_cast<double>(m.weight_bytes_compressed + m.kv_bytes_compressed);
  return m;
}

CostReport cost_report(const ModelPreset& preset, std::uint64_t tokens, const RankPlan& plan,
                       int bits, std::size_t group_size) {
  CostReport r;
  r.preset = preset.name;
  r.tokens = tokens;
  r.bits = bits;
  r.kv = kv_cache_bytes(preset, tokens, &plan, bits);
  for (const auto& e : plan.entries) {
    r.weight_ratio_per_target.push_back(weight_ratio(static_cast<double>(preset.d_model),
                                                     static_cast<double>(e.full_width),
                                                     static_cast<double>(e.allocated_rank)));
    if (e.target_id.find(".k.") != std::string::npos) {
      r.recon_macs_per_step += static_cast<std::uint64_t>(e.allocated_rank) * e.full_width;
    }
  }
  r.fused_weight_bytes = bytes_of(plan_elements(preset, plan, group_size).fused, preset.weight_dtype_bits);
  return r;
}

nlohmann::json to_json(const CostReport& r) {
  return {
      {"preset", r.preset},
      {"tokens", r.tokens},
      {"bits", r.bits},
      {"kv_bytes_baseline", r.kv.baseline},
      {"kv_bytes_compressed", r.kv.compressed},
      {"metadata_bytes", r.kv.metadata},
      {"kv_bytes_total_without_metadata", r.kv.compressed_total(false)},
      {"kv_bytes_total_with_metadata", r.kv.compressed_total(true)},
      {"compression_rate", r.kv.compression_rate},
      {"compression_rate_with_metadata", r.kv.compression_rate_with_metadata},
      {"weight_ratio_per_target", r.weight_ratio_per_target},
      {"recon_macs_per_step", r.recon_macs_per_step},
      {"fused_weight_bytes", r.fused_weight_bytes},
  };
}

std::string format_fixed(double value, int decimals) {
  const double scale = std::pow(10.0, decimals);
  // Nudge by a relative epsilon so printed table values like 90.625 go up.
  const double rounded = std::floor(value * scale + 0.5 + 1e-9) / scale;
  return fmt::format("{:.{}f}", rounded, decimals);
}

std::string format_cost_report(const CostReport& r) {
  std::string out;
  out += fmt::format("preset                 {}\n", r.preset);
  out += fmt::format("tokens                 {}\n", r.tokens);
  out += fmt::format("bits                   {}\n", r.bits);
  out += fmt::format("kv baseline (GB)       {}\n", format_fixed(r.kv.baseline / kBytesPerGB, 3));
  out += fmt::format("kv compressed (GB)     {}\n", format_fixed(r.kv.compressed / kBytesPerGB, 3));
  out += fmt::format("metadata (GB)          {}\n", format_fixed(r.kv.metadata / kBytesPerGB, 3));
  out += fmt::format("compression rate       {}%\n", format_fixed(100.0 * r.kv.compression_rate, 2));
  out += fmt::format("  with metadata        {}%\n",
                     format_fixed(100.0 * r.kv.compression_rate_with_metadata, 2));
  out += fmt::format("recon MACs per step    {}\n", r.recon_macs_per_step);
  out += fmt::format("fused weight bytes     {}\n", r.fused_weight_bytes);
  return out;
}

std::vector<Table2Row> compute_table2() {
  const ModelPreset preset = ModelPreset::llama2_7b();
  constexpr std::uint64_t kTokens = 131072;
  constexpr std::size_t kGroupSize = 4;
  const RankPlan keep70 = uniform_plan(preset, kGroupSize, 0.7);
  const RankPlan keep50 = uniform_plan(preset, kGroupSize, 0.5);
  std::vector<Table2Row> rows;
  const KvBytes base = kv_cache_bytes(preset, kTokens, nullptr, 16);
  rows.push_back({"Baseline", 16, base.baseline / kBytesPerGB, std::nullopt});
  for (int bits : {16, 3, 2}) {
    for (const auto* plan : {&keep70, &keep50}) {
      const KvBytes kv = kv_cache_bytes(preset, kTokens, plan, bits);
      const std::string name = plan == &keep70 ? "Palu-30%" : "Palu-50%";
      rows.push_back({name, bits, kv.compressed / kBytesPerGB, 100.0 * kv.compression_rate});
    }
  }
  return rows;
}

std::vector<Table2Row> expected_table2() {
  return {
      {"Baseline", 16, 64.0, std::nullopt},
      {"Palu-30%", 16, 44.8, 30.0},
      {"Palu-50%", 16, 32.0, 50.0},
      {"Palu-30%", 3, 8.4, 86.87},
      {"Palu-50%", 3, 6.0, 90.63},
      {"Palu-30%", 2, 5.6, 91.25},
      {"Palu-50%", 2, 4.0, 93.75},
  };
}

std::string format_table2(std::span<const Table2Row> rows) {
  std::string out = fmt::format("{:<10} {:>4} {:>18} {:>11}\n", "Method", "Bit", "KV-Cache Size (GB)",
                                "Comp. Rate");
  for (const auto& r : rows) {
    const std::string rate = r.rate_percent ? format_fixed(*r.rate_percent, 2) + "%" : "-";
    out += fmt::format("{:<10} {:>4} {:>18} {:>11}\n", r.method, r.bits, format_fixed(r.size_gb, 1), rate);
  }
  return out;
}

std::vector<std::string> compare_table2(std::span<const Table2Row> computed,
                                        std::span<const Table2Row> expected) {
  std::vector<std::string> mismatches;
  if (computed.size() != expected.size()) {
    mismatches.push_back(fmt::format("row count {} != {}", computed.size(), expected.size()));
    return mismatches;
  }
  constexpr double kSlack = 1e-9;
  for (std::size_t i = 0; i < computed.size(); ++i) {
    const auto& c = computed[i];
    const auto& e = expected[i];
    bool ok = c.method == e.method && c.bits == e.bits && std::abs(c.size_gb - e.size_gb) <= 0.05 + kSlack;
    if (c.rate_percent.has_value() != e.rate_percent.has_value()) ok = false;
    if (ok && c.rate_percent) ok = std::abs(*c.rate_percent - *e.rate_percent) <= 0.005 + kSlack;
    if (!ok) {
      mismatches.push_back(fmt::format("{} {}-bit: got {:.4f} GB / {} expected {:.1f} GB / {}", c.method,
                                       c.bits, c.size_gb,
                                       c.rate_percent ? fmt::format("{:.4f}%", *c.rate_percent) : "-",
                                       e.size_gb,
                                       e.rate_percent ? fmt::format("{:.2f}%", *e.rate_percent) : "-"));
    }
  }
  return mismatches;
}

std::string format_memory_breakdown(std::span<const MemoryBreakdown> rows) {
  std::string out = fmt::format("{:>8} {:>12} {:>12} {:>12} {:>12} {:>10} {:>10}\n", "tokens",
                                "weights(GB)", "kv(GB)", "total(GB)", "base(GB)", "kv-red", "total-red");
  for (const auto& m : rows) {
    const double total = (m.weight_bytes_compressed + m.kv_bytes_compressed) / kBytesPerGB;
    const double base = (m.weight_bytes_baseline + m.kv_bytes_baseline) / kBytesPerGB;
    out += fmt::format("{:>8} {:>12} {:>12} {:>12} {:>12} {:>9}x {:>9}x\n", m.tokens,
                       format_fixed(m.weight_bytes_compressed / kBytesPerGB, 2),
                       format_fixed(m.kv_bytes_compressed / kBytesPerGB, 2), format_fixed(total, 2),
                       format_fixed(base, 2), format_fixed(m.kv_reduction, 2),
                       format_fixed(m.total_reduction, 2));
  }
  return out;
}

std::string format_recon_macs_table(std::size_t n_heads, std::size_t head_dim) {
  const std::size_t per_head_rank = std::max<std::size_t>(1, head_dim / 2);
  const ReconMacs multi = recon_macs(Granularity::multi_head(), std::vector<std::size_t>(n_heads, per_head_rank),
                                     head_dim, n_heads);
  std::string out = fmt::format("{:<12} {:>6} {:>10} {:>14} {:>12} {:>10}\n", "granularity", "group",
                                "rank/group", "MACs/head", "MACs total", "vs multi");
  for (std::size_t s = 1; s <= n_heads; s *= 2) {
    if (n_heads % s != 0) continue;
    const Granularity g = Granularity::from_group_size(s, n_heads);
    const std::vector<std::size_t> ranks(n_heads / s, per_head_rank * s);
    const ReconMacs m = recon_macs(g, ranks, head_dim, n_heads);
    out += fmt::format("{:<12} {:>6} {:>10} {:>14} {:>12} {:>9}x\n", g.name(), s, per_head_rank * s,
                       m.per_head.front(), m.total, m.per_head.front() / multi.per_head.front());
  }
  return out;
}

}  // namespace palu
