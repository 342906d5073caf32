// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "palu/decomposition.hpp"
#include "palu/rank_allocator.hpp"

namespace palu {

/// Byte counts are reported in binary gigabytes (2^30 bytes) with 128K =
/// 131072 tokens, which is what makes the 16-bit Llama-2-7B cache exactly 64.0.
inline constexpr double kBytesPerGB = 1073741824.0;

struct ModelPreset {
  std::string name;
  std::size_t layers = 0;
  std::size_t n_heads = 0;
  std::size_t head_dim = 0;
  std::size_t d_model = 0;
  int kv_dtype_bits = 16;
  std::uint64_t total_params = 0;  // all weights, for total-memory tables
  int weight_dtype_bits = 16;

  static ModelPreset llama2_7b();
  static ModelPreset by_name(const std::string& name);
  void validate() const;
};

/// Targets "layer<l>.k.g<j>" / "layer<l>.v.g<j>" of width head_dim * group_size.
std::vector<std::string> kv_target_ids(std::size_t layers, std::size_t n_groups);

/// Equal-score allocation over every K/V group of the preset.
RankPlan uniform_plan(const ModelPreset& preset, std::size_t group_size, double budget_rate);

struct KvBytes {
  std::uint64_t baseline = 0;    // 2 * layers * heads * head_dim * tokens * kv_dtype_bits / 8
  std::uint64_t compressed = 0;  // sum of rank * tokens * bits / 8, metadata excluded
  std::uint64_t metadata = 0;    // 8 bytes per token per quantized group
  double compression_rate = 0.0;                // metadata excluded
  double compression_rate_with_metadata = 0.0;  // metadata included
  std::uint64_t compressed_total(bool include_metadata) const {
    return include_metadata ? compressed + metadata : compressed;
  }
};

/// bits == 16 means no quantization metadata. Without a plan the full
/// width is cached at `bits`.
KvBytes kv_cache_bytes(const ModelPreset& preset, std::uint64_t tokens, const RankPlan* plan, int bits);

/// Storage of an (m x r, r x n) factor pair relative to the m x n original.
double weight_ratio(double m, double n, double r);

struct ReconMacs {
  std::vector<std::uint64_t> per_head;   // r_group * head_dim
  std::vector<std::uint64_t> per_group;  // r_group * head_dim * group_size
  std::uint64_t total = 0;
};

/// Multiply-accumulates to rebuild one token's keys (or values) for all heads.
ReconMacs recon_macs(const Granularity& granularity, std::span<const std::size_t> ranks,
                     std::size_t head_dim, std::size_t n_heads);

struct MemoryBreakdown {
  std::uint64_t tokens = 0;
  std::uint64_t weight_bytes_baseline = 0;
  std::uint64_t weight_bytes_compressed = 0;  // K/V projections replaced by factor pairs
  std::uint64_t fused_weight_bytes = 0;       // W^q B^k^T and B^v W^o blocks, per head
  std::uint64_t kv_bytes_baseline = 0;
  std::uint64_t kv_bytes_compressed = 0;
  double kv_reduction = 1.0;     // baseline / compressed KV bytes
  double total_reduction = 1.0;  // (weights + KV) baseline / compressed
  double weight_ratio = 1.0;     // compressed / baseline weight bytes
};

MemoryBreakdown total_memory_breakdown(const ModelPreset& preset, std::uint64_t tokens,
                                       const RankPlan& plan, int bits, std::size_t group_size);

struct CostReport {
  std::string preset;
  std::uint64_t tokens = 0;
  int bits = 16;
  KvBytes kv;
  std::vector<double> weight_ratio_per_target;
  std::uint64_t recon_macs_per_step = 0;  // keys of one token, all layers
  std::uint64_t fused_weight_bytes = 0;
};

CostReport cost_report(const ModelPreset& preset, std::uint64_t tokens, const RankPlan& plan,
                       int bits, std::size_t group_size);
nlohmann::json to_json(const CostReport& report);
std::string format_cost_report(const CostReport& report);

/// Rounds half up at the given number of decimals (the table convention).
std::string format_fixed(double value, int decimals);

struct Table2Row {
  std::string method;
  int bits = 16;
  double size_gb = 0.0;
  std::optional<double> rate_percent;  // empty for the baseline row
};

/// The seven baseline/low-rank rows of the 128K-token Llama-2-7B table,
/// computed from the cost model (G-LRD group size 4, metadata excluded).
std::vector<Table2Row> compute_table2();
/// The printed values those rows must reproduce.
std::vector<Table2Row> expected_table2();
std::string format_table2(std::span<const Table2Row> rows);
/// Compares at printed precision: 0.05 GB and 0.005 percentage points.
/// Returns the mismatching lines, empty when everything agrees.
std::vector<std::string> compare_table2(std::span<const Table2Row> computed,
                                        std::span<const Table2Row> expected);

std::string format_memory_breakdown(std::span<const MemoryBreakdown> rows);
std::string format_recon_macs_table(std::size_t n_heads, std::size_t head_dim);

}  // namespace palu
