// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "palu/accounting.hpp"
#include "palu/error.hpp"

using namespace palu;

namespace {

constexpr std::uint64_t k128K = 131072;

double gb(std::uint64_t bytes) { return static_cast<double>(bytes) / (1024.0 * 1024.0 * 1024.0); }

}  // namespace

TEST(Preset, Llama2Seven) {
  const auto p = ModelPreset::llama2_7b();
  EXPECT_EQ(p.layers, 32u);
  EXPECT_EQ(p.n_heads, 32u);
  EXPECT_EQ(p.head_dim, 128u);
  EXPECT_EQ(p.d_model, 4096u);
  EXPECT_EQ(p.kv_dtype_bits, 16);
  EXPECT_EQ(ModelPreset::by_name("llama2-7b").name, p.name);
  EXPECT_THROW(ModelPreset::by_name("gpt-9"), Error);
}

TEST(KvBytes, BaselineIs64GB) {
  const auto kv = kv_cache_bytes(ModelPreset::llama2_7b(), k128K, nullptr, 16);
  EXPECT_EQ(kv.baseline, 2ULL * 32 * 32 * 128 * k128K * 2);
  EXPECT_DOUBLE_EQ(gb(kv.baseline), 64.0);
  EXPECT_EQ(kv.compressed, kv.baseline);
}

TEST(KvBytes, PaluRowsFromTheTable) {
  const auto p = ModelPreset::llama2_7b();
  const auto keep70 = uniform_plan(p, 4, 0.7);
  const auto keep50 = uniform_plan(p, 4, 0.5);
  const auto a = kv_cache_bytes(p, k128K, &keep70, 3);
  EXPECT_NEAR(gb(a.compressed), 8.4, 0.05);
  EXPECT_EQ(format_fixed(100.0 * a.compression_rate, 2), "86.87");
  const auto b = kv_cache_bytes(p, k128K, &keep50, 2);
  EXPECT_DOUBLE_EQ(gb(b.compressed), 4.0);
  EXPECT_DOUBLE_EQ(b.compression_rate, 0.9375);
  const auto c = kv_cache_bytes(p, k128K, &keep50, 16);
  EXPECT_DOUBLE_EQ(gb(c.compressed), 32.0);
}

TEST(KvBytes, SixteenBitRateEqualsPlanRate) {
  const auto p = ModelPreset::llama2_7b();
  for (double rate : {0.25, 0.5, 0.75, 1.0}) {
    const auto plan = uniform_plan(p, 4, rate);
    const auto kv = kv_cache_bytes(p, 4096, &plan, 16);
    EXPECT_DOUBLE_EQ(kv.compression_rate, 1.0 - rate);
    EXPECT_EQ(kv.metadata, 0u);
  }
}

TEST(KvBytes, MetadataIsEightBytesPerTokenPerGroup) {
  const auto p = ModelPreset::llama2_7b();
  const auto plan = uniform_plan(p, 4, 0.5);
  const auto kv = kv_cache_bytes(p, 1000, &plan, 3);
  // 32 layers x 2 (K, V) x 8 groups
  EXPECT_EQ(kv.metadata, 8ULL * 1000 * 32 * 2 * 8);
  EXPECT_LT(kv.compression_rate_with_metadata, kv.compression_rate);
  EXPECT_EQ(kv.compressed_total(true), kv.compressed + kv.metadata);
  EXPECT_EQ(kv_cache_bytes(p, 0, &plan, 3).compressed, 0u);
}

TEST(WeightRatio, AppendixArithmetic) {
  EXPECT_DOUBLE_EQ(weight_ratio(512, 512, 0.7 * 512), 1.4);
  EXPECT_DOUBLE_EQ(weight_ratio(4096, 512, 358.4), 0.7875);
  EXPECT_DOUBLE_EQ(weight_ratio(4096, 512, 0.7 * 512), 0.7875);
  EXPECT_DOUBLE_EQ(weight_ratio(64, 64, 64), 2.0);
  EXPECT_DOUBLE_EQ(weight_ratio(300, 40, 7), weight_ratio(40, 300, 7));
  EXPECT_DOUBLE_EQ(weight_ratio(300, 40, 14), 2.0 * weight_ratio(300, 40, 7));
}

TEST(ReconMacs, JointIsNTimesMulti) {
  const std::size_t n = 4, dh = 8;
  const std::vector<std::size_t> multi(n, 4);
  const std::vector<std::size_t> joint = {16};
  const auto m = recon_macs(Granularity::multi_head(), multi, dh, n);
  const auto j = recon_macs(Granularity::joint_head(n), joint, dh, n);
  EXPECT_EQ(m.per_head[0], 32u);
  EXPECT_EQ(j.per_head[0], 128u);
  EXPECT_EQ(j.per_head[0], n * m.per_head[0]);
  const std::vector<std::size_t> group = {8, 8};
  const auto g = recon_macs(Granularity::group_head(2), group, dh, n);
  EXPECT_EQ(g.per_head[0], 64u);
  EXPECT_EQ(g.per_group[0], 128u);
  EXPECT_EQ(g.per_head[0], 2 * m.per_head[0]);
}

TEST(ReconMacs, FullRankMultiIsSquareHeadDim) {
  const std::vector<std::size_t> ranks(4, 8);
  const auto m = recon_macs(Granularity::multi_head(), ranks, 8, 4);
  EXPECT_EQ(m.per_head[0], 64u);
  EXPECT_EQ(m.total, 4u * 64u);
  EXPECT_THROW(recon_macs(Granularity::group_head(2), ranks, 8, 4), Error);
}

TEST(MemoryBreakdown, ZeroTokensIsWeightRatioOnly) {
  const auto p = ModelPreset::llama2_7b();
  const auto plan = uniform_plan(p, 4, 0.5);
  const auto m = total_memory_breakdown(p, 0, plan, 16, 4);
  EXPECT_EQ(m.kv_bytes_baseline, 0u);
  EXPECT_EQ(m.kv_bytes_compressed, 0u);
  EXPECT_DOUBLE_EQ(m.total_reduction, 1.0 / m.weight_ratio);
}

TEST(MemoryBreakdown, KvReductionFactors) {
  const auto p = ModelPreset::llama2_7b();
  const auto plan = uniform_plan(p, 4, 0.5);
  EXPECT_DOUBLE_EQ(total_memory_breakdown(p, 65536, plan, 16, 4).kv_reduction, 2.0);
  const auto two = total_memory_breakdown(p, 65536, plan, 2, 4);
  EXPECT_DOUBLE_EQ(two.kv_reduction, 16.0);
  EXPECT_GT(two.total_reduction, 1.0);
  EXPECT_LT(two.total_reduction, two.kv_reduction);
}

TEST(FormatFixed, HalfUp) {
  EXPECT_EQ(format_fixed(90.625, 2), "90.63");
  EXPECT_EQ(format_fixed(86.87499999, 2), "86.87");
  EXPECT_EQ(format_fixed(64.0, 1), "64.0");
  EXPECT_EQ(format_fixed(0.0, 2), "0.00");
}

TEST(Table2, ComputedRowsMatchPrintedValues) {
  const auto rows = compute_table2();
  const auto expected = expected_table2();
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_TRUE(compare_table2(rows, expected).empty());
  auto broken = rows;
  broken[3].size_gb += 0.2;
  EXPECT_FALSE(compare_table2(broken, expected).empty());
}

TEST(CostReport, JsonAndText) {
  const auto p = ModelPreset::llama2_7b();
  const auto plan = uniform_plan(p, 4, 0.7);
  const auto r = cost_report(p, k128K, plan, 3, 4);
  EXPECT_EQ(r.weight_ratio_per_target.size(), plan.entries.size());
  const auto j = to_json(r);
  EXPECT_EQ(j.at("kv_bytes_baseline").get<std::uint64_t>(), r.kv.baseline);
  EXPECT_NE(format_cost_report(r).find("86.87%"), std::string::npos);
}

TEST(Targets, IdsAndUniformPlan) {
  const auto ids = kv_target_ids(2, 2);
  EXPECT_EQ(ids, (std::vector<std::string>{"layer0.k.g0", "layer0.k.g1", "layer0.v.g0", "layer0.v.g1",
                                           "layer1.k.g0", "layer1.k.g1", "layer1.v.g0", "layer1.v.g1"}));
  const auto plan = uniform_plan(ModelPreset::llama2_7b(), 4, 0.5);
  EXPECT_EQ(plan.entries.size(), 32u * 2 * 8);
  for (const auto& e : plan.entries) EXPECT_EQ(e.allocated_rank, 256u);
}
