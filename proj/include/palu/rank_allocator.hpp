// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "palu/matrix.hpp"

namespace palu {

struct FisherScore {
  std::string target_id;
  double score = 0.0;  // accumulated squared-gradient mass, >= 0
};

/// Loss of one calibration batch evaluated at a candidate weight matrix.
using BatchLoss = std::function<double(const Matrix& w, std::size_t batch)>;

/// Empirical Fisher mass: sum over batches and entries of g^2, with g the
/// central finite-difference gradient (step 1e-4 * (1 + |w_ij|)).
FisherScore estimate_fisher(std::string target_id, const Matrix& w, const BatchLoss& loss,
                            std::size_t calib_batches);

class RankRounding {
 public:
  enum class Kind { none, pow2, block };

  static RankRounding none() { return {Kind::none, 1}; }
  static RankRounding pow2() { return {Kind::pow2, 1}; }
  static RankRounding block(std::size_t k);
  /// "none", "pow2" or "block:<k>".
  static RankRounding parse(const std::string& text);

  Kind kind() const noexcept { return kind_; }
  std::size_t block_size() const noexcept { return block_; }
  /// Largest rank allowed by the mode that does not exceed `rank`, floored at min_rank.
  std::size_t apply(std::size_t rank, std::size_t min_rank) const;
  std::string name() const;

  friend bool operator==(const RankRounding&, const RankRounding&) = default;

 private:
  RankRounding(Kind kind, std::size_t block) : kind_(kind), block_(block) {}

  Kind kind_;
  std::size_t block_;
};

struct RankEntry {
  std::string target_id;
  std::size_t full_width = 0;
  std::size_t allocated_rank = 0;

  friend bool operator==(const RankEntry&, const RankEntry&) = default;
};

struct RankPlan {
  std::vector<RankEntry> entries;
  double budget_rate = 1.0;  // fraction of total latent width kept
  RankRounding rounding = RankRounding::none();

  std::size_t total_rank() const;
  std::size_t total_width() const;
  std::optional<std::size_t> rank_of(const std::string& target_id) const;

  friend bool operator==(const RankPlan&, const RankPlan&) = default;
};

/// Splits round(budget_rate * sum(full_widths)) latent columns across targets
/// in proportion to their Fisher scores.
///
/// Targets whose share falls below min_rank or above min(d_model, width) are
/// pinned there and the remainder is re-split among the rest. Integer
/// leftovers go to the largest fractional remainders, ties to the lexically
/// smaller target id. The rounding mode is applied last and only rounds down.
/// Throws when the budget cannot give every target min_rank.
RankPlan allocate(std::span<const FisherScore> scores, std::span<const std::size_t> full_widths,
                  std::size_t d_model, double budget_rate, std::size_t min_rank = 1,
                  RankRounding rounding = RankRounding::none());

/// Manual per-target overrides on top of an existing plan.
RankPlan override_ranks(RankPlan plan, std::span<const RankEntry> overrides);

struct PlanReportRow {
  std::string target_id;
  std::size_t full_width = 0;
  std::size_t rank = 0;
  double compression = 0.0;  // 1 - rank / full_width
};

struct PlanReport {
  std::vector<PlanReportRow> rows;
  double overall_compression = 0.0;
  std::optional<double> key_compression;    // mean over targets tagged "k"
  std::optional<double> value_compression;  // mean over targets tagged "v"
};

/// Target ids are dot-separated; a component equal to "k" or "v" tags the
/// target as a key or value projection (e.g. "layer3.v.g1").
PlanReport plan_report(const RankPlan& plan);
std::string format_plan_report(const PlanReport& report);

nlohmann::json scores_to_json(std::span<const FisherScore> scores);
std::vector<FisherScore> scores_from_json(const nlohmann::json& j);
nlohmann::json plan_to_json(const RankPlan& plan);
RankPlan plan_from_json(const nlohmann::json& j);

}  // namespace palu
