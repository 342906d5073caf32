// SPDX-License-Identifier: Apache-2.0
#include "palu/rank_allocator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "palu/error.hpp"

namespace palu {

FisherScore estimate_fisher(std::string target_id, const Matrix& w, const BatchLoss& loss,
                            std::size_t calib_batches) {
  if (calib_batches < 1) fail_validation("estimate_fisher needs at least one batch");
  Matrix probe = w;
  double total = 0.0;
  for (std::size_t b = 0; b < calib_batches; ++b) {
    const double base = loss(w, b);
    if (!std::isfinite(base)) {
      fail_numerical("non-finite loss in calibration batch " + std::to_string(b) + " of " +
                     target_id);
    }
    for (std::size_t i = 0; i < probe.size(); ++i) {
      const double original = w.data()[i];
      const double h = 1e-4 * (1.0 + std::abs(original));
      probe.data()[i] = original + h;
      const double up = loss(probe, b);
      probe.data()[i] = original - h;
      const double down = loss(probe, b);
      probe.data()[i] = original;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        fail_numerical("non-finite loss in calibration batch " + std::to_string(b) + " of " +
                       target_id);
      }
      const double g = (up - down) / (2.0 * h);
      total += g * g;
    }
  }
  return {std::move(target_id), total};
}

RankRounding RankRounding::block(std::size_t k) {
  if (k == 0) fail_validation("block rounding needs a positive block size");
  return {Kind::block, k};
}

RankRounding RankRounding::parse(const std::string& text) {
  if (text == "none") return none();
  if (text == "pow2") return pow2();
  if (text.rfind("block:", 0) == 0) {
    try {
      const long k = std::stol(text.substr(6));
      if (k > 0) return block(static_cast<std::size_t>(k));
    } catch (const std::exception&) {
    }
  }
  fail_validation("unknown rounding mode '" + text + "' (expected none, pow2 or block:<k>)");
}

std::size_t RankRounding::apply(std::size_t rank, std::size_t min_rank) const {
  std::size_t out = rank;
  switch (kind_) {
    case Kind::none: break;
    case Kind::pow2: {
      std::size_t p = 1;
      while (p * 2 <= rank) p *= 2;
      out = rank == 0 ? 0 : p;
      break;
    }
    case Kind::block: out = rank / block_ * block_; break;
  }
  return std::max(out, min_rank);
}

std::string RankRounding::name() const {
  switch (kind_) {
    case Kind::none: return "none";
    case Kind::pow2: return "pow2";
    case Kind::block: return "block:" + std::to_string(block_);
  }
  return "?";
}

std::size_t RankPlan::total_rank() const {
  std::size_t t = 0;
  for (const auto& e : entries) t += e.allocated_rank;
  return t;
}

std::size_t RankPlan::total_width() const {
  std::size_t t = 0;
  for (const auto& e : entries) t += e.full_width;
  return t;
}

std::optional<std::size_t> RankPlan::rank_of(const std::string& target_id) const {
  for (const auto& e : entries)
    if (e.target_id == target_id) return e.allocated_rank;
  return std::nullopt;
}

namespace {

// Order-independent sum: add in ascending order so permuting the targets
// cannot change the rounding.
double stable_sum(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

// Shares clamp(lambda * w_j, lo, cap_j) summing to `target`. Targets with zero
// weight sit at lo. f(lambda) is piecewise linear and non-decreasing, so find
// the segment between sorted breakpoints that contains the target and solve
// it exactly.
std::vector<double> water_fill(std::span<const double> w, double lo, std::span<const double> caps,
                               double target) {
  const std::size_t n = w.size();
  auto shares_at = [&](double lambda) {
    std::vector<double> out(n);
    for (std::size_t j = 0; j < n; ++j) out[j] = std::clamp(lambda * w[j], lo, caps[j]);
    return out;
  };
  std::vector<double> points = {0.0};
  for (std::size_t j = 0; j < n; ++j) {
    if (w[j] <= 0.0) continue;
    points.push_back(lo / w[j]);
    points.push_back(caps[j] / w[j]);
  }
  std::sort(points.begin(), points.end());
  // first breakpoint where the total reaches the target
  const auto it = std::partition_point(points.begin(), points.end(),
                                       [&](double p) { return stable_sum(shares_at(p)) < target; });
  const auto k = static_cast<std::size_t>(it - points.begin());
  if (k == points.size()) return shares_at(points.back());
  if (k == 0) return shares_at(0.0);
  // Inside (points[k-1], points[k]] the free set is fixed.
  const double a = points[k - 1], b = points[k];
  std::vector<double> pinned, free_w;
  for (std::size_t j = 0; j < n; ++j) {
    if (w[j] <= 0.0 || lo / w[j] >= b) {
      pinned.push_back(lo);
    } else if (caps[j] / w[j] <= a) {
      pinned.push_back(caps[j]);
    } else {
      free_w.push_back(w[j]);
    }
  }
  const double free_sum = stable_sum(free_w);
  if (!(free_sum > 0.0)) return shares_at(b);
  const double lambda = std::clamp((target - stable_sum(pinned)) / free_sum, a, b);
  return shares_at(lambda);
}

}  // namespace

RankPlan allocate(std::span<const FisherScore> scores, std::span<const std::size_t> full_widths,
                  std::size_t d_model, double budget_rate, std::size_t min_rank,
                  RankRounding rounding) {
  const std::size_t n = scores.size();
  if (n == 0) fail_validation("allocate needs at least one target");
  if (full_widths.size() != n) {
    fail_validation("allocate got " + std::to_string(n) + " scores but " +
                    std::to_string(full_widths.size()) + " widths");
  }
  if (!(budget_rate > 0.0 && budget_rate <= 1.0)) {
    fail_validation("budget rate must lie in (0, 1], got " + std::to_string(budget_rate));
  }
  if (min_rank < 1) fail_validation("min_rank must be at least 1");
  std::vector<double> s(n);
  for (std::size_t j = 0; j < n; ++j) {
    s[j] = scores[j].score;
    if (!std::isfinite(s[j]) || s[j] < 0.0) {
      fail_validation("Fisher score of " + scores[j].target_id + " must be finite and >= 0");
    }
  }
  if (!(stable_sum(s) > 0.0)) fail_validation("Fisher scores sum to zero");

  std::vector<double> caps(n);
  std::size_t width_total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t cap = std::min(d_model, full_widths[j]);
    if (cap < min_rank) {
      fail_validation("target " + scores[j].target_id + " cannot hold min_rank " +
                      std::to_string(min_rank));
    }
    caps[j] = static_cast<double>(cap);
    width_total += full_widths[j];
  }
  const auto budget = static_cast<std::size_t>(std::llround(budget_rate * static_cast<double>(width_total)));
  if (budget < n * min_rank) {
    const double min_rate = static_cast<double>(n * min_rank) / static_cast<double>(width_total);
    fail_validation(fmt::format("budget of {} latent columns cannot give {} targets rank {}; "
                                "minimum feasible rate is {:.6g}",
                                budget, n, min_rank, min_rate));
  }

  // Water-filling: share_j = clamp(lambda * s_j, min_rank, cap_j) with lambda
  // chosen so the shares sum to the budget. Zero-score targets stay at the
  // floor unless the positive ones saturate, in which case they split the
  // remainder evenly.
  const double floor_rank = static_cast<double>(min_rank);
  const double target = std::min(static_cast<double>(budget), stable_sum(caps));
  std::vector<double> weight = s;
  std::vector<double> share = water_fill(weight, floor_rank, caps, target);
  if (stable_sum(share) < target - 0.5) {
    for (std::size_t j = 0; j < n; ++j) weight[j] = s[j] > 0.0 ? 0.0 : 1.0;
    std::vector<double> fixed_parts;
    for (std::size_t j = 0; j < n; ++j)
      if (s[j] > 0.0) fixed_parts.push_back(share[j]);
    const double fixed = stable_sum(fixed_parts);
    // the positive-score targets sit at the floor inside this second pass
    const double parked = floor_rank * static_cast<double>(fixed_parts.size());
    const auto extra = water_fill(weight, floor_rank, caps, target - fixed + parked);
    for (std::size_t j = 0; j < n; ++j)
      if (s[j] == 0.0) share[j] = extra[j];
  }

  std::vector<std::size_t> ranks(n);
  std::vector<double> remainder(n, -1.0);
  std::size_t assigned = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const double fl = std::floor(share[j]);
    ranks[j] = static_cast<std::size_t>(fl);
    remainder[j] = share[j] - fl;
    assigned += ranks[j];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (remainder[a] != remainder[b]) return remainder[a] > remainder[b];
    return scores[a].target_id < scores[b].target_id;
  });
  for (std::size_t idx = 0; idx < n && assigned < budget; ++idx) {
    const std::size_t j = order[idx];
    if (static_cast<double>(ranks[j] + 1) > caps[j]) continue;
    ++ranks[j];
    ++assigned;
  }

  RankPlan plan;
  plan.budget_rate = budget_rate;
  plan.rounding = rounding;
  plan.entries.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    plan.entries.push_back({scores[j].target_id, full_widths[j], rounding.apply(ranks[j], min_rank)});
  }
  return plan;
}

RankPlan override_ranks(RankPlan plan, std::span<const RankEntry> overrides) {
  for (const auto& o : overrides) {
    auto it = std::find_if(plan.entries.begin(), plan.entries.end(),
                           [&](const RankEntry& e) { return e.target_id == o.target_id; });
    if (it == plan.entries.end()) fail_validation("override for unknown target " + o.target_id);
    if (o.allocated_rank < 1 || o.allocated_rank > it->full_width) {
      fail_validation("override rank " + std::to_string(o.allocated_rank) + " out of range for " +
                      o.target_id);
    }
    it->allocated_rank = o.allocated_rank;
  }
  return plan;
}

namespace {

char kv_tag(const std::string& id) {
  std::stringstream ss(id);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (part == "k") return 'k';
    if (part == "v") return 'v';
  }
  return 0;
}

}  // namespace

PlanReport plan_report(const RankPlan& plan) {
  PlanReport report;
  double key_sum = 0.0, value_sum = 0.0;
  std::size_t key_n = 0, value_n = 0;
  for (const auto& e : plan.entries) {
    const double c = 1.0 - static_cast<double>(e.allocated_rank) / static_cast<double>(e.full_width);
    report.rows.push_back({e.target_id, e.full_width, e.allocated_rank, c});
    switch (kv_tag(e.target_id)) {
      case 'k': key_sum += c; ++key_n; break;
      case 'v': value_sum += c; ++value_n; break;
      default: break;
    }
  }
  const auto width = static_cast<double>(plan.total_width());
  report.overall_compression = width > 0 ? 1.0 - static_cast<double>(plan.total_rank()) / width : 0.0;
  if (key_n > 0) report.key_compression = key_sum / static_cast<double>(key_n);
  if (value_n > 0) report.value_compression = value_sum / static_cast<double>(value_n);
  return report;
}

std::string format_plan_report(const PlanReport& report) {
  std::string out = fmt::format("{:<24} {:>10} {:>8} {:>12}\n", "target", "width", "rank",
                                "compression");
  for (const auto& r : report.rows) {
    out += fmt::format("{:<24} {:>10} {:>8} {:>11.2f}%\n", r.target_id, r.full_width, r.rank,
                       100.0 * r.compression);
  }
  out += fmt::format("{:<24} {:>31.2f}%\n", "overall", 100.0 * report.overall_compression);
  if (report.key_compression)
    out += fmt::format("{:<24} {:>31.2f}%\n", "key (mean)", 100.0 * *report.key_compression);
  if (report.value_compression)
    out += fmt::format("{:<24} {:>31.2f}%\n", "value (mean)", 100.0 * *report.value_compression);
  return out;
}

nlohmann::json scores_to_json(std::span<const FisherScore> scores) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : scores) j.push_back({{"target_id", s.target_id}, {"score", s.score}});
  return j;
}

std::vector<FisherScore> scores_from_json(const nlohmann::json& j) {
  if (!j.is_array()) fail_validation("scores JSON must be an array of {target_id, score}");
  std::vector<FisherScore> out;
  for (const auto& item : j) {
    if (!item.is_object() || !item.contains("target_id") || !item.contains("score") ||
        !item["target_id"].is_string() || !item["score"].is_number()) {
      fail_validation("scores JSON entries need a string target_id and a numeric score");
    }
    out.push_back({item["target_id"].get<std::string>(), item["score"].get<double>()});
  }
  return out;
}

nlohmann::json plan_to_json(const RankPlan& plan) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : plan.entries) {
    entries.push_back({{"target_id", e.target_id},
                       {"full_width", e.full_width},
                       {"allocated_rank", e.allocated_rank}});
  }
  return {{"budget_rate", plan.budget_rate}, {"rounding", plan.rounding.name()}, {"entries", entries}};
}

RankPlan plan_from_json(const nlohmann::json& j) {
  try {
    RankPlan plan;
    plan.budget_rate = j.at("budget_rate").get<double>();
    plan.rounding = RankRounding::parse(j.at("rounding").get<std::string>());
    for (const auto& e : j.at("entries")) {
      plan.entries.push_back({e.at("target_id").get<std::string>(),
                              e.at("full_width").get<std::size_t>(),
                              e.at("allocated_rank").get<std::size_t>()});
    }
    return plan;
  } catch (const nlohmann::json::exception& ex) {
    fail_validation(std::string("malformed rank plan JSON: ") + ex.what());
  }
}

}  // namespace palu
