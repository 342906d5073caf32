// SPDX-License-Identifier: Apache-2.0
#include "palu/decomposition.hpp"

#include <algorithm>
#include <cmath>

#include "palu/error.hpp"
#include "palu/linalg.hpp"
#include "palu/parallel.hpp"

namespace palu {

Granularity Granularity::from_group_size(std::size_t group_size, std::size_t n_heads) {
  if (group_size == 1) return multi_head();
  if (group_size == n_heads) return joint_head(n_heads);
  return group_head(group_size);
}

Granularity Granularity::parse(const std::string& kind, std::size_t group_size,
                               std::size_t n_heads) {
  Granularity g = multi_head();
  if (kind == "multi_head" || kind == "m-lrd") {
    g = multi_head();
  } else if (kind == "joint_head" || kind == "j-lrd") {
    g = joint_head(n_heads);
  } else if (kind == "group_head" || kind == "g-lrd") {
    g = group_head(group_size);
  } else {
    fail_validation("unknown granularity '" + kind + "'");
  }
  g.validate(n_heads);
  return g;
}

std::string Granularity::name() const {
  switch (kind_) {
    case GranularityKind::multi_head: return "multi_head";
    case GranularityKind::group_head: return "group_head";
    case GranularityKind::joint_head: return "joint_head";
  }
  return "?";
}

void Granularity::validate(std::size_t n_heads) const {
  if (group_size_ == 0 || n_heads == 0 || n_heads % group_size_ != 0) {
    fail_validation("group size " + std::to_string(group_size_) + " does not divide " +
                    std::to_string(n_heads) + " heads");
  }
  const bool ok = (kind_ == GranularityKind::multi_head && group_size_ == 1) ||
                  (kind_ == GranularityKind::joint_head && group_size_ == n_heads) ||
                  kind_ == GranularityKind::group_head;
  if (!ok) {
    fail_validation(name() + " is inconsistent with group size " + std::to_string(group_size_));
  }
}

std::size_t DecomposedLayer::total_rank() const {
  std::size_t total = 0;
  for (const auto& g : groups) total += g.rank;
  return total;
}

std::vector<std::size_t> DecomposedLayer::ranks() const {
  std::vector<std::size_t> out;
  out.reserve(groups.size());
  for (const auto& g : groups) out.push_back(g.rank);
  return out;
}

std::size_t DecomposedLayer::latent_offset(std::size_t group) const {
  std::size_t offset = 0;
  for (std::size_t j = 0; j < group; ++j) offset += groups[j].rank;
  return offset;
}

void DecomposedLayer::validate() const {
  granularity.validate(n_heads);
  if (groups.size() != granularity.group_count(n_heads)) {
    fail_validation("layer has " + std::to_string(groups.size()) + " groups, expected " +
                    std::to_string(granularity.group_count(n_heads)));
  }
  const std::size_t width = group_width();
  for (std::size_t j = 0; j < groups.size(); ++j) {
    const auto& g = groups[j];
    const bool ok = g.a.cols() == g.rank && g.b.rows() == g.rank && g.b.cols() == width &&
                    g.a.rows() == d_model && g.rank >= 1 && g.rank <= std::min(d_model, width);
    if (!ok) {
      fail_validation("group " + std::to_string(j) + " factors " + g.a.shape_string() + " / " +
                      g.b.shape_string() + " inconsistent with rank " + std::to_string(g.rank));
    }
  }
}

std::vector<std::size_t> equal_ranks(std::size_t group_count, std::size_t rank) {
  return std::vector<std::size_t>(group_count, rank);
}

namespace {

FactorPair split_truncated(const SvdResult& s, std::size_t rank) {
  FactorPair f;
  f.rank = rank;
  f.a = Matrix(s.u.rows(), rank);
  f.b = Matrix(rank, s.vt.cols());
  for (std::size_t k = 0; k < rank; ++k) {
    const double root = std::sqrt(s.singular_values[k]);
    for (std::size_t i = 0; i < s.u.rows(); ++i) f.a(i, k) = s.u(i, k) * root;
    for (std::size_t j = 0; j < s.vt.cols(); ++j) f.b(k, j) = s.vt(k, j) * root;
  }
  return f;
}

}  // namespace

DecomposedLayer decompose(const Matrix& w, std::size_t head_dim, std::size_t n_heads,
                          const Granularity& granularity, std::span<const std::size_t> ranks,
                          DecompositionMode mode, const CalibrationSet* calib) {
  granularity.validate(n_heads);
  if (w.cols() != head_dim * n_heads) {
    fail_validation("weight " + w.shape_string() + " does not have head_dim*n_heads = " +
                    std::to_string(head_dim * n_heads) + " columns");
  }
  const std::size_t n_groups = granularity.group_count(n_heads);
  if (ranks.size() != n_groups) {
    fail_validation("expected " + std::to_string(n_groups) + " ranks, got " +
                    std::to_string(ranks.size()));
  }
  const std::size_t width = head_dim * granularity.group_size();
  const std::size_t max_rank = std::min(w.rows(), width);
  for (std::size_t j = 0; j < n_groups; ++j) {
    if (ranks[j] < 1 || ranks[j] > max_rank) {
      fail_validation("rank " + std::to_string(ranks[j]) + " for group " + std::to_string(j) +
                      " outside [1, " + std::to_string(max_rank) + "]");
    }
  }

  Matrix whitener_t;  // L^T
  if (mode == DecompositionMode::whitened) {
    if (calib == nullptr) fail_validation("whitened decomposition requires a calibration set");
    if (calib->x.cols() != w.rows()) {
      fail_validation("calibration inputs " + calib->x.shape_string() +
                      " do not match d_model " + std::to_string(w.rows()));
    }
    const Matrix gram = matmul(transpose(calib->x), calib->x);
    const double jitter = 1e-6 * trace(gram) / static_cast<double>(gram.rows());
    whitener_t = transpose(cholesky(gram, jitter));
  }

  DecomposedLayer layer;
  layer.granularity = granularity;
  layer.d_model = w.rows();
  layer.head_dim = head_dim;
  layer.n_heads = n_heads;
  layer.groups.resize(n_groups);
  parallel_for(n_groups, [&](std::size_t j) {
    const Matrix slice = slice_cols(w, j * width, (j + 1) * width);
    if (mode == DecompositionMode::plain) {
      layer.groups[j] = split_truncated(svd(slice), ranks[j]);
    } else {
      FactorPair f = split_truncated(svd(matmul(whitener_t, slice)), ranks[j]);
      f.a = solve_upper(whitener_t, f.a);
      layer.groups[j] = std::move(f);
    }
  });
  return layer;
}

Matrix reconstruct(const DecomposedLayer& layer) {
  std::vector<Matrix> blocks;
  blocks.reserve(layer.groups.size());
  for (const auto& g : layer.groups) blocks.push_back(matmul(g.a, g.b));
  return hconcat(blocks);
}

double frobenius_error(const DecomposedLayer& layer, const Matrix& w) {
  return frobenius_norm(subtract(w, reconstruct(layer)));
}

double activation_error(const DecomposedLayer& layer, const Matrix& w, const Matrix& x) {
  return frobenius_norm(matmul(x, subtract(w, reconstruct(layer))));
}

}  // namespace palu
