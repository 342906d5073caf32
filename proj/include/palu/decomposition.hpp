// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "palu/matrix.hpp"

namespace palu {

enum class GranularityKind { multi_head, group_head, joint_head };

/// How many heads share one factor pair: 1 (per head), s (per group of s
/// heads) or all heads at once.
class Granularity {
 public:
  static Granularity multi_head() { return {GranularityKind::multi_head, 1}; }
  static Granularity group_head(std::size_t group_size) {
    return {GranularityKind::group_head, group_size};
  }
  static Granularity joint_head(std::size_t n_heads) {
    return {GranularityKind::joint_head, n_heads};
  }
  /// Picks the kind from the group size: 1 -> multi, n_heads -> joint.
  static Granularity from_group_size(std::size_t group_size, std::size_t n_heads);
  static Granularity parse(const std::string& kind, std::size_t group_size, std::size_t n_heads);

  GranularityKind kind() const noexcept { return kind_; }
  std::size_t group_size() const noexcept { return group_size_; }
  std::size_t group_count(std::size_t n_heads) const { return n_heads / group_size_; }
  std::string name() const;

  /// Throws unless the group size divides n_heads and matches the kind.
  void validate(std::size_t n_heads) const;

  friend bool operator==(const Granularity&, const Granularity&) = default;

 private:
  Granularity(GranularityKind kind, std::size_t group_size) : kind_(kind), group_size_(group_size) {}

  GranularityKind kind_;
  std::size_t group_size_;
};

struct FactorPair {
  Matrix a;  // d_model x rank
  Matrix b;  // rank x (head_dim * group_size)
  std::size_t rank = 0;
};

/// Low-rank factors for one K or V projection.
struct DecomposedLayer {
  Granularity granularity = Granularity::multi_head();
  std::vector<FactorPair> groups;
  std::size_t d_model = 0;
  std::size_t head_dim = 0;
  std::size_t n_heads = 0;

  std::size_t group_width() const { return head_dim * granularity.group_size(); }
  std::size_t total_rank() const;
  std::vector<std::size_t> ranks() const;
  /// Column offset of group j inside the concatenated latent.
  std::size_t latent_offset(std::size_t group) const;
  void validate() const;
};

struct CalibrationSet {
  Matrix x;  // n_samples x d_model
  std::string source;
};

enum class DecompositionMode { plain, whitened };

/// Truncated-SVD factorization of every column slice
/// w[:, j*d_h*s : (j+1)*d_h*s] with A = U_r sqrt(S_r), B = sqrt(S_r) V_r^T.
///
/// In whitened mode the slice is first left-multiplied by L^T, where L is the
/// Cholesky factor of X^T X + jitter*I (jitter = 1e-6 * trace / d), and A is
/// mapped back through (L^T)^-1. This minimizes ||X (W - AB)||_F instead of
/// ||W - AB||_F.
DecomposedLayer decompose(const Matrix& w, std::size_t head_dim, std::size_t n_heads,
                          const Granularity& granularity, std::span<const std::size_t> ranks,
                          DecompositionMode mode = DecompositionMode::plain,
                          const CalibrationSet* calib = nullptr);

/// Same rank for every group.
std::vector<std::size_t> equal_ranks(std::size_t group_count, std::size_t rank);

Matrix reconstruct(const DecomposedLayer& layer);

double frobenius_error(const DecomposedLayer& layer, const Matrix& w);

/// ||X (W - reconstruct(layer))||_F
double activation_error(const DecomposedLayer& layer, const Matrix& w, const Matrix& x);

}  // namespace palu
