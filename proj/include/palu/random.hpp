// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string_view>

namespace palu {

/// Counter-based generator: every draw is a pure function of (key, counter),
/// so a matrix entry depends only on (seed, stream, row, col).
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : key_(mix(seed ^ mix(stream + 0x9e3779b97f4a7c15ULL))) {}

  std::uint64_t bits(std::uint64_t row, std::uint64_t col, std::uint64_t lane = 0) const noexcept;
  /// Uniform in the open interval (0, 1).
  double uniform(std::uint64_t row, std::uint64_t col, std::uint64_t lane = 0) const noexcept;
  /// Standard normal via Box-Muller on two independent lanes.
  double normal(std::uint64_t row, std::uint64_t col) const noexcept;

  static std::uint64_t mix(std::uint64_t x) noexcept;

 private:
  std::uint64_t key_;
};

/// Stage-local seed derived from a global seed and a stage name.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage) noexcept;

}  // namespace palu
