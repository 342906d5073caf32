// SPDX-License-Identifier: Apache-2.0
#include "palu/random.hpp"

#include <cmath>
#include <numbers>

namespace palu {

std::uint64_t CounterRng::mix(std::uint64_t x) noexcept {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t CounterRng::bits(std::uint64_t row, std::uint64_t col,
                               std::uint64_t lane) const noexcept {
  std::uint64_t h = mix(key_ ^ row);
  h = mix(h ^ (col * 0xd6e8feb86659fd93ULL));
  return mix(h ^ (lane + 1) * 0xa0761d6478bd642fULL);
}

double CounterRng::uniform(std::uint64_t row, std::uint64_t col,
                           std::uint64_t lane) const noexcept {
  // 53 random mantissa bits, shifted half a step off zero
  return (static_cast<double>(bits(row, col, lane) >> 11) + 0.5) * 0x1.0p-53;
}

double CounterRng::normal(std::uint64_t row, std::uint64_t col) const noexcept {
  const double u1 = uniform(row, col, 0);
  const double u2 = uniform(row, col, 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage) noexcept {
  // FNV-1a over the stage name, folded into the seed
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : stage) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return CounterRng::mix(seed ^ CounterRng::mix(h));
}

}  // namespace palu
