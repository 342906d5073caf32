// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "palu/matrix.hpp"

namespace palu {

/// Unpacked integer codes stored bit-packed on disk.
struct PackedTensor {
  std::vector<std::size_t> shape;
  int bits = 4;
  std::vector<std::uint8_t> codes;  // one code per element, row-major

  friend bool operator==(const PackedTensor&, const PackedTensor&) = default;
};

struct NamedTensor {
  std::string name;
  std::variant<Matrix, PackedTensor> value;
};

/// File layout:
///   "PALU" | version 0x01 | u32 LE header length | JSON header | data
/// The header is padded with spaces so the data section starts on an 8-byte
/// boundary. Tensor offsets are relative to the data start, 8-byte aligned,
/// and payloads are little-endian row-major (f64) or LSB-first bit packed.
class TensorContainer {
 public:
  void add(std::string name, Matrix m);
  void add(std::string name, PackedTensor p);

  bool contains(const std::string& name) const;
  const Matrix& matrix(const std::string& name) const;
  const PackedTensor& packed(const std::string& name) const;
  const std::vector<NamedTensor>& tensors() const noexcept { return tensors_; }

  nlohmann::json& meta() noexcept { return meta_; }
  const nlohmann::json& meta() const noexcept { return meta_; }

  std::vector<std::uint8_t> serialize() const;
  static TensorContainer deserialize(std::span<const std::uint8_t> bytes);

  void write(const std::filesystem::path& path) const;
  static TensorContainer read(const std::filesystem::path& path);

 private:
  const NamedTensor* find(const std::string& name) const;

  std::vector<NamedTensor> tensors_;
  nlohmann::json meta_ = nlohmann::json::object();
};

}  // namespace palu
