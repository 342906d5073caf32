// SPDX-License-Identifier: Apache-2.0
#include "palu/container.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "palu/error.hpp"
#include "palu/quantizer.hpp"

namespace palu {

namespace {

constexpr std::array<char, 4> kMagic = {'P', 'A', 'L', 'U'};
constexpr std::uint8_t kVersion = 0x01;
constexpr std::size_t kPreamble = 4 + 1 + 4;
constexpr std::size_t kAlign = 8;

std::size_t align_up(std::size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[i]) << (8 * i);
  return v;
}

void put_f64(std::uint8_t* dst, double value) {
  const auto bits = std::bit_cast<std::uint64_t>(value);
  for (int i = 0; i < 8; ++i) dst[i] = static_cast<std::uint8_t>(bits >> (8 * i));
}

double get_f64(const std::uint8_t* src) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(src[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

}  // namespace

void TensorContainer::add(std::string name, Matrix m) {
  if (contains(name)) fail_validation("duplicate tensor name '" + name + "'");
  tensors_.push_back({std::move(name), std::move(m)});
}

void TensorContainer::add(std::string name, PackedTensor p) {
  if (contains(name)) fail_validation("duplicate tensor name '" + name + "'");
  if (p.bits < 1 || p.bits > 8) fail_validation("packed tensor bits must be 1..8");
  if (element_count(p.shape) != p.codes.size()) fail_validation("packed tensor shape/code mismatch");
  tensors_.push_back({std::move(name), std::move(p)});
}

const NamedTensor* TensorContainer::find(const std::string& name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return &t;
  return nullptr;
}

bool TensorContainer::contains(const std::string& name) const { return find(name) != nullptr; }

const Matrix& TensorContainer::matrix(const std::string& name) const {
  const auto* t = find(name);
  if (t == nullptr || !std::holds_alternative<Matrix>(t->value)) {
    fail_validation("container has no f64 tensor '" + name + "'");
  }
  return std::get<Matrix>(t->value);
}

const PackedTensor& TensorContainer::packed(const std::string& name) const {
  const auto* t = find(name);
  if (t == nullptr || !std::holds_alternative<PackedTensor>(t->value)) {
    fail_validation("container has no packed tensor '" + name + "'");
  }
  return std::get<PackedTensor>(t->value);
}

std::vector<std::uint8_t> TensorContainer::serialize() const {
  nlohmann::json entries = nlohmann::json::array();
  std::vector<std::vector<std::uint8_t>> payloads;
  std::size_t offset = 0;
  for (const auto& t : tensors_) {
    nlohmann::json e;
    e["name"] = t.name;
    std::vector<std::uint8_t> payload;
    if (const auto* m = std::get_if<Matrix>(&t.value)) {
      e["dtype"] = "f64";
      e["shape"] = {m->rows(), m->cols()};
      payload.resize(m->size() * 8);
      for (std::size_t i = 0; i < m->size(); ++i) put_f64(payload.data() + 8 * i, m->data()[i]);
    } else {
      const auto& p = std::get<PackedTensor>(t.value);
      e["dtype"] = "u8-packed";
      e["shape"] = p.shape;
      e["bits"] = p.bits;
      payload = pack_codes(p.codes, p.bits);
    }
    e["offset"] = offset;
    e["byte_len"] = payload.size();
    offset = align_up(offset + payload.size());
    entries.push_back(std::move(e));
    payloads.push_back(std::move(payload));
  }
  nlohmann::json header = {{"tensors", entries}, {"meta", meta_}};
  std::string text = header.dump();
  text.append(align_up(kPreamble + text.size()) - kPreamble - text.size(), ' ');

  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  out.push_back(kVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  const std::size_t data_start = out.size();
  for (std::size_t i = 0; i < payloads.size(); ++i) {
    const std::size_t at = data_start + entries[i]["offset"].get<std::size_t>();
    out.resize(at, 0);
    out.insert(out.end(), payloads[i].begin(), payloads[i].end());
  }
  out.resize(data_start + offset, 0);
  return out;
}

TensorContainer TensorContainer::deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kPreamble || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    fail_validation("not a PALU container (bad magic)");
  }
  if (bytes[4] != kVersion) fail_validation("unsupported container version " + std::to_string(bytes[4]));
  const std::size_t header_len = get_u32(bytes.subspan(5, 4));
  if (kPreamble + header_len > bytes.size()) fail_validation("container header exceeds file size");
  const std::size_t data_start = kPreamble + header_len;
  const auto data = bytes.subspan(data_start);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + kPreamble, bytes.begin() + static_cast<std::ptrdiff_t>(data_start));
  } catch (const nlohmann::json::exception& e) {
    fail_validation(std::string("container header is not valid JSON: ") + e.what());
  }

  TensorContainer c;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  try {
    if (header.contains("meta")) c.meta_ = header["meta"];
    for (const auto& e : header.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto dtype = e.at("dtype").get<std::string>();
      const auto shape = e.at("shape").get<std::vector<std::size_t>>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto byte_len = e.at("byte_len").get<std::size_t>();
      if (offset % kAlign != 0) fail_validation("tensor '" + name + "' offset is not 8-byte aligned");
      if (offset > data.size() || byte_len > data.size() - offset) {
        fail_validation("tensor '" + name + "' lies outside the file");
      }
      ranges.emplace_back(offset, offset + byte_len);
      const std::size_t count = element_count(shape);
      const auto payload = data.subspan(offset, byte_len);
      if (dtype == "f64") {
        if (shape.size() != 2) fail_validation("f64 tensor '" + name + "' must be 2-D");
        if (byte_len != count * 8) fail_validation("tensor '" + name + "' byte_len does not match its shape");
        std::vector<double> values(count);
        for (std::size_t i = 0; i < count; ++i) values[i] = get_f64(payload.data() + 8 * i);
        c.add(name, Matrix(shape[0], shape[1], std::move(values)));
      } else if (dtype == "u8-packed") {
        const int bits = e.at("bits").get<int>();
        if (bits < 1 || bits > 8) fail_validation("tensor '" + name + "' has invalid bit width");
        // writers may pad the length to the alignment
        const std::size_t exact = packed_size(count, bits);
        if (byte_len != exact && byte_len != align_up(exact)) {
          fail_validation("tensor '" + name + "' byte_len does not match its shape");
        }
        c.add(name, PackedTensor{shape, bits, unpack_codes(payload.first(exact), count, bits)});
      } else {
        fail_validation("tensor '" + name + "' has unknown dtype '" + dtype + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail_validation(std::string("malformed container header: ") + e.what());
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i)
    if (ranges[i].first < ranges[i - 1].second) fail_validation("container tensors overlap");
  return c;
}

void TensorContainer::write(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_validation("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail_validation("failed writing '" + path.string() + "'");
}

TensorContainer TensorContainer::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_validation("cannot open '" + path.string() + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace palu
