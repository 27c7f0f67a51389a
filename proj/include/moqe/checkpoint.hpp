// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moqe/tensor.hpp"

namespace moqe {

using Bytes = std::vector<std::uint8_t>;
using Digest = std::array<std::uint8_t, 32>;

Digest sha256(std::span<const std::uint8_t> bytes);
std::string to_hex(const Digest& d);
Digest digest_from_hex(const std::string& hex);

// Incremental SHA-256 for digests over many pieces.
class Hasher {
 public:
  Hasher();
  ~Hasher();
  Hasher(const Hasher&) = delete;
  Hasher& operator=(const Hasher&) = delete;
  Hasher& update(std::span<const std::uint8_t> bytes);
  Hasher& update(std::string_view s);
  Hasher& update(std::span<const Real> values);
  Hasher& update(std::int64_t v);
  Digest finish();

 private:
  void* ctx_;
};

// Element encodings of a container entry.
enum class DType : std::uint8_t {
  f64 = 0,  // IEEE-754 binary64, little-endian
  i8 = 1,   // one signed byte per code
  i4 = 2,   // two signed nibbles per byte, low nibble first
};

struct Entry {
  std::string name;
  DType dtype = DType::f64;
  Shape shape;
  Bytes bytes;

  Index numel() const { return shape_numel(shape); }
};

// Binary checkpoint container shared by base models, experts, routers and
// datasets:
//
//   "MOQE" | u16 version | u32 header length | header (compact JSON)
//   u32 entry count | entries: u16 name length, name, u8 dtype, u8 rank,
//                               rank x u64 extent, u64 offset, u64 length
//   payload (offsets relative to its first byte)
//
// All integers little-endian. Serialization is a pure function of the
// contents, so save -> load -> save is bitwise stable.
class Container {
 public:
  static constexpr std::uint16_t kVersion = 1;

  nlohmann::json header = nlohmann::json::object();

  void add_f64(const std::string& name, const Shape& shape, std::span<const Real> values);
  void add_f64(const std::string& name, const Tensor& t) { add_f64(name, t.shape, {t.data.data(), static_cast<std::size_t>(t.numel())}); }
  // Codes must lie in the signed range of `bits` (4 or 8).
  void add_codes(const std::string& name, const Shape& shape, std::span<const std::int8_t> codes, int bits);

  bool contains(const std::string& name) const;
  const Entry& entry(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }
  Tensor tensor(const std::string& name) const;
  std::vector<std::int8_t> codes(const std::string& name) const;

  Bytes serialize() const;
  static Container parse(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Container load(const std::filesystem::path& path);

 private:
  std::vector<Entry> entries_;
};

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace moqe
