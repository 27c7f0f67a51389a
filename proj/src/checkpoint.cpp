// SPDX-License-Identifier: Apache-2.0
#include "moqe/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>

namespace moqe {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

Digest sha256(std::span<const std::uint8_t> bytes) { return Hasher().update(bytes).finish(); }

std::string to_hex(const Digest& d) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (std::uint8_t b : d) {
    s.push_back(kHex[b >> 4]);
    s.push_back(kHex[b & 15]);
  }
  return s;
}

Digest digest_from_hex(const std::string& hex) {
  if (hex.size() != 64) throw DataError("digest must be 64 hex characters");
  Digest d{};
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw DataError("bad hex digit in digest");
  };
  for (std::size_t i = 0; i < 32; ++i) d[i] = static_cast<std::uint8_t>(nib(hex[2 * i]) << 4 | nib(hex[2 * i + 1]));
  return d;
}

Hasher::Hasher() : ctx_(EVP_MD_CTX_new()) {
  EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr);
}

Hasher::~Hasher() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

Hasher& Hasher::update(std::span<const std::uint8_t> bytes) {
  EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), bytes.data(), bytes.size());
  return *this;
}

Hasher& Hasher::update(std::string_view s) {
  return update({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

Hasher& Hasher::update(std::span<const Real> values) {
  return update({reinterpret_cast<const std::uint8_t*>(values.data()), values.size() * sizeof(Real)});
}

Hasher& Hasher::update(std::int64_t v) { return update({reinterpret_cast<const std::uint8_t*>(&v), sizeof v}); }

Digest Hasher::finish() {
  Digest d{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), d.data(), &len);
  EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr);
  return d;
}

namespace {

template <typename T>
void put(Bytes& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("container truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::size_t payload_bytes(DType dtype, Index n) {
  switch (dtype) {
    case DType::f64:
      return static_cast<std::size_t>(n) * 8;
    case DType::i8:
      return static_cast<std::size_t>(n);
    case DType::i4:
      return static_cast<std::size_t>((n + 1) / 2);
  }
  throw DataError("unknown dtype");
}

}  // namespace

void Container::add_f64(const std::string& name, const Shape& shape, std::span<const Real> values) {
  if (contains(name)) throw ContractError("duplicate container entry " + name);
  if (shape_numel(shape) != static_cast<Index>(values.size())) throw DimensionError("entry " + name + ": shape/value mismatch");
  Entry e{name, DType::f64, shape, {}};
  e.bytes.resize(values.size() * 8);
  std::memcpy(e.bytes.data(), values.data(), e.bytes.size());
  entries_.push_back(std::move(e));
}

void Container::add_codes(const std::string& name, const Shape& shape, std::span<const std::int8_t> codes, int bits) {
  if (contains(name)) throw ContractError("duplicate container entry " + name);
  if (shape_numel(shape) != static_cast<Index>(codes.size())) throw DimensionError("entry " + name + ": shape/code mismatch");
  Entry e{name, bits == 4 ? DType::i4 : DType::i8, shape, {}};
  if (bits == 8) {
    e.bytes.resize(codes.size());
    std::memcpy(e.bytes.data(), codes.data(), codes.size());
  } else if (bits == 4) {
    e.bytes.assign((codes.size() + 1) / 2, 0);
    for (std::size_t i = 0; i < codes.size(); ++i) {
      if (codes[i] < -8 || codes[i] > 7) throw DataError("entry " + name + ": code outside 4-bit range");
      const auto nibble = static_cast<std::uint8_t>(codes[i] & 0x0F);
      e.bytes[i / 2] |= (i % 2 == 0) ? nibble : static_cast<std::uint8_t>(nibble << 4);
    }
  } else {
    throw ConfigError("codes must be 4 or 8 bits");
  }
  entries_.push_back(std::move(e));
}

bool Container::contains(const std::string& name) const {
  for (const Entry& e : entries_)
    if (e.name == name) return true;
  return false;
}

const Entry& Container::entry(const std::string& name) const {
  for (const Entry& e : entries_)
    if (e.name == name) return e;
  throw DataError("container has no entry " + name);
}

Tensor Container::tensor(const std::string& name) const {
  const Entry& e = entry(name);
  if (e.dtype != DType::f64) throw DataError("entry " + name + " is not f64");
  VectorX v(e.numel());
  std::memcpy(v.data(), e.bytes.data(), e.bytes.size());
  return Tensor(e.shape, std::move(v));
}

std::vector<std::int8_t> Container::codes(const std::string& name) const {
  const Entry& e = entry(name);
  std::vector<std::int8_t> out(static_cast<std::size_t>(e.numel()));
  if (e.dtype == DType::i8) {
    std::memcpy(out.data(), e.bytes.data(), out.size());
  } else if (e.dtype == DType::i4) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      const std::uint8_t nibble = (i % 2 == 0) ? (e.bytes[i / 2] & 0x0F) : (e.bytes[i / 2] >> 4);
      out[i] = static_cast<std::int8_t>(nibble >= 8 ? static_cast<int>(nibble) - 16 : static_cast<int>(nibble));
    }
  } else {
    throw DataError("entry " + name + " does not hold integer codes");
  }
  return out;
}

Bytes Container::serialize() const {
  Bytes out;
  out.insert(out.end(), {'M', 'O', 'Q', 'E'});
  put<std::uint16_t>(out, kVersion);
  const std::string head = header.dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(head.size()));
  out.insert(out.end(), head.begin(), head.end());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  std::uint64_t offset = 0;
  for (const Entry& e : entries_) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.shape.size()));
    for (Index d : e.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    put<std::uint64_t>(out, offset);
    put<std::uint64_t>(out, e.bytes.size());
    offset += e.bytes.size();
  }
  for (const Entry& e : entries_) out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  return out;
}

Container Container::parse(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), "MOQE", 4) != 0) throw DataError("not a MOQE container (bad magic)");
  const auto version = r.get<std::uint16_t>();
  if (version != kVersion) throw DataError("unsupported container version " + std::to_string(version));
  Container c;
  const auto head_len = r.get<std::uint32_t>();
  auto head = r.take(head_len);
  try {
    c.header = nlohmann::json::parse(head.begin(), head.end());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("container header is not valid JSON: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  struct Slot {
    std::uint64_t offset, length;
  };
  std::vector<Slot> slots;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const auto name_len = r.get<std::uint16_t>();
    auto name = r.take(name_len);
    e.name.assign(name.begin(), name.end());
    const auto dtype = r.get<std::uint8_t>();
    if (dtype > 2) throw DataError("entry " + e.name + ": unknown dtype " + std::to_string(dtype));
    e.dtype = static_cast<DType>(dtype);
    const auto rank = r.get<std::uint8_t>();
    for (int d = 0; d < rank; ++d) e.shape.push_back(static_cast<Index>(r.get<std::uint64_t>()));
    const Slot s{r.get<std::uint64_t>(), r.get<std::uint64_t>()};
    if (s.length != payload_bytes(e.dtype, e.numel())) throw DataError("entry " + e.name + ": length does not match shape");
    slots.push_back(s);
    c.entries_.push_back(std::move(e));
  }
  const std::size_t base = r.pos();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (base + slots[i].offset + slots[i].length > bytes.size()) throw DataError("container payload truncated");
    auto src = bytes.subspan(base + slots[i].offset, slots[i].length);
    c.entries_[i].bytes.assign(src.begin(), src.end());
  }
  return c;
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DependencyError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void Container::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

Container Container::load(const std::filesystem::path& path) { return parse(read_file(path)); }

}  // namespace moqe
