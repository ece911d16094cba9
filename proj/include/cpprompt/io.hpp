#pragma once

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "cpprompt/tensor.hpp"

namespace cpprompt {

inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large buffers.
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
    crc = ::crc32(crc, bytes.data() + offset, chunk);
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void put_string(const std::string& s) { put_bytes(s.data(), s.size()); }

  std::vector<std::uint8_t>& bytes() { return bytes_; }

  /// Appends the CRC-32 of everything written so far and writes the file.
  void finish(const std::filesystem::path& path) {
    put<std::uint32_t>(crc32(bytes_));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes_.data()), static_cast<std::streamsize>(bytes_.size()));
    if (!out) throw UsageError("write failed for " + path.string());
  }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string context)
      : bytes_(bytes), context_(std::move(context)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void get_bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) throw CorruptionError(context_ + ": unexpected end of data");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::string context_;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Checks the trailing CRC-32 and returns the body (everything before it).
inline std::span<const std::uint8_t> verified_body(const std::vector<std::uint8_t>& file, std::size_t min_body,
                                                   const std::string& context) {
  if (file.size() < min_body + sizeof(std::uint32_t)) throw CorruptionError(context + ": file truncated");
  const std::size_t body = file.size() - sizeof(std::uint32_t);
  std::uint32_t stored;
  std::memcpy(&stored, file.data() + body, sizeof(stored));
  std::span<const std::uint8_t> view(file.data(), body);
  if (crc32(view) != stored) throw CorruptionError(context + ": CRC-32 mismatch");
  return view;
}

}  // namespace detail

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// "CPPM" tensor container.
///
///   magic "CPPM" | version u16 | records... | CRC-32 u32 of all preceding bytes
///   record: name_len u32 | name | rank u32 | dims u64[rank] | data f64[numel]
///
/// All integers and floats are little-endian.
namespace cppm {

inline constexpr char kMagic[4] = {'C', 'P', 'P', 'M'};
inline constexpr std::uint16_t kVersion = 1;

inline void save(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  detail::ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint16_t>(kVersion);
  for (const auto& [name, t] : tensors) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_string(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put<std::uint64_t>(d);
    auto data = t.data();
    w.put_bytes(data.data(), data.size() * sizeof(double));
  }
  w.finish(path);
}

inline std::vector<NamedTensor> load(const std::filesystem::path& path) {
  const auto file = detail::read_file(path);
  const std::string ctx = "CPPM " + path.string();
  if (file.size() >= 4 && std::memcmp(file.data(), kMagic, 4) != 0) throw FormatError(ctx + ": bad magic");
  auto body = detail::verified_body(file, 6, ctx);
  detail::ByteReader r(body, ctx);
  r.get<std::uint32_t>();  // magic, checked above
  const auto version = r.get<std::uint16_t>();
  if (version != kVersion) throw VersionError(ctx + ": unsupported version " + std::to_string(version));
  std::vector<NamedTensor> out;
  while (r.remaining() > 0) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.get_string(name_len);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw CorruptionError(ctx + ": implausible rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    const std::size_t n = numel(shape);
    if (n > r.remaining() / sizeof(double)) throw CorruptionError(ctx + ": tensor " + name + " overruns file");
    std::vector<double> data(n);
    r.get_bytes(data.data(), n * sizeof(double));
    out.push_back({std::move(name), Tensor::from(std::move(shape), std::move(data))});
  }
  return out;
}

}  // namespace cppm

/// CRC-32 over names, shapes and raw bytes of a tensor list.
inline std::uint32_t content_checksum(const std::vector<NamedTensor>& tensors) {
  detail::ByteWriter w;
  for (const auto& [name, t] : tensors) {
    w.put_string(name);
    for (auto d : t.shape()) w.put<std::uint64_t>(d);
    auto data = t.data();
    w.put_bytes(data.data(), data.size() * sizeof(double));
  }
  return crc32(w.bytes());
}

}  // namespace cpprompt
