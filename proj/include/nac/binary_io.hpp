#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "nac/error.hpp"

namespace nac::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

// Appends little-endian scalars and arrays to a byte buffer.
class ByteWriter {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put_array(std::span<const T> values) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
    bytes_.insert(bytes_.end(), p, p + values.size_bytes());
  }

  void put_magic(std::string_view magic) { bytes_.insert(bytes_.end(), magic.begin(), magic.end()); }

  // u16 length prefix followed by the raw bytes.
  void put_short_string(std::string_view s);

  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

// Bounds-checked little-endian reader. Every failure throws FormatError
// carrying the byte offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get(std::string_view what) {
    require(sizeof(T), what);
    T value;
    std::memcpy(&value, bytes_.data() + offset_, sizeof(T));
    offset_ += sizeof(T);
    return value;
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  std::vector<T> get_array(std::uint64_t count, std::string_view what) {
    require_elements(count, sizeof(T), what);
    std::vector<T> out(count);
    std::memcpy(out.data(), bytes_.data() + offset_, count * sizeof(T));
    offset_ += count * sizeof(T);
    return out;
  }

  void expect_magic(std::string_view magic);
  std::string get_short_string(std::string_view what);

  std::uint64_t offset() const noexcept { return offset_; }
  std::uint64_t remaining() const noexcept { return bytes_.size() - offset_; }
  void expect_end() const;

 private:
  void require(std::uint64_t n, std::string_view what) const;
  void require_elements(std::uint64_t count, std::uint64_t width, std::string_view what) const;

  std::span<const std::uint8_t> bytes_;
  std::uint64_t offset_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

// Writes to a sibling temp file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

}  // namespace nac::io
