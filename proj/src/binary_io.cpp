#include "nac/binary_io.hpp"

#include <fstream>
#include <iterator>
#include <limits>
#include <stdexcept>
#include <system_error>

namespace nac::io {

void ByteWriter::put_short_string(std::string_view s) {
  if (s.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw std::invalid_argument("string too long for u16 length prefix: " + std::string(s));
  }
  put(static_cast<std::uint16_t>(s.size()));
  bytes_.insert(bytes_.end(), s.begin(), s.end());
}

void ByteReader::require(std::uint64_t n, std::string_view what) const {
  if (n > bytes_.size() - offset_) {
    throw FormatError("truncated input reading " + std::string(what) + ": expected " +
                          std::to_string(offset_ + n) + " bytes, file has " +
                          std::to_string(bytes_.size()),
                      offset_);
  }
}

void ByteReader::require_elements(std::uint64_t count, std::uint64_t width,
                                  std::string_view what) const {
  if (count > remaining() / width) {
    const auto max = std::numeric_limits<std::uint64_t>::max();
    const auto need = count > (max - offset_) / width ? max : offset_ + count * width;
    throw FormatError("truncated input reading " + std::string(what) + ": expected " +
                          std::to_string(need) + " bytes, file has " +
                          std::to_string(bytes_.size()),
                      offset_);
  }
}

void ByteReader::expect_magic(std::string_view magic) {
  require(magic.size(), "magic");
  if (std::memcmp(bytes_.data() + offset_, magic.data(), magic.size()) != 0) {
    throw FormatError("bad magic, expected \"" + std::string(magic) + "\"", offset_);
  }
  offset_ += magic.size();
}

std::string ByteReader::get_short_string(std::string_view what) {
  auto len = get<std::uint16_t>(what);
  require(len, what);
  std::string s(reinterpret_cast<const char*>(bytes_.data() + offset_), len);
  offset_ += len;
  return s;
}

void ByteReader::expect_end() const {
  if (offset_ != bytes_.size()) {
    throw FormatError("trailing bytes: expected " + std::to_string(offset_) +
                          " bytes, file has " + std::to_string(bytes_.size()),
                      offset_);
  }
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

}  // namespace nac::io
