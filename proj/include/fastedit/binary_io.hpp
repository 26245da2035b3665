#pragma once

// Little-endian byte packing shared by the checkpoint and covariance store
// formats. Both formats end with a CRC-32 of every preceding byte.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "fastedit/errors.hpp"

namespace fastedit::io {

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large buffers.
  constexpr std::size_t kChunk = 1u << 30;
  for (std::size_t off = 0; off < bytes.size(); off += kChunk) {
    const auto n = static_cast<uInt>(std::min(kChunk, bytes.size() - off));
    crc = ::crc32(crc, bytes.data() + off, n);
  }
  return static_cast<std::uint32_t>(crc);
}

class ByteWriter {
 public:
  void put_magic(std::string_view magic) {
    for (char c : magic) buf_.push_back(static_cast<std::uint8_t>(c));
  }

  void put_u32(std::uint32_t v) { put_le(v, 4); }
  void put_u64(std::uint64_t v) { put_le(v, 8); }
  void put_i64(std::int64_t v) { put_le(static_cast<std::uint64_t>(v), 8); }
  void put_f64(double v) { put_le(std::bit_cast<std::uint64_t>(v), 8); }

  void put_f64s(std::span<const double> values) {
    buf_.reserve(buf_.size() + 8 * values.size());
    for (double v : values) put_f64(v);
  }

  /// Appends the CRC-32 of everything written so far.
  void seal() { put_u32(crc32_of(buf_)); }

  const std::vector<std::uint8_t>& bytes() const { return buf_; }
  std::vector<std::uint8_t> release() { return std::move(buf_); }

 private:
  void put_le(std::uint64_t v, int width) {
    for (int i = 0; i < width; ++i) {
      buf_.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xffu));
    }
  }

  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked reader; running past the end is reported as corruption.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::string get_magic(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::uint32_t get_u32() { return static_cast<std::uint32_t>(get_le(4)); }
  std::uint64_t get_u64() { return get_le(8); }
  std::int64_t get_i64() { return static_cast<std::int64_t>(get_le(8)); }
  double get_f64() { return std::bit_cast<double>(get_le(8)); }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  /// Checks that the trailing four bytes hold the CRC of everything before
  /// them. Call before parsing variable-length payload.
  void verify_trailer(std::string_view what) const {
    if (bytes_.size() < 4) {
      throw Error(ErrorKind::kCorruption, std::string(what) + ": file truncated");
    }
    const auto body = bytes_.first(bytes_.size() - 4);
    ByteReader tail(bytes_.last(4));
    if (tail.get_u32() != crc32_of(body)) {
      throw Error(ErrorKind::kCorruption, std::string(what) + ": checksum mismatch");
    }
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw Error(ErrorKind::kCorruption, "unexpected end of data");
    }
  }

  std::uint64_t get_le(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  return data;
}

/// Writes to a sibling temporary file, then renames over the target.
inline void write_file_atomic(const std::filesystem::path& path,
                              std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::kIo, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::kIo, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot rename onto " + path.string() + ": " + ec.message());
}

inline void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace fastedit::io
