#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "tubelet/errors.hpp"

namespace tubelet::detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(std::span<const float> values) {
    out_.reserve(out_.size() + values.size() * 4);
    for (float f : values) u32(std::bit_cast<std::uint32_t>(f));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

/// Cursor over a byte buffer; every read names the field it is decoding so
/// truncation errors point at the failing field.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  void need(std::size_t n, const std::string& field) const {
    if (remaining() < n)
      throw FormatError(field, "truncated: need " + std::to_string(n) + " bytes, have " +
                                   std::to_string(remaining()));
  }
  std::span<const std::uint8_t> bytes(std::size_t n, const std::string& field) {
    need(n, field);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const std::string& field) { return bytes(1, field)[0]; }
  std::uint32_t u32(const std::string& field) {
    auto b = bytes(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::vector<float> f32(std::size_t count, const std::string& field) {
    if (count > remaining() / 4) need(count * 4, field);
    auto b = bytes(count * 4, field);
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t v = 0;
      for (int j = 0; j < 4; ++j) v |= static_cast<std::uint32_t>(b[4 * i + j]) << (8 * j);
      out[i] = std::bit_cast<float>(v);
    }
    return out;
  }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace tubelet::detail
