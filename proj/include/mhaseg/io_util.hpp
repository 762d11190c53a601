// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mhaseg/error.hpp"

namespace mhaseg::io {

std::vector<std::byte> read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary and renames over the target.
void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes);
void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

/// Little-endian append-only encoder used by the SMP1 and CKPT formats.
class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    const auto* p = reinterpret_cast<const std::byte*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(std::span<const std::byte> data) { bytes_.insert(bytes_.end(), data.begin(), data.end()); }
  void put_string(std::string_view s) {
    put_bytes(std::as_bytes(std::span<const char>(s.data(), s.size())));
  }
  const std::vector<std::byte>& bytes() const { return bytes_; }

 private:
  std::vector<std::byte> bytes_;
};

/// Bounds-checked reader; running off the end throws `short_error`.
class ByteReader {
 public:
  ByteReader(std::span<const std::byte> bytes, ErrorCode short_error) : bytes_(bytes), error_(short_error) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::span<const std::byte> get_bytes(std::size_t n) {
    need(n);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::string get_string(std::size_t n) {
    auto raw = get_bytes(n);
    return {reinterpret_cast<const char*>(raw.data()), raw.size()};
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) fail(error_, "unexpected end of data");
  }
  std::span<const std::byte> bytes_;
  ErrorCode error_;
  std::size_t pos_ = 0;
};

}  // namespace mhaseg::io
