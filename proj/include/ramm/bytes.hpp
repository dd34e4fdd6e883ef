#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ramm/tensor.hpp"

namespace ramm {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are written with native little-endian stores");

class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }

  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }

  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T value;
    require(sizeof(T));
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  void get_bytes(void* out, std::size_t n) {
    require(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void require(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(FormatErrorCode::kTruncated,
                        "truncated input: need " + std::to_string(n) + " bytes at offset " +
                            std::to_string(pos_) + ", have " + std::to_string(bytes_.size() - pos_));
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

// FNV-1a, 64-bit.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view s, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace ramm
