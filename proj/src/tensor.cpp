#include "ramm/tensor.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include "ramm/bytes.hpp"

namespace ramm {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::size_t checked_numel(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  std::size_t n = 1;
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    n *= d;
  }
  return n;
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  data_.assign(checked_numel(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (checked_numel(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                         " values");
  }
}

template <typename T>
Tensor<T> Tensor<T>::matrix(std::initializer_list<std::initializer_list<T>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<T> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

template <typename T>
Tensor<T> Tensor<T>::vector(std::initializer_list<T> values) {
  return Tensor(Shape{values.size()}, std::vector<T>(values));
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() != 2) throw DimensionError("expected a matrix, got " + shape_str(shape_));
  return shape_[0];
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() != 2) throw DimensionError("expected a matrix, got " + shape_str(shape_));
  return shape_[1];
}

template <typename T>
std::span<T> Tensor<T>::row(std::size_t r) {
  const std::size_t c = cols();
  if (r >= rows()) throw IndexError("row " + std::to_string(r) + " out of range for " + shape_str(shape_));
  return std::span<T>(data_).subspan(r * c, c);
}

template <typename T>
std::span<const T> Tensor<T>::row(std::size_t r) const {
  const std::size_t c = cols();
  if (r >= rows()) throw IndexError("row " + std::to_string(r) + " out of range for " + shape_str(shape_));
  return std::span<const T>(data_).subspan(r * c, c);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  for (T v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
std::vector<std::uint8_t> encode_tensor(const Tensor<T>& t) {
  if (t.empty()) throw DimensionError("cannot serialize an empty tensor");
  if (t.rank() > 255) throw DimensionError("rank too large to serialize");
  ByteWriter w;
  w.put_bytes(kTensorMagic, sizeof kTensorMagic);
  w.put<std::uint8_t>(sizeof(T));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) w.put<std::uint64_t>(d);
  w.put_bytes(t.values().data(), t.size() * sizeof(T));
  return std::move(w.buffer());
}

template <typename T>
Tensor<T> decode_tensor(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  char magic[8];
  r.get_bytes(magic, 8);
  if (std::memcmp(magic, kTensorMagic, 8) != 0) throw FormatError(FormatErrorCode::kBadMagic, "not a RAMMTEN1 file");
  const auto precision = r.get<std::uint8_t>();
  if (precision != 4 && precision != 8) {
    throw FormatError(FormatErrorCode::kBadHeader, "bad precision tag " + std::to_string(precision));
  }
  const auto rank = r.get<std::uint8_t>();
  if (rank == 0) throw FormatError(FormatErrorCode::kBadHeader, "rank 0 tensor");
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& d : shape) {
    d = r.get<std::uint64_t>();
    if (d == 0) throw FormatError(FormatErrorCode::kBadHeader, "zero dimension");
    n *= d;
  }
  if (r.remaining() < n * precision) {
    throw FormatError(FormatErrorCode::kTruncated, "payload truncated: expected " +
                                                       std::to_string(n * precision) + " bytes");
  }
  if (r.remaining() > n * precision) throw FormatError(FormatErrorCode::kBadHeader, "trailing bytes after payload");
  std::vector<T> data(n);
  if (precision == 4) {
    std::vector<float> raw(n);
    r.get_bytes(raw.data(), n * 4);
    std::copy(raw.begin(), raw.end(), data.begin());
  } else {
    std::vector<double> raw(n);
    r.get_bytes(raw.data(), n * 8);
    std::copy(raw.begin(), raw.end(), data.begin());
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void save_tensor(const Tensor<T>& t, const std::filesystem::path& path) {
  write_file(path, encode_tensor(t));
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return decode_tensor<T>(bytes);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorCode::kIo, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrorCode::kIo, "write failed for " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(std::string_view s, std::uint64_t seed) {
  return fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()), seed);
}

template class Tensor<float>;
template class Tensor<double>;
template std::vector<std::uint8_t> encode_tensor(const Tensor<float>&);
template std::vector<std::uint8_t> encode_tensor(const Tensor<double>&);
template Tensor<float> decode_tensor(std::span<const std::uint8_t>);
template Tensor<double> decode_tensor(std::span<const std::uint8_t>);
template void save_tensor(const Tensor<float>&, const std::filesystem::path&);
template void save_tensor(const Tensor<double>&, const std::filesystem::path&);
template Tensor<float> load_tensor(const std::filesystem::path&);
template Tensor<double> load_tensor(const std::filesystem::path&);

}  // namespace ramm
