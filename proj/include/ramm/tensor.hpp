#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ramm {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Raised when a numeric routine is handed (or produces) a non-finite value.
class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FormatErrorCode {
  kBadMagic = 1,
  kBadVersion = 2,
  kTruncated = 3,
  kFingerprintMismatch = 4,
  kBadHeader = 5,
  kIo = 6,
};

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  FormatErrorCode code() const noexcept { return code_; }

 private:
  FormatErrorCode code_;
};

// Dense row-major array. A default-constructed tensor is "empty" (rank 0, no
// data) and is used as the absent marker; any tensor built from a shape has
// strictly positive dimensions.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows);
  static Tensor vector(std::initializer_list<T> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // 2-D views; a rank-1 tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r);
  std::span<const T> row(std::size_t r) const;

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  Tensor reshaped(Shape shape) const;

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename T>
struct DualTensor {
  Tensor<T> value;
  Tensor<T> gradient;  // empty in inference mode

  bool has_gradient() const { return !gradient.empty(); }
};

// RAMMTEN1: magic | precision u8 (4|8) | rank u8 | rank x u64 dims | payload.
// All multi-byte fields little-endian.
inline constexpr char kTensorMagic[8] = {'R', 'A', 'M', 'M', 'T', 'E', 'N', '1'};

template <typename T>
std::vector<std::uint8_t> encode_tensor(const Tensor<T>& t);

// Decodes either precision; values are converted to T.
template <typename T>
Tensor<T> decode_tensor(std::span<const std::uint8_t> bytes);

template <typename T>
void save_tensor(const Tensor<T>& t, const std::filesystem::path& path);

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

}  // namespace ramm
