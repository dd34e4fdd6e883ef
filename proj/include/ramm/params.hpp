#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ramm/tensor.hpp"

namespace ramm {

class StructuralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Manifest = std::vector<std::pair<std::string, Shape>>;

// Named tensors in insertion order. Layers hold indices into the store so
// the hot path never does string lookups.
template <typename T>
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor<T> value);
  std::size_t index(std::string_view name) const;
  bool contains(std::string_view name) const;

  Tensor<T>& operator[](std::size_t i) { return values_[i]; }
  const Tensor<T>& operator[](std::size_t i) const { return values_[i]; }
  Tensor<T>& at(std::string_view name) { return values_[index(name)]; }
  const Tensor<T>& at(std::string_view name) const { return values_[index(name)]; }

  const std::string& name(std::size_t i) const { return names_[i]; }
  std::size_t size() const { return values_.size(); }
  std::size_t scalar_count() const;

  Manifest manifest() const;
  ParamStore zeros_like() const;
  void zero();

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

  // Adds every tensor of `other` (same manifest) scaled by `s`.
  void axpy(T s, const ParamStore& other);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

// t <- decay * t + (1 - decay) * o for every tensor. Manifests must match.
template <typename T>
void ema_update(ParamStore<T>& target, const ParamStore<T>& online, double decay);

// Directory of "<name>.ten" RAMMTEN1 files plus manifest.txt with one
// "name d0 d1 ..." line per tensor.
void save_params(const ParamStore<float>& params, const std::filesystem::path& dir);
ParamStore<float> load_params(const std::filesystem::path& dir);

std::string format_manifest(const Manifest& manifest);
Manifest parse_manifest(const std::string& text);

}  // namespace ramm
