#include "ramm/params.hpp"

#include <fstream>
#include <sstream>

#include "ramm/bytes.hpp"

namespace ramm {

template <typename T>
std::size_t ParamStore<T>::add(std::string name, Tensor<T> value) {
  if (lookup_.contains(name)) throw StructuralError("duplicate parameter " + name);
  if (value.empty()) throw StructuralError("parameter " + name + " is empty");
  lookup_.emplace(name, values_.size());
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

template <typename T>
std::size_t ParamStore<T>::index(std::string_view name) const {
  auto it = lookup_.find(std::string(name));
  if (it == lookup_.end()) throw StructuralError("unknown parameter " + std::string(name));
  return it->second;
}

template <typename T>
bool ParamStore<T>::contains(std::string_view name) const {
  return lookup_.contains(std::string(name));
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

template <typename T>
Manifest ParamStore<T>::manifest() const {
  Manifest m;
  m.reserve(size());
  for (std::size_t i = 0; i < size(); ++i) m.emplace_back(names_[i], values_[i].shape());
  return m;
}

template <typename T>
ParamStore<T> ParamStore<T>::zeros_like() const {
  ParamStore out;
  for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], Tensor<T>(values_[i].shape()));
  return out;
}

template <typename T>
void ParamStore<T>::zero() {
  for (auto& v : values_)
    for (auto& x : v.values()) x = T(0);
}

template <typename T>
void ParamStore<T>::axpy(T s, const ParamStore& other) {
  if (other.size() != size()) throw StructuralError("axpy: parameter count mismatch");
  for (std::size_t i = 0; i < size(); ++i) {
    auto dst = values_[i].values();
    auto src = other.values_[i].values();
    if (dst.size() != src.size()) throw StructuralError("axpy: shape mismatch for " + names_[i]);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += s * src[j];
  }
}

template <typename T>
void ema_update(ParamStore<T>& target, const ParamStore<T>& online, double decay) {
  if (target.manifest() != online.manifest()) {
    throw StructuralError("ema_update: target and online manifests differ");
  }
  const T d = static_cast<T>(decay);
  const T one_minus = static_cast<T>(1.0 - decay);
  for (std::size_t i = 0; i < target.size(); ++i) {
    auto t = target[i].values();
    auto o = online[i].values();
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = d * t[j] + one_minus * o[j];
  }
}

std::string format_manifest(const Manifest& manifest) {
  std::ostringstream os;
  for (const auto& [name, shape] : manifest) {
    os << name;
    for (auto d : shape) os << ' ' << d;
    os << '\n';
  }
  return os.str();
}

Manifest parse_manifest(const std::string& text) {
  Manifest m;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    Shape shape;
    std::size_t d;
    while (ls >> d) shape.push_back(d);
    if (name.empty() || shape.empty()) throw FormatError(FormatErrorCode::kBadHeader, "bad manifest line: " + line);
    m.emplace_back(std::move(name), std::move(shape));
  }
  return m;
}

void save_params(const ParamStore<float>& params, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < params.size(); ++i) save_tensor(params[i], dir / (params.name(i) + ".ten"));
  const std::string text = format_manifest(params.manifest());
  write_file(dir / "manifest.txt",
             std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

ParamStore<float> load_params(const std::filesystem::path& dir) {
  const auto bytes = read_file(dir / "manifest.txt");
  const Manifest manifest = parse_manifest(std::string(bytes.begin(), bytes.end()));
  ParamStore<float> params;
  for (const auto& [name, shape] : manifest) {
    auto t = load_tensor<float>(dir / (name + ".ten"));
    if (t.shape() != shape) {
      throw StructuralError("tensor " + name + " has shape " + shape_str(t.shape()) + ", manifest says " +
                            shape_str(shape));
    }
    params.add(name, std::move(t));
  }
  return params;
}

template class ParamStore<float>;
template class ParamStore<double>;
template void ema_update(ParamStore<float>&, const ParamStore<float>&, double);
template void ema_update(ParamStore<double>&, const ParamStore<double>&, double);

}  // namespace ramm
