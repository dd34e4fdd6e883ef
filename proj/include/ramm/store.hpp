#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ramm/corpus.hpp"
#include "ramm/model.hpp"

namespace ramm {

class BuildError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precomputed unit-norm ITC vectors of a corpus. Immutable once built or
// loaded; all query paths take it by const reference.
class EmbeddingIndex {
 public:
  static constexpr std::uint16_t kVersion = 1;

  EmbeddingIndex() = default;
  EmbeddingIndex(std::uint64_t fingerprint, std::size_t d_proj);

  // Appends a record; vectors are stored as given. Throws BuildError on a
  // duplicate pair id.
  void append(std::uint64_t pair_id, SourceTag source, std::span<const float> text_vec,
              std::span<const float> image_vec, std::string_view caption);

  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  std::size_t d_proj() const { return d_proj_; }
  std::uint64_t fingerprint() const { return fingerprint_; }

  std::uint64_t pair_id(std::size_t row) const { return ids_[row]; }
  SourceTag source(std::size_t row) const { return sources_[row]; }
  std::uint64_t caption_offset(std::size_t row) const { return offsets_[row]; }
  std::span<const float> text_vec(std::size_t row) const;
  std::span<const float> image_vec(std::size_t row) const;
  std::string caption(std::size_t row) const;
  std::optional<std::size_t> find(std::uint64_t pair_id) const;

  const std::vector<float>& text_matrix() const { return text_; }
  const std::vector<float>& image_matrix() const { return image_; }
  const std::string& captions() const { return captions_; }

  // FNV-1a over the serialized form and sidecar.
  std::uint64_t checksum() const;

  std::vector<std::uint8_t> encode() const;
  // `captions` is the sidecar content.
  static EmbeddingIndex decode(std::span<const std::uint8_t> bytes, std::string captions);

  friend bool operator==(const EmbeddingIndex&, const EmbeddingIndex&) = default;

 private:
  std::uint64_t fingerprint_ = 0;
  std::size_t d_proj_ = 0;
  std::vector<std::uint64_t> ids_;
  std::vector<SourceTag> sources_;
  std::vector<std::uint64_t> offsets_;
  std::vector<float> text_, image_;
  std::string captions_;
  std::unordered_map<std::uint64_t, std::size_t> rows_;
};

struct BuildReport {
  std::size_t encoded = 0;
  std::size_t skipped = 0;
  std::vector<std::string> skipped_reasons;
};

// g_w(w_cls) and g_v(v_cls) for one pair, dropout off.
std::pair<TensorF, TensorF> embed_pair(const ModelF& model, const TokenSequence& caption, const TensorF& patches);
TensorF embed_image(const ModelF& model, const TensorF& patches);

// Encodes every pair in corpus order. Pairs whose image cannot be loaded or
// has the wrong shape are skipped and counted.
EmbeddingIndex build_store(const Corpus& corpus, const ModelF& model, const Vocab& vocab,
                           BuildReport* report = nullptr);

// Sidecar lives at path + ".captions".
std::filesystem::path caption_sidecar(const std::filesystem::path& index_path);
void save_index(const EmbeddingIndex& index, const std::filesystem::path& path);
// With `expected_fingerprint`, refuses an index built by other weights
// (FormatErrorCode::kFingerprintMismatch).
EmbeddingIndex load_index(const std::filesystem::path& path,
                          std::optional<std::uint64_t> expected_fingerprint = std::nullopt);

}  // namespace ramm
