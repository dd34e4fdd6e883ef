#include "ramm/store.hpp"

#include <cmath>
#include <cstring>

#include "ramm/bytes.hpp"

namespace ramm {

namespace {
constexpr char kIndexMagic[8] = {'R', 'A', 'M', 'M', 'I', 'D', 'X', '1'};

std::string hex(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}
}  // namespace

EmbeddingIndex::EmbeddingIndex(std::uint64_t fingerprint, std::size_t d_proj)
    : fingerprint_(fingerprint), d_proj_(d_proj) {
  if (d_proj == 0 || d_proj > 0xffff) throw std::invalid_argument("EmbeddingIndex: d_proj must be in [1, 65535]");
}

void EmbeddingIndex::append(std::uint64_t pair_id, SourceTag source, std::span<const float> text_vec,
                            std::span<const float> image_vec, std::string_view caption) {
  if (text_vec.size() != d_proj_ || image_vec.size() != d_proj_) {
    throw DimensionError("EmbeddingIndex::append: vector length != d_proj " + std::to_string(d_proj_));
  }
  if (!rows_.emplace(pair_id, ids_.size()).second) {
    throw BuildError("duplicate pair_id " + std::to_string(pair_id) + " (" + hex(pair_id) + ")");
  }
  ids_.push_back(pair_id);
  sources_.push_back(source);
  offsets_.push_back(captions_.size());
  text_.insert(text_.end(), text_vec.begin(), text_vec.end());
  image_.insert(image_.end(), image_vec.begin(), image_vec.end());
  for (char c : caption) captions_.push_back(c == '\n' || c == '\r' ? ' ' : c);
  captions_.push_back('\n');
}

std::span<const float> EmbeddingIndex::text_vec(std::size_t row) const {
  return {text_.data() + row * d_proj_, d_proj_};
}

std::span<const float> EmbeddingIndex::image_vec(std::size_t row) const {
  return {image_.data() + row * d_proj_, d_proj_};
}

std::string EmbeddingIndex::caption(std::size_t row) const {
  const std::size_t b = offsets_.at(row);
  if (b > captions_.size()) throw FormatError(FormatErrorCode::kBadHeader, "caption offset past sidecar end");
  const std::size_t e = captions_.find('\n', b);
  return captions_.substr(b, e == std::string::npos ? std::string::npos : e - b);
}

std::optional<std::size_t> EmbeddingIndex::find(std::uint64_t pair_id) const {
  auto it = rows_.find(pair_id);
  if (it == rows_.end()) return std::nullopt;
  return it->second;
}

std::uint64_t EmbeddingIndex::checksum() const {
  return fnv1a64(captions_, fnv1a64(encode()));
}

std::vector<std::uint8_t> EmbeddingIndex::encode() const {
  ByteWriter w;
  w.put_bytes(kIndexMagic, 8);
  w.put<std::uint16_t>(kVersion);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(d_proj_));
  w.put<std::uint64_t>(ids_.size());
  w.put<std::uint64_t>(fingerprint_);
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    w.put<std::uint64_t>(ids_[i]);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(sources_[i]));
    w.put<std::uint64_t>(offsets_[i]);
  }
  w.put_bytes(text_.data(), text_.size() * sizeof(float));
  w.put_bytes(image_.data(), image_.size() * sizeof(float));
  return std::move(w.buffer());
}

EmbeddingIndex EmbeddingIndex::decode(std::span<const std::uint8_t> bytes, std::string captions) {
  ByteReader r(bytes);
  char magic[8];
  r.get_bytes(magic, 8);
  if (std::memcmp(magic, kIndexMagic, 8) != 0) throw FormatError(FormatErrorCode::kBadMagic, "not a RAMMIDX1 file");
  const auto version = r.get<std::uint16_t>();
  if (version != kVersion) {
    throw FormatError(FormatErrorCode::kBadVersion, "unsupported RAMMIDX1 version " + std::to_string(version));
  }
  const auto d_proj = r.get<std::uint16_t>();
  const auto count = r.get<std::uint64_t>();
  const auto fingerprint = r.get<std::uint64_t>();
  if (d_proj == 0) throw FormatError(FormatErrorCode::kBadHeader, "RAMMIDX1 header has d_proj = 0");
  const std::uint64_t per_record = 17 + 2ull * d_proj * sizeof(float);
  if (count > r.remaining() / per_record) {
    throw FormatError(FormatErrorCode::kTruncated, "RAMMIDX1 body shorter than " + std::to_string(count) + " records");
  }
  EmbeddingIndex idx(fingerprint, d_proj);
  idx.ids_.resize(count);
  idx.sources_.resize(count);
  idx.offsets_.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    idx.ids_[i] = r.get<std::uint64_t>();
    const auto tag = r.get<std::uint8_t>();
    if (tag > static_cast<std::uint8_t>(SourceTag::kOther)) {
      throw FormatError(FormatErrorCode::kBadHeader, "unknown source tag " + std::to_string(tag));
    }
    idx.sources_[i] = static_cast<SourceTag>(tag);
    idx.offsets_[i] = r.get<std::uint64_t>();
    if (idx.offsets_[i] > captions.size()) {
      throw FormatError(FormatErrorCode::kBadHeader, "caption offset past sidecar end at record " + std::to_string(i));
    }
    if (!idx.rows_.emplace(idx.ids_[i], i).second) {
      throw FormatError(FormatErrorCode::kBadHeader, "duplicate pair_id " + hex(idx.ids_[i]));
    }
  }
  idx.text_.resize(count * d_proj);
  idx.image_.resize(count * d_proj);
  r.get_bytes(idx.text_.data(), idx.text_.size() * sizeof(float));
  r.get_bytes(idx.image_.data(), idx.image_.size() * sizeof(float));
  if (r.remaining() != 0) {
    throw FormatError(FormatErrorCode::kBadHeader, std::to_string(r.remaining()) + " trailing bytes after RAMMIDX1 body");
  }
  idx.captions_ = std::move(captions);
  return idx;
}

std::pair<TensorF, TensorF> embed_pair(const ModelF& model, const TokenSequence& caption, const TensorF& patches) {
  TensorF w = model.project_text(ops::slice_rows(model.encode_text(caption), 0, 1));
  return {std::move(w), embed_image(model, patches)};
}

TensorF embed_image(const ModelF& model, const TensorF& patches) {
  return model.project_image(ops::slice_rows(model.encode_image(patches), 0, 1));
}

EmbeddingIndex build_store(const Corpus& corpus, const ModelF& model, const Vocab& vocab, BuildReport* report) {
  const auto& cfg = model.config();
  EmbeddingIndex idx(model.retrieval_fingerprint(), cfg.d_proj);
  BuildReport local;
  for (const auto& p : corpus.pairs) {
    if (idx.find(p.pair_id)) throw BuildError("duplicate pair_id " + hex(p.pair_id) + " (" + p.article_id + ")");
    TensorF patches;
    try {
      patches = corpus.load_image(p);
      if (patches.rank() != 2 || patches.rows() != cfg.num_patches() || patches.cols() != cfg.d_patch) {
        throw DimensionError("image shape " + shape_str(patches.shape()) + " does not match the model");
      }
    } catch (const std::exception& e) {
      ++local.skipped;
      local.skipped_reasons.push_back(hex(p.pair_id) + ": " + e.what());
      continue;
    }
    auto [w, v] = embed_pair(model, tokenize(p.caption, vocab, cfg.max_text_len), patches);
    idx.append(p.pair_id, p.source, w.values(), v.values(), p.caption);
    ++local.encoded;
  }
  if (report) *report = std::move(local);
  return idx;
}

std::filesystem::path caption_sidecar(const std::filesystem::path& index_path) {
  auto p = index_path;
  p += ".captions";
  return p;
}

void save_index(const EmbeddingIndex& index, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file(path, index.encode());
  const auto& c = index.captions();
  write_file(caption_sidecar(path), std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(c.data()), c.size()));
}

EmbeddingIndex load_index(const std::filesystem::path& path, std::optional<std::uint64_t> expected_fingerprint) {
  const auto bytes = read_file(path);
  std::string captions;
  const auto side = caption_sidecar(path);
  if (!std::filesystem::exists(side)) throw FormatError(FormatErrorCode::kIo, "missing caption sidecar " + side.string());
  const auto cb = read_file(side);
  captions.assign(cb.begin(), cb.end());
  EmbeddingIndex idx = EmbeddingIndex::decode(bytes, std::move(captions));
  if (expected_fingerprint && *expected_fingerprint != idx.fingerprint()) {
    throw FormatError(FormatErrorCode::kFingerprintMismatch,
                      "index fingerprint " + hex(idx.fingerprint()) + " does not match the model's frozen encoders " +
                          hex(*expected_fingerprint) + "; rebuild the index with this checkpoint");
  }
  return idx;
}

}  // namespace ramm
