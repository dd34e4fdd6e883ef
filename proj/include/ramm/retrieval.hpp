#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ramm/store.hpp"

namespace ramm {

enum class VectorFamily { kText, kImage };
enum class SelectMode { kTrain, kInfer };

struct Candidate {
  std::uint64_t pair_id = 0;
  std::size_t row = 0;  // row in the index
  std::optional<double> s_w, s_v;
  double s = 0;  // max of the present components
};

// Descending s, ascending pair_id on ties.
bool ranks_before(const Candidate& a, const Candidate& b);

struct SearchResult {
  std::vector<Candidate> items;
  bool short_index = false;      // index had fewer than r rows
  bool query_normalized = false;  // query was not unit norm (tolerance 1e-4)
};

// Exact scan with a size-r heap. Dot products accumulate in double.
SearchResult search_topr(std::span<const float> query, const EmbeddingIndex& index, VectorFamily family,
                         std::size_t r, std::optional<std::uint64_t> exclude = std::nullopt);

// Union by pair_id; entries from `top_w` first, then new ones from `top_v`.
std::vector<Candidate> merge_candidates(const std::vector<Candidate>& top_w, const std::vector<Candidate>& top_v);

// Computes absent s_w / s_v exactly against the index and refreshes s.
void fill_missing_scores(std::vector<Candidate>& pool, std::span<const float> query, const EmbeddingIndex& index);

struct RetrievalResult {
  SelectMode mode = SelectMode::kInfer;
  std::vector<Candidate> selected;
  std::size_t pool_size = 0;
  bool short_pool = false;  // pool smaller than r
};

inline constexpr double kSelectEpsilon = 1e-6;

// Sequential draws without replacement, p_j proportional to
// s_j - min(s) + kSelectEpsilon, renormalized after each draw.
RetrievalResult select_training(const std::vector<Candidate>& pool, std::size_t r, std::uint64_t seed);
RetrievalResult select_inference(const std::vector<Candidate>& pool, std::size_t r);

struct RetrieveOptions {
  std::size_t r = 4;
  SelectMode mode = SelectMode::kInfer;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> exclude;  // drop this pair_id from both searches
  bool fill_missing = true;
};

struct RetrieveStats {
  std::size_t searches = 0;
  std::size_t normalized_queries = 0;
};

// Query pathway from an image vector (already projected).
RetrievalResult retrieve_by_vector(std::span<const float> query, const EmbeddingIndex& index,
                                   const RetrieveOptions& opts, RetrieveStats* stats = nullptr);

// encode_image -> project -> dual search -> merge -> select. Refuses an index
// whose fingerprint differs from the model's.
RetrievalResult retrieve(const TensorF& patches, const ModelF& frozen, const EmbeddingIndex& index,
                         const RetrieveOptions& opts, RetrieveStats* stats = nullptr);

}  // namespace ramm
