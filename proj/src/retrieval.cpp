#include "ramm/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <unordered_map>

#include "ramm/rng.hpp"

namespace ramm {

namespace {

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

std::span<const float> family_vec(const EmbeddingIndex& index, VectorFamily f, std::size_t row) {
  return f == VectorFamily::kText ? index.text_vec(row) : index.image_vec(row);
}

double present_max(const Candidate& c) {
  if (c.s_w && c.s_v) return std::max(*c.s_w, *c.s_v);
  return c.s_w ? *c.s_w : *c.s_v;
}

}  // namespace

bool ranks_before(const Candidate& a, const Candidate& b) {
  if (a.s != b.s) return a.s > b.s;
  return a.pair_id < b.pair_id;
}

SearchResult search_topr(std::span<const float> query, const EmbeddingIndex& index, VectorFamily family,
                         std::size_t r, std::optional<std::uint64_t> exclude) {
  if (r == 0) throw std::invalid_argument("search_topr: r must be >= 1");
  if (query.size() != index.d_proj()) {
    throw DimensionError("search_topr: query length " + std::to_string(query.size()) + " != d_proj " +
                         std::to_string(index.d_proj()));
  }
  SearchResult out;
  std::vector<float> q(query.begin(), query.end());
  const double norm = std::sqrt(dot(q, q));
  if (std::fabs(norm - 1.0) > 1e-4) {
    out.query_normalized = true;
    if (norm > 0)
      for (auto& v : q) v = static_cast<float>(v / norm);
  }
  // max-heap under ranks_before keeps the current worst on top
  std::priority_queue<Candidate, std::vector<Candidate>, decltype(&ranks_before)> heap(&ranks_before);
  std::size_t eligible = 0;
  for (std::size_t row = 0; row < index.size(); ++row) {
    if (exclude && index.pair_id(row) == *exclude) continue;
    ++eligible;
    Candidate c;
    c.pair_id = index.pair_id(row);
    c.row = row;
    c.s = dot(q, family_vec(index, family, row));
    (family == VectorFamily::kText ? c.s_w : c.s_v) = c.s;
    if (heap.size() < r) {
      heap.push(c);
    } else if (ranks_before(c, heap.top())) {
      heap.pop();
      heap.push(c);
    }
  }
  out.short_index = eligible < r;
  out.items.resize(heap.size());
  for (std::size_t i = heap.size(); i-- > 0;) {
    out.items[i] = heap.top();
    heap.pop();
  }
  return out;
}

std::vector<Candidate> merge_candidates(const std::vector<Candidate>& top_w, const std::vector<Candidate>& top_v) {
  std::vector<Candidate> pool;
  std::unordered_map<std::uint64_t, std::size_t> at;
  for (const auto* list : {&top_w, &top_v}) {
    for (const auto& c : *list) {
      auto [it, fresh] = at.emplace(c.pair_id, pool.size());
      if (fresh) {
        pool.push_back(c);
      } else {
        auto& m = pool[it->second];
        if (c.s_w) m.s_w = c.s_w;
        if (c.s_v) m.s_v = c.s_v;
      }
    }
  }
  for (auto& c : pool) c.s = present_max(c);
  return pool;
}

void fill_missing_scores(std::vector<Candidate>& pool, std::span<const float> query, const EmbeddingIndex& index) {
  for (auto& c : pool) {
    if (!c.s_w) c.s_w = dot(query, index.text_vec(c.row));
    if (!c.s_v) c.s_v = dot(query, index.image_vec(c.row));
    c.s = present_max(c);
  }
}

RetrievalResult select_training(const std::vector<Candidate>& pool, std::size_t r, std::uint64_t seed) {
  if (pool.empty()) throw std::invalid_argument("select_training: empty pool");
  RetrievalResult out;
  out.mode = SelectMode::kTrain;
  out.pool_size = pool.size();
  if (pool.size() <= r) {
    out.short_pool = pool.size() < r;
    out.selected = pool;
    return out;
  }
  double lo = pool[0].s;
  for (const auto& c : pool) lo = std::min(lo, c.s);
  std::vector<double> w(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) w[i] = pool[i].s - lo + kSelectEpsilon;
  Rng rng(seed);
  for (std::size_t k = 0; k < r; ++k) {
    double total = 0;
    for (double x : w) total += x;
    double u = rng.uniform() * total;
    std::size_t pick = pool.size();
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (w[i] == 0) continue;
      pick = i;
      if (u < w[i]) break;
      u -= w[i];
    }
    out.selected.push_back(pool[pick]);
    w[pick] = 0;
  }
  return out;
}

RetrievalResult select_inference(const std::vector<Candidate>& pool, std::size_t r) {
  if (pool.empty()) throw std::invalid_argument("select_inference: empty pool");
  RetrievalResult out;
  out.mode = SelectMode::kInfer;
  out.pool_size = pool.size();
  out.short_pool = pool.size() < r;
  out.selected = pool;
  std::sort(out.selected.begin(), out.selected.end(), ranks_before);
  if (out.selected.size() > r) out.selected.resize(r);
  return out;
}

RetrievalResult retrieve_by_vector(std::span<const float> query, const EmbeddingIndex& index,
                                   const RetrieveOptions& opts, RetrieveStats* stats) {
  RetrievalResult empty;
  empty.mode = opts.mode;
  if (opts.r == 0 || index.empty()) {
    empty.short_pool = opts.r > 0;
    return empty;
  }
  auto tw = search_topr(query, index, VectorFamily::kText, opts.r, opts.exclude);
  auto tv = search_topr(query, index, VectorFamily::kImage, opts.r, opts.exclude);
  if (stats) {
    stats->searches += 2;
    stats->normalized_queries += tw.query_normalized;
  }
  auto pool = merge_candidates(tw.items, tv.items);
  if (pool.empty()) {
    empty.short_pool = true;
    return empty;
  }
  if (opts.fill_missing) {
    std::vector<float> q(query.begin(), query.end());
    if (tw.query_normalized) {
      const double n = std::sqrt(dot(q, q));
      if (n > 0)
        for (auto& v : q) v = static_cast<float>(v / n);
    }
    fill_missing_scores(pool, q, index);
  }
  return opts.mode == SelectMode::kTrain ? select_training(pool, opts.r, opts.seed) : select_inference(pool, opts.r);
}

RetrievalResult retrieve(const TensorF& patches, const ModelF& frozen, const EmbeddingIndex& index,
                         const RetrieveOptions& opts, RetrieveStats* stats) {
  if (frozen.retrieval_fingerprint() != index.fingerprint()) {
    throw FormatError(FormatErrorCode::kFingerprintMismatch,
                      "index was built by different encoder weights than the retrieval model");
  }
  if (opts.r == 0) return RetrievalResult{opts.mode, {}, 0, false};
  const TensorF q = embed_image(frozen, patches);
  return retrieve_by_vector(q.values(), index, opts, stats);
}

}  // namespace ramm
