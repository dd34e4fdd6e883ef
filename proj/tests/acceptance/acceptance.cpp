// Acceptance suite: one PASS/FAIL line per criterion.
//   ramm_acceptance            run all
//   ramm_acceptance 2 5 10     run a subset

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../unit/corpus_golden.hpp"
#include "../unit/model_gradcheck.hpp"
#include "../unit/retrieval_oracle.hpp"
#include "../unit/test_util.hpp"
#include "ramm/bytes.hpp"
#include "ramm/gradcheck.hpp"
#include "ramm/harness.hpp"
#include "ramm/objectives.hpp"
#include "ramm/ops.hpp"

using namespace ramm;
using namespace ramm::testing;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets, fixed here.
constexpr double kGradTol = 1e-4;
constexpr double kGradBudgetS = 60;
constexpr int kRetrievalCorpora = 100;
constexpr std::size_t kMaxCorpus = 5000;
constexpr double kRetrievalBudgetS = 60;
constexpr int kPoolQueries = 1000;
constexpr int kContractSeeds = 50;
constexpr double kPermutationTol = 1e-6;
constexpr int kDraws = 10000;
constexpr double kFrequencyTol = 0.02;
constexpr double kRequiredGap = 0.10;
constexpr double kCausalBudgetS = 15 * 60;
constexpr double kLossTol = 1e-6;
constexpr double kEmaTol = 1e-7;
constexpr double kSumTol = 1e-9;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string sci(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("ramm_acceptance_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// ---------------------------------------------------------------- 1

double op_err(const std::function<TensorD(const TensorD&)>& fwd, const TensorD& analytic, const TensorD& x,
              const TensorD& w) {
  const auto fd = finite_difference_gradient([&](const TensorD& p) { return weighted_sum(fwd(p), w); }, x);
  return relative_error(analytic, fd);
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  std::map<std::string, double> worst;
  auto note = [&](const std::string& name, double e) { worst[name] = std::max(worst[name], e); };

  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t m = random_dim(rng, 1, 4), k = random_dim(rng, 1, 5), n = random_dim(rng, 1, 5);
    const auto a = random_tensor(Shape{m, k}, rng), b = random_tensor(Shape{k, n}, rng), w = random_tensor(Shape{m, n}, rng);
    const auto g = ops::matmul_backward(a, b, w);
    note("matmul", op_err([&](const TensorD& p) { return ops::matmul(p, b); }, g.da, a, w));
    note("matmul", op_err([&](const TensorD& p) { return ops::matmul(a, p); }, g.db, b, w));

    const auto x = random_tensor(Shape{m, n}, rng, 2.0);
    const auto y = ops::softmax_rows(x);
    note("softmax", op_err([](const TensorD& p) { return ops::softmax_rows(p); }, ops::softmax_rows_backward(y, w), x, w));
    note("gelu", op_err([](const TensorD& p) { return ops::gelu(p); }, ops::gelu_backward(x, w), x, w));

    const auto q = random_tensor(Shape{m, k}, rng), kk = random_tensor(Shape{n, k}, rng), v = random_tensor(Shape{n, 3}, rng);
    const auto wa = random_tensor(Shape{m, 3}, rng);
    const auto att = ops::scaled_dot_attention(q, kk, v);
    const auto ga = ops::scaled_dot_attention_backward(q, kk, v, att.probs, wa);
    note("attention", op_err([&](const TensorD& p) { return ops::scaled_dot_attention(p, kk, v).out; }, ga.dq, q, wa));
    note("attention", op_err([&](const TensorD& p) { return ops::scaled_dot_attention(q, p, v).out; }, ga.dk, kk, wa));
    note("attention", op_err([&](const TensorD& p) { return ops::scaled_dot_attention(q, kk, p).out; }, ga.dv, v, wa));

    const auto W = random_tensor(Shape{k, n}, rng), bias = random_tensor(Shape{n}, rng);
    const auto gl = ops::linear_backward(a, W, w);
    note("linear", op_err([&](const TensorD& p) { return ops::linear(p, W, bias); }, gl.dx, a, w));
    note("linear", op_err([&](const TensorD& p) { return ops::linear(a, p, bias); }, gl.dw, W, w));
    note("linear", op_err([&](const TensorD& p) { return ops::linear(a, W, p); }, gl.db, bias, w));

    const std::size_t d = random_dim(rng, 2, 6);
    const auto xl = random_tensor(Shape{m, d}, rng), gain = random_tensor(Shape{d}, rng), beta = random_tensor(Shape{d}, rng),
               wl = random_tensor(Shape{m, d}, rng);
    const auto ln = ops::layer_norm(xl, gain, beta, 1e-5);
    const auto gln = ops::layer_norm_backward(ln, gain, wl);
    note("layer_norm", op_err([&](const TensorD& p) { return ops::layer_norm(p, gain, beta, 1e-5).out; }, gln.dx, xl, wl));
    note("layer_norm", op_err([&](const TensorD& p) { return ops::layer_norm(xl, p, beta, 1e-5).out; }, gln.dgain, gain, wl));
    note("layer_norm", op_err([&](const TensorD& p) { return ops::layer_norm(xl, gain, p, 1e-5).out; }, gln.dbias, beta, wl));

    const auto xn = random_tensor(Shape{m, d}, rng);
    const auto nf = ops::l2_normalize_rows(xn);
    note("l2_normalize",
         op_err([](const TensorD& p) { return ops::l2_normalize_rows(p).out; }, ops::l2_normalize_rows_backward(xn, nf, wl), xn, wl));

    std::vector<std::size_t> targets(m);
    for (auto& t : targets) t = rng.below(n);
    const auto ce = ops::cross_entropy(x, targets);
    note("cross_entropy", relative_error(ce.grad, finite_difference_gradient(
                                                       [&](const TensorD& p) { return ops::cross_entropy(p, targets).value; }, x)));
    const auto soft = ops::softmax_rows(random_tensor(Shape{m, n}, rng));
    const auto sce = ops::soft_cross_entropy(x, soft);
    note("soft_cross_entropy",
         relative_error(sce.grad, finite_difference_gradient(
                                      [&](const TensorD& p) { return ops::soft_cross_entropy(p, soft).value; }, x)));
    const auto x2 = random_tensor(Shape{m, n}, rng);
    const auto kl = ops::symmetric_kl(x, x2);
    note("symmetric_kl", relative_error(kl.dp, finite_difference_gradient(
                                                    [&](const TensorD& p) { return ops::symmetric_kl(p, x2).value; }, x)));
    note("symmetric_kl", relative_error(kl.dq, finite_difference_gradient(
                                                    [&](const TensorD& p) { return ops::symmetric_kl(x, p).value; }, x2)));

    const std::size_t B = random_dim(rng, 2, 4);
    const auto ti = ops::l2_normalize_rows(random_tensor(Shape{B, 3}, rng)).out;
    const auto vi = ops::l2_normalize_rows(random_tensor(Shape{B, 3}, rng)).out;
    const auto itc = itc_loss(ti, vi, 0.07);
    note("itc", relative_error(itc.d_text, finite_difference_gradient([&](const TensorD& p) { return itc_loss(p, vi, 0.07).loss; }, ti)));
    note("itc", relative_error(itc.d_image, finite_difference_gradient([&](const TensorD& p) { return itc_loss(ti, p, 0.07).loss; }, vi)));
  }

  // full micro model: d=8, L_fuse=1, r=2
  const auto c = micro_config();
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    ModelD m(c, 500 + seed);
    VqaExample<double> ex{random_sequence(rng, c), random_patches(rng, c), {}, {}, seed % c.n_answers};
    for (int j = 0; j < 2; ++j) {
      ex.retrieved_text.push_back(random_sequence(rng, c));
      ex.retrieved_patches.push_back(random_patches(rng, c));
    }
    for (double rate : {0.0, 0.2}) {
      DropoutContext ctx{rate, 41, seed, 0, 0};
      auto grads = m.params().zeros_like();
      vqa_ce_loss<double>(m, {ex}, true, ctx, &grads);
      const auto res = check_param_grads(m, [&] { return vqa_ce_loss<double>(m, {ex}, true, ctx, nullptr); }, grads);
      note("model(r=2,dropout=" + sci(rate) + ")", res.worst);
    }
    std::vector<PretrainExample<double>> batch;
    for (int i = 0; i < 3; ++i) batch.push_back({random_sequence(rng, c), random_patches(rng, c)});
    TrainConfig cfg;
    cfg.seed = seed;
    ModelD mom(c, 900 + seed);
    auto grads = m.params().zeros_like();
    const DropoutContext ctx{0.1, 5, 1, 0, 0};
    pretrain_loss<double>(m, batch, cfg, 2, ctx, &grads, &mom);
    const auto res =
        check_param_grads(m, [&] { return pretrain_loss<double>(m, batch, cfg, 2, ctx, nullptr, &mom).total; }, grads);
    note("pretrain_objective", res.worst);
  }

  double w = 0;
  std::string wname;
  for (const auto& [k, v] : worst)
    if (v >= w) w = v, wname = k;
  const double t = seconds_since(t0);
  return {w < kGradTol && t < kGradBudgetS,
          "worst relative error " + sci(w) + " (" + wname + ") over " + std::to_string(worst.size()) +
              " op families, tol " + sci(kGradTol) + "; " + sci(t) + " s"};
}

// ---------------------------------------------------------------- 2

Outcome retrieval_exactness() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(202);
  const std::size_t rs[] = {1, 2, 4, 8};
  std::size_t mismatches = 0, checks = 0;
  for (int corpus = 0; corpus < kRetrievalCorpora; ++corpus) {
    const std::size_t n = corpus == 0 ? 1 : 1 + rng.below(kMaxCorpus);
    const std::size_t d = random_dim(rng, 2, 24);
    auto idx = oracle::random_index(rng, n, d, corpus);
    // duplicated vectors force exact score ties
    if (corpus % 4 == 1 && n >= 2) {
      const auto t = std::vector<float>(idx.text_vec(0).begin(), idx.text_vec(0).end());
      const auto v = std::vector<float>(idx.image_vec(0).begin(), idx.image_vec(0).end());
      for (int k = 0; k < 5; ++k) idx.append(rng.next_u64(), SourceTag::kSynth, t, v, "dup");
    }
    for (int qn = 0; qn < 4; ++qn) {
      const std::size_t r = rs[rng.below(4)];
      const auto q = qn == 0 && corpus % 4 == 1 ? std::vector<float>(idx.image_vec(0).begin(), idx.image_vec(0).end())
                                                 : oracle::random_unit(rng, d);
      const auto tw = search_topr(q, idx, VectorFamily::kText, r);
      const auto tv = search_topr(q, idx, VectorFamily::kImage, r);
      const auto ow = oracle::full_scan(q, idx, true, r);
      const auto ov = oracle::full_scan(q, idx, false, r);
      auto same = [&](const SearchResult& got, const std::vector<oracle::Scored>& want) {
        if (got.items.size() != want.size()) return false;
        for (std::size_t i = 0; i < want.size(); ++i)
          if (got.items[i].pair_id != want[i].id || got.items[i].s != want[i].s) return false;
        return true;
      };
      checks += 2;
      mismatches += !same(tw, ow) + !same(tv, ov);

      auto pool = merge_candidates(tw.items, tv.items);
      const auto opool = oracle::pool_of(ow, ov);
      ++checks;
      bool pool_ok = pool.size() == opool.size();
      for (const auto& cnd : pool) {
        auto it = opool.find(cnd.pair_id);
        if (it == opool.end()) {
          pool_ok = false;
          break;
        }
        const auto [sw, sv] = it->second;
        pool_ok = pool_ok && (cnd.s_w.has_value() == !std::isnan(sw)) && (cnd.s_v.has_value() == !std::isnan(sv));
        if (cnd.s_w && !std::isnan(sw)) pool_ok = pool_ok && *cnd.s_w == sw;
        if (cnd.s_v && !std::isnan(sv)) pool_ok = pool_ok && *cnd.s_v == sv;
      }
      mismatches += !pool_ok;

      // selection over the pool with both scores filled, against a sort of
      // exact dot products
      fill_missing_scores(pool, q, idx);
      std::vector<oracle::Scored> full;
      for (const auto& [id, unused] : opool) {
        const auto row = *idx.find(id);
        double a = 0, b = 0;
        for (std::size_t k = 0; k < d; ++k) {
          a += static_cast<double>(q[k]) * idx.text_vec(row)[k];
          b += static_cast<double>(q[k]) * idx.image_vec(row)[k];
        }
        full.push_back({id, std::max(a, b)});
      }
      std::sort(full.begin(), full.end(), [](const oracle::Scored& x, const oracle::Scored& y) {
        return x.s > y.s || (x.s == y.s && x.id < y.id);
      });
      if (full.size() > r) full.resize(r);
      const auto sel = select_inference(pool, r);
      ++checks;
      bool sel_ok = sel.selected.size() == full.size();
      for (std::size_t i = 0; sel_ok && i < full.size(); ++i)
        sel_ok = sel.selected[i].pair_id == full[i].id && sel.selected[i].s == full[i].s;
      mismatches += !sel_ok;
    }
  }
  const double t = seconds_since(t0);
  return {mismatches == 0 && t < kRetrievalBudgetS,
          std::to_string(mismatches) + " mismatches in " + std::to_string(checks) + " comparisons over " +
              std::to_string(kRetrievalCorpora) + " corpora; " + sci(t) + " s"};
}

// ---------------------------------------------------------------- 3

Outcome pool_bound() {
  Rng rng(303);
  const std::size_t rs[] = {1, 2, 4, 8};
  std::size_t violations = 0, counted = 0, lo_hits = 0, hi_hits = 0;
  std::vector<EmbeddingIndex> indices;
  for (int i = 0; i < 20; ++i) {
    const std::size_t d = random_dim(rng, 2, 16);
    auto idx = oracle::random_index(rng, 16 + rng.below(300), d, i);
    // near-duplicate text/image vectors make the two top-r lists overlap
    if (i % 2 == 0) {
      EmbeddingIndex tied(i, d);
      for (std::size_t row = 0; row < idx.size(); ++row) tied.append(idx.pair_id(row), SourceTag::kSynth, idx.image_vec(row), idx.image_vec(row), "x");
      idx = std::move(tied);
    }
    indices.push_back(std::move(idx));
  }
  for (int qn = 0; qn < kPoolQueries; ++qn) {
    const auto& idx = indices[rng.below(indices.size())];
    const std::size_t r = rs[rng.below(4)];
    if (idx.size() < 2 * r) continue;
    RetrieveOptions opts;
    opts.r = r;
    opts.mode = qn % 2 ? SelectMode::kTrain : SelectMode::kInfer;
    opts.seed = static_cast<std::uint64_t>(qn);
    const auto q = oracle::random_unit(rng, idx.d_proj());
    const auto res = retrieve_by_vector(q, idx, opts);
    ++counted;
    const std::size_t p = res.pool_size;
    lo_hits += p == r;
    hi_hits += p == 2 * r;
    if (p < r || p > 2 * r || res.selected.size() != r) ++violations;
  }
  return {violations == 0 && counted == static_cast<std::size_t>(kPoolQueries),
          std::to_string(violations) + " violations over " + std::to_string(counted) + " queries (|pool|=r " +
              std::to_string(lo_hits) + "x, |pool|=2r " + std::to_string(hi_hits) + "x)"};
}

// ---------------------------------------------------------------- 4

Outcome attention_contracts() {
  ModelConfig c = micro_config(16, 8);
  c.d = 16;
  c.n_head = 4;
  c.L_fuse = 2;
  c.d_proj = 8;
  Rng rng(404);
  std::size_t fail_a = 0, fail_b = 0, fail_c = 0, fail_d = 0;
  double worst_perm = 0;
  for (int seed = 0; seed < kContractSeeds; ++seed) {
    const ModelF m(c, 4000 + static_cast<std::uint64_t>(seed));
    const std::size_t r = 1 + rng.below(c.max_r);
    std::vector<TensorF> t{m.encode_text(random_sequence(rng, c))}, v{m.encode_image(random_patches<float>(rng, c))};
    for (std::size_t j = 0; j < r; ++j) {
      t.push_back(m.encode_text(random_sequence(rng, c)));
      v.push_back(m.encode_image(random_patches<float>(rng, c)));
    }
    FusionState<float> st;
    st.text = t;
    st.image = v;

    // (a), (b) on the retrieval step itself and on a whole fusion layer
    auto after = st;
    m.retrieval_attention(after, 0);
    const auto with = m.fusion_layer(st, true);
    const auto without = m.fusion_layer(st, false);
    for (std::size_t j = 0; j < st.streams(); ++j) {
      auto cls = [](const TensorF& x) { return ops::slice_rows(x, 0, 1); };
      auto rest = [](const TensorF& x) { return ops::slice_rows(x, 1, x.rows()); };
      if (j > 0) {
        fail_a += !(cls(after.text[j]) == cls(st.text[j]) && cls(after.image[j]) == cls(st.image[j]));
        fail_a += !(cls(with.text[j]) == cls(without.text[j]) && cls(with.image[j]) == cls(without.image[j]));
      }
      fail_b += !(rest(after.text[j]) == rest(st.text[j]) && rest(after.image[j]) == rest(st.image[j]));
      fail_b += !(rest(with.text[j]) == rest(without.text[j]) && rest(with.image[j]) == rest(without.image[j]));
    }

    // (c) permutation of retrieved pairs
    std::vector<std::size_t> perm(r);
    for (std::size_t j = 0; j < r; ++j) perm[j] = j;
    for (std::size_t j = r; j > 1; --j) std::swap(perm[j - 1], perm[rng.below(j)]);
    std::vector<TensorF> rt, rv, pt, pv;
    for (std::size_t j = 0; j < r; ++j) {
      rt.push_back(t[1 + j]);
      rv.push_back(v[1 + j]);
      pt.push_back(t[1 + perm[j]]);
      pv.push_back(v[1 + perm[j]]);
    }
    const auto a = m.fuse(t[0], v[0], rt, rv);
    const auto b = m.fuse(t[0], v[0], pt, pv);
    double diff = 0;
    for (std::size_t i = 0; i < a.text.size(); ++i) diff = std::max(diff, std::fabs(static_cast<double>(a.text[i]) - b.text[i]));
    for (std::size_t i = 0; i < a.image.size(); ++i) diff = std::max(diff, std::fabs(static_cast<double>(a.image[i]) - b.image[i]));
    worst_perm = std::max(worst_perm, diff);
    fail_c += diff > kPermutationTol;

    // (d) r=0 through the retrieval-enabled path vs the plain model
    const auto plain = m.fuse(t[0], v[0], {}, {}, false);
    const auto r0 = m.fuse(t[0], v[0], {}, {}, true);
    VqaExample<float> ex{random_sequence(rng, c), random_patches<float>(rng, c), {}, {}, 0};
    const auto l0 = vqa_forward<float>(m, ex, true, DropoutContext::off());
    const auto lp = vqa_forward<float>(m, ex, false, DropoutContext::off());
    fail_d += !(plain.text == r0.text && plain.image == r0.image && l0 == lp);
  }
  return {fail_a + fail_b + fail_c + fail_d == 0,
          "(a) " + std::to_string(fail_a) + " (b) " + std::to_string(fail_b) + " (c) " + std::to_string(fail_c) +
              " (d) " + std::to_string(fail_d) + " failures over " + std::to_string(kContractSeeds) +
              " seeds; worst permutation diff " + sci(worst_perm)};
}

// ---------------------------------------------------------------- 5

Outcome sampling_distribution() {
  struct Fixture {
    std::string name;
    std::vector<double> scores;
    std::size_t r;
  };
  const std::vector<Fixture> fixtures = {
      {"equal", {0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5}, 4},
      {"dominated", {0.9, 0.1, 0.1, 0.1, 0.1, 0.1}, 3},
      {"mixed", {0.81, 0.64, 0.62, 0.33, 0.30, 0.12, -0.05}, 4},
  };
  double worst = 0;
  std::string detail;
  for (const auto& f : fixtures) {
    std::vector<Candidate> pool;
    for (std::size_t i = 0; i < f.scores.size(); ++i) {
      Candidate cnd;
      cnd.pair_id = 1000 + i;
      cnd.row = i;
      cnd.s_v = f.scores[i];
      cnd.s = f.scores[i];
      pool.push_back(cnd);
    }
    const auto expect = oracle::inclusion_probabilities(oracle::shifted_weights(f.scores), f.r);
    std::vector<double> hits(pool.size(), 0);
    for (int draw = 0; draw < kDraws; ++draw)
      for (const auto& s : select_training(pool, f.r, hash_combine(0x5a11ULL, static_cast<std::uint64_t>(draw))).selected)
        hits[s.row] += 1;
    double fw = 0;
    for (std::size_t i = 0; i < pool.size(); ++i) fw = std::max(fw, std::fabs(hits[i] / kDraws - expect[i]));
    worst = std::max(worst, fw);
    detail += f.name + " " + sci(fw) + ", ";
  }
  return {worst <= kFrequencyTol, "max |freq - p| per fixture: " + detail + "tol " + sci(kFrequencyTol)};
}

// ---------------------------------------------------------------- 6

FormatErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.code();
  }
  return static_cast<FormatErrorCode>(0);
}

Outcome serialization() {
  const auto dir = scratch("formats");
  Rng rng(606);
  std::size_t bad = 0, checks = 0;

  for (int i = 0; i < 20; ++i) {
    Shape shape;
    const std::size_t rank = random_dim(rng, 1, 4);
    for (std::size_t k = 0; k < rank; ++k) shape.push_back(random_dim(rng, 1, 5));
    const auto tf = random_tensor<float>(shape, rng);
    const auto td = random_tensor<double>(shape, rng);
    save_tensor(tf, dir / "f.ten");
    save_tensor(td, dir / "d.ten");
    checks += 2;
    bad += !(load_tensor<float>(dir / "f.ten") == tf) + !(load_tensor<double>(dir / "d.ten") == td);
    ++checks;
    bad += encode_tensor(load_tensor<float>(dir / "f.ten")) != read_file(dir / "f.ten");
  }
  for (int i = 0; i < 5; ++i) {
    const auto idx = oracle::random_index(rng, random_dim(rng, 1, 300), random_dim(rng, 2, 16), rng.next_u64());
    save_index(idx, dir / "i.idx");
    const auto back = load_index(dir / "i.idx");
    checks += 2;
    bad += !(back == idx);
    bad += back.encode() != read_file(dir / "i.idx");
  }

  // corrupted headers
  const auto ten = encode_tensor(random_tensor<float>(Shape{3, 4}, rng));
  auto ten_case = [&](std::vector<std::uint8_t> bytes, FormatErrorCode want) {
    ++checks;
    bad += code_of([&] { decode_tensor<float>(bytes); }) != want;
  };
  auto t = ten;
  t[0] = 'X';
  ten_case(t, FormatErrorCode::kBadMagic);
  t = ten;
  t[8] = 3;
  ten_case(t, FormatErrorCode::kBadHeader);
  t = ten;
  t[9] = 0;
  ten_case(t, FormatErrorCode::kBadHeader);
  t = ten;
  for (int k = 0; k < 8; ++k) t[10 + k] = 0;
  ten_case(t, FormatErrorCode::kBadHeader);
  ten_case(std::vector<std::uint8_t>(ten.begin(), ten.end() - 1), FormatErrorCode::kTruncated);
  ten_case(std::vector<std::uint8_t>(ten.begin(), ten.begin() + 9), FormatErrorCode::kTruncated);
  t = ten;
  t.push_back(0);
  ten_case(t, FormatErrorCode::kBadHeader);

  const auto idx = oracle::random_index(rng, 10, 4, 0xabcULL);
  save_index(idx, dir / "good.idx");
  const auto bytes = read_file(dir / "good.idx");
  const auto captions = read_text(caption_sidecar(dir / "good.idx"));
  auto idx_case = [&](std::vector<std::uint8_t> b, FormatErrorCode want) {
    ++checks;
    bad += code_of([&] { EmbeddingIndex::decode(b, captions); }) != want;
  };
  auto b = bytes;
  b[3] = 'Q';
  idx_case(b, FormatErrorCode::kBadMagic);
  b = bytes;
  b[8] = 2;
  idx_case(b, FormatErrorCode::kBadVersion);
  b = bytes;
  b[10] = b[11] = 0;
  idx_case(b, FormatErrorCode::kBadHeader);
  b = bytes;
  b[19] = 0x7f;  // record count far beyond the body
  idx_case(b, FormatErrorCode::kTruncated);
  b = bytes;
  b[28 + 8] = 99;  // first record's source tag
  idx_case(b, FormatErrorCode::kBadHeader);
  idx_case(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 3), FormatErrorCode::kTruncated);
  b = bytes;
  b.push_back(1);
  idx_case(b, FormatErrorCode::kBadHeader);
  ++checks;
  bad += code_of([&] { load_index(dir / "good.idx", 0xdefULL); }) != FormatErrorCode::kFingerprintMismatch;
  fs::remove(caption_sidecar(dir / "good.idx"));
  ++checks;
  bad += code_of([&] { load_index(dir / "good.idx"); }) != FormatErrorCode::kIo;

  fs::remove_all(dir);
  return {bad == 0, std::to_string(bad) + " failures in " + std::to_string(checks) + " round-trip and corruption checks"};
}

// ---------------------------------------------------------------- 7

struct World {
  fs::path root;
  harness::VqaSplit train, test;
  Checkpoint pretrained;
  std::unique_ptr<harness::RetrievalSetup> retrieval;
};

World build_world(const harness::SyntheticSpec& spec, const fs::path& root, const TrainConfig& pt) {
  World w;
  w.root = root;
  harness::gen_synthetic(spec, root);
  const auto corpus = read_corpus(root / "corpus");
  w.train = harness::read_vqa(root / "vqa" / "train.jsonl");
  w.test = harness::read_vqa(root / "vqa" / "test.jsonl");
  std::vector<std::string> texts;
  for (const auto& p : corpus.pairs) texts.push_back(p.caption);
  for (const auto* split : {&w.train, &w.test})
    for (const auto& it : split->items) texts.push_back(it.question);
  auto mc = harness::desk_model_config();
  mc.patch_grid = spec.patch_grid;
  mc.d_patch = spec.d_patch;
  w.pretrained = harness::pretrain(corpus, harness::build_vocab(texts), mc, pt);
  save_checkpoint(w.pretrained, root / "pretrained");
  const ModelF frozen(w.pretrained.config, w.pretrained.params);
  save_index(build_store(corpus, frozen, w.pretrained.vocab), root / "corpus.idx");
  w.retrieval = std::make_unique<harness::RetrievalSetup>(
      harness::open_retrieval(root / "pretrained", root / "corpus.idx", root / "corpus"));
  return w;
}

Outcome causal_benefit() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto dir = scratch("causal");
  double gap_sum = 0;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    harness::SyntheticSpec spec;
    spec.retrieval_required_fraction = 0.5;
    spec.seed = seed;
    auto pt = harness::desk_pretrain_config();
    pt.seed = seed;
    auto w = build_world(spec, dir / ("seed" + std::to_string(seed)), pt);
    double acc[2] = {0, 0};
    int slot = 0;
    for (std::size_t r : {0u, 4u}) {
      harness::FinetuneOptions opts;
      opts.r = r;
      opts.train = harness::desk_finetune_config();
      opts.train.seed = seed;
      const auto model = harness::finetune(w.pretrained, w.train, w.retrieval.get(), opts);
      const auto rep = harness::evaluate(model, w.test, r ? w.retrieval.get() : nullptr, r);
      acc[slot++] = rep.retrieval_required.accuracy();
    }
    gap_sum += acc[1] - acc[0];
    per_seed += "seed " + std::to_string(seed) + ": r=0 " + sci(acc[0]) + " r=4 " + sci(acc[1]) + "; ";
  }
  fs::remove_all(dir);
  const double gap = gap_sum / 3;
  const double t = seconds_since(t0);
  return {gap >= kRequiredGap && t < kCausalBudgetS,
          per_seed + "mean gap " + sci(100 * gap) + " points (need " + sci(100 * kRequiredGap) + "); " + sci(t) + " s"};
}

// ---------------------------------------------------------------- 8

Outcome sweep() {
  const auto dir = scratch("sweep");
  harness::SyntheticSpec spec;
  spec.n_clusters = 16;
  spec.test_items = 32;
  spec.seed = 8;
  auto pt = harness::desk_pretrain_config();
  pt.epochs = 1;
  auto w = build_world(spec, dir, pt);
  harness::FinetuneOptions opts;
  opts.train = harness::desk_finetune_config();
  opts.train.epochs = 2;
  const std::vector<std::size_t> rs(std::begin(harness::kSweepR), std::end(harness::kSweepR));
  const auto rows = harness::sweep_r(w.pretrained, w.train, w.test, w.retrieval.get(), rs, opts);
  bool ok = rows.size() == rs.size();
  for (std::size_t i = 0; ok && i < rows.size(); ++i) {
    ok = rows[i].r == rs[i] && rows[i].report.overall.total == w.test.items.size() &&
         rows[i].report.header.str("r") == std::to_string(rs[i]);
    for (const auto& it : rows[i].report.items) ok = ok && it.retrieved.size() == rs[i];
  }
  std::istringstream table(harness::sweep_text(rows));
  std::string line, shape;
  std::size_t lines = 0;
  while (std::getline(table, line)) ++lines;
  ok = ok && lines == rs.size() + 1;
  for (const auto& row : rows) shape += std::to_string(row.r) + ":" + sci(row.report.overall.accuracy()) + " ";
  fs::remove_all(dir);
  return {ok, std::to_string(rows.size()) + " rows over identical splits (r:accuracy " + shape + ")"};
}

// ---------------------------------------------------------------- 9

Outcome corpus_golden() {
  const fs::path fixture = fs::path(RAMM_FIXTURE_DIR) / "corpus";
  const auto r = harvest_dir(fixture, SectionMatcher(), NoteFilter{});
  bool ok = note_rows(r.notes) == read_tsv((fixture / "expected_notes.tsv").string()) &&
            pair_rows(r.pairs) == read_tsv((fixture / "expected_pairs.tsv").string()) &&
            summary_rows(r.report) == read_tsv((fixture / "expected_summary.txt").string());
  const auto dir = scratch("corpus");
  emit_corpus(r, fixture, dir / "a");
  const auto again = harvest_dir(dir / "a" / "articles", SectionMatcher(), NoteFilter{});
  emit_corpus(again, dir / "a" / "articles", dir / "b");
  ok = ok && pair_rows(again.pairs) == pair_rows(r.pairs) && note_rows(again.notes) == note_rows(r.notes);
  ok = ok && read_text(dir / "a" / "corpus.jsonl") == read_text(dir / "b" / "corpus.jsonl");
  emit_corpus(r, fixture, dir / "a");
  ok = ok && read_text(dir / "a" / "corpus.jsonl") == read_text(dir / "b" / "corpus.jsonl");
  fs::remove_all(dir);
  return {ok, std::to_string(r.notes.size()) + " notes, " + std::to_string(r.pairs.size()) +
                  " pairs match the golden files; re-harvest of emitted output is identical"};
}

// ---------------------------------------------------------------- 10

Outcome losses() {
  double worst_itc = 0, worst_mlm = 0, worst_itm = 0, worst_ema = 0, worst_sum = 0;
  for (std::size_t B : {2u, 3u, 5u, 16u}) {
    TensorD same(Shape{B, 4});
    for (std::size_t i = 0; i < B; ++i) same(i, 1) = 1;
    worst_itc = std::max(worst_itc, std::fabs(itc_loss(same, same, 0.07).loss - std::log(static_cast<double>(B))));
  }
  for (std::size_t V : {5u, 12u, 100u}) {
    TokenSequence seq{{Vocab::kCls, 4, 4, 4, 4}};
    const auto m = mask_tokens(seq, 0.5, V, V);
    worst_mlm = std::max(worst_mlm, std::fabs(mlm_loss(TensorD(Shape{seq.size(), V}), m).value - std::log(static_cast<double>(V))));
  }
  std::vector<std::size_t> labels{0, 1, 1, 0, 1};
  worst_itm = std::fabs(itm_loss(TensorD(Shape{5, 2}), labels).loss - std::log(2.0));

  // the same uniform cases through the pretraining objective: zeroed output
  // heads and projections give flat logits and similarities
  const auto c = micro_config();
  Rng rng(1010);
  {
    ModelD m(c, 77);
    for (const char* name : {"head.itm.fc2.W", "head.itm.fc2.b", "head.mlm.fc2.W", "head.mlm.fc2.b", "proj_text.W",
                             "proj_text.b", "proj_image.W", "proj_image.b"})
      m.params().at(name) = TensorD(m.params().at(name).shape());
    std::vector<PretrainExample<double>> batch;
    for (int i = 0; i < 4; ++i) batch.push_back({random_sequence(rng, c), random_patches(rng, c)});
    TrainConfig cfg;
    const auto l = pretrain_loss<double>(m, batch, cfg, 0, DropoutContext::off(), nullptr);
    worst_itc = std::max(worst_itc, std::fabs(l.itc - std::log(4.0)));
    worst_itm = std::max(worst_itm, std::fabs(l.itm - std::log(2.0)));
    worst_mlm = std::max(worst_mlm, std::fabs(l.mlm - std::log(static_cast<double>(c.vocab_size))));
  }

  for (double d : {0.5, 0.995, 0.999}) {
    ParamStore<double> t, o;
    t.add("w", random_tensor(Shape{4, 3}, rng));
    o.add("w", random_tensor(Shape{4, 3}, rng));
    const auto t0 = t;
    for (int k = 1; k <= 20; ++k) {
      ema_update(t, o, d);
      const double dk = std::pow(d, k);
      for (std::size_t i = 0; i < 12; ++i)
        worst_ema = std::max(worst_ema, std::fabs(t[0][i] - (dk * t0[0][i] + (1 - dk) * o[0][i])));
    }
  }

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ModelD m(c, 2000 + seed);
    std::vector<PretrainExample<double>> batch;
    const std::size_t B = 2 + seed % 3;
    for (std::size_t i = 0; i < B; ++i) batch.push_back({random_sequence(rng, c), random_patches(rng, c)});
    TrainConfig cfg;
    cfg.seed = seed;
    const auto l = pretrain_loss<double>(m, batch, cfg, seed, DropoutContext{0.1, seed, 0, 0, 0}, nullptr);
    worst_sum = std::max(worst_sum, std::fabs(l.total - (l.itc + l.itm + l.mlm)));
  }
  const bool ok = worst_itc <= kLossTol && worst_mlm <= kLossTol && worst_itm <= kLossTol && worst_ema <= kEmaTol &&
                  worst_sum <= kSumTol;
  return {ok, "itc " + sci(worst_itc) + ", mlm " + sci(worst_mlm) + ", itm " + sci(worst_itm) + ", ema " +
                  sci(worst_ema) + ", sum " + sci(worst_sum)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"retrieval exactness", retrieval_exactness},
      {"pool bound", pool_bound},
      {"retrieval-attention contracts", attention_contracts},
      {"sampling distribution", sampling_distribution},
      {"serialization", serialization},
      {"causal retrieval benefit", causal_benefit},
      {"r-sweep", sweep},
      {"corpus golden", corpus_golden},
      {"losses", losses},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::atoi(argv[i])));

  std::size_t passed = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    ++ran;
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    passed += out.pass;
    std::cout << (out.pass ? "[PASS] " : "[FAIL] ") << i + 1 << " " << criteria[i].first << ": " << out.detail
              << std::endl;
  }
  std::cout << passed << "/" << ran << " criteria passed" << std::endl;
  return passed == ran ? 0 : 1;
}
