#include <doctest.h>

#include <cmath>
#include <set>

#include "model_gradcheck.hpp"
#include "ramm/objectives.hpp"
#include "test_util.hpp"

using namespace ramm;
using namespace ramm::testing;

namespace {

TensorD rows(std::initializer_list<std::initializer_list<double>> r) {
  TensorD t(Shape{r.size(), r.begin()->size()});
  std::size_t i = 0;
  for (auto& row : r)
    for (double v : row) t[i++] = v;
  return t;
}

TensorD unit_rows(Rng& rng, std::size_t n, std::size_t d) {
  TensorD t = random_tensor(Shape{n, d}, rng);
  return ops::l2_normalize_rows(t).out;
}

// Independent InfoNCE: both directions, direct log-sum-exp per row.
double itc_oracle(const TensorD& t, const TensorD& v, double tau) {
  const std::size_t B = t.rows();
  auto sim = [&](std::size_t i, std::size_t j) {
    double s = 0;
    for (std::size_t k = 0; k < t.cols(); ++k) s += v(i, k) * t(j, k);
    return s / tau;
  };
  double i2t = 0, t2i = 0;
  for (std::size_t i = 0; i < B; ++i) {
    double zi = 0, zt = 0;
    for (std::size_t j = 0; j < B; ++j) {
      zi += std::exp(sim(i, j));
      zt += std::exp(sim(j, i));
    }
    i2t += std::log(zi) - sim(i, i);
    t2i += std::log(zt) - sim(i, i);
  }
  return 0.5 * (i2t + t2i) / static_cast<double>(B);
}

}  // namespace

TEST_CASE("itc_loss closed forms") {
  // matched pairs identical, cross pairs orthogonal, tau = 1
  TensorD a = rows({{1, 0}, {0, 1}});
  const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(expect == doctest::Approx(0.3133).epsilon(1e-4));
  CHECK(itc_loss(a, a, 1.0).loss == doctest::Approx(expect).epsilon(1e-12));

  double prev = itc_loss(a, a, 1.0).loss;
  for (double tau : {0.5, 0.1}) {
    const double l = itc_loss(a, a, tau).loss;
    CHECK(l < prev);
    prev = l;
  }

  // every pair equally similar -> ln B
  for (std::size_t B : {2u, 3u, 7u}) {
    TensorD same(Shape{B, 3});
    for (std::size_t i = 0; i < B; ++i) same(i, 0) = 1;
    CHECK(std::fabs(itc_loss(same, same, 0.07).loss - std::log(static_cast<double>(B))) < 1e-6);
  }
  CHECK_THROWS_AS(itc_loss(rows({{1, 0}}), rows({{1, 0}}), 0.07), std::invalid_argument);
}

TEST_CASE("itc_loss: oracle, symmetry, margin monotonicity, gradient") {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const std::size_t B = random_dim(rng, 2, 6), d = random_dim(rng, 2, 5);
    TensorD w = unit_rows(rng, B, d), v = unit_rows(rng, B, d);
    const auto r = itc_loss(w, v, 0.07);
    CHECK(r.loss == doctest::Approx(itc_oracle(w, v, 0.07)).epsilon(1e-10));
    CHECK(r.loss == doctest::Approx(itc_loss(v, w, 0.07).loss).epsilon(1e-12));

    auto fdw = finite_difference_gradient([&](const TensorD& x) { return itc_loss(x, v, 0.07).loss; }, w);
    auto fdv = finite_difference_gradient([&](const TensorD& x) { return itc_loss(w, x, 0.07).loss; }, v);
    CHECK(relative_error(r.d_text, fdw) < 1e-5);
    CHECK(relative_error(r.d_image, fdv) < 1e-5);
  }
  // raising only the diagonal of the similarity matrix lowers the loss:
  // use one-hot texts so sim(i, j) = v(i, j) / tau directly.
  for (int t = 0; t < 20; ++t) {
    const std::size_t B = random_dim(rng, 2, 6);
    TensorD eye(Shape{B, B});
    for (std::size_t i = 0; i < B; ++i) eye(i, i) = 1;
    TensorD v = random_tensor(Shape{B, B}, rng, 0.3);
    TensorD v2 = v;
    for (std::size_t i = 0; i < B; ++i) v2(i, i) += 0.1;
    CHECK(itc_loss(eye, v2, 0.5).loss < itc_loss(eye, v, 0.5).loss);
  }
}

TEST_CASE("distillation targets and soft ITC") {
  Rng rng(2);
  TensorD w = unit_rows(rng, 4, 3), v = unit_rows(rng, 4, 3);
  auto [i2t, t2i] = distillation_targets(w, v, 0.07, 0.4);
  for (std::size_t i = 0; i < 4; ++i) {
    double si = 0, st = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      si += i2t(i, j);
      st += t2i(i, j);
    }
    CHECK(si == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(st == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(i2t(i, i) >= 0.6);
  }
  auto [h1, h2] = distillation_targets(w, v, 0.07, 0.0);
  auto hard = itc_loss(w, v, 0.07);
  CHECK(itc_loss(w, v, 0.07, &h1, &h2).loss == doctest::Approx(hard.loss).epsilon(1e-12));
  auto soft = itc_loss(w, v, 0.07, &i2t, &t2i);
  auto fd = finite_difference_gradient([&](const TensorD& x) { return itc_loss(x, v, 0.07, &i2t, &t2i).loss; }, w);
  CHECK(relative_error(soft.d_text, fd) < 1e-5);
}

TEST_CASE("itm_loss") {
  std::vector<std::size_t> labels{1, 0, 1, 0};
  TensorD perfect(Shape{4, 2});
  for (std::size_t i = 0; i < 4; ++i) perfect(i, labels[i]) = 100;
  CHECK(itm_loss(perfect, labels).loss < 1e-12);
  CHECK(std::fabs(itm_loss(TensorD(Shape{4, 2}), labels).loss - std::log(2.0)) < 1e-6);
  CHECK_FALSE(itm_loss(perfect, labels).single_class);
  std::vector<std::size_t> same{1, 1, 1, 1};
  auto r = itm_loss(perfect, same);
  CHECK(r.single_class);
  CHECK(std::isfinite(r.loss));

  // micro-batch oracle
  TensorD l = rows({{0.2, -0.4}, {1.5, 0.3}});
  std::vector<std::size_t> y{1, 0};
  const double o = 0.5 * (std::log(std::exp(0.2) + std::exp(-0.4)) + 0.4 + std::log(std::exp(1.5) + std::exp(0.3)) - 1.5);
  CHECK(itm_loss(l, y).loss == doctest::Approx(o).epsilon(1e-12));
  CHECK_THROWS_AS(itm_loss(TensorD(Shape{2, 3}), y), DimensionError);
}

TEST_CASE("mask_tokens") {
  TokenSequence seq{{Vocab::kCls, 4, 5, 6, 7, 8}};
  auto none = mask_tokens(seq, 0.0, 1, 20);
  REQUIRE(none.positions.size() == 1);
  CHECK(none.corrupted.ids[none.positions[0]] == Vocab::kMask);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < seq.size(); ++i) changed += none.corrupted.ids[i] != seq.ids[i];
  CHECK(changed == 1);

  auto all = mask_tokens(seq, 1.0, 1, 20);
  CHECK(all.positions == std::vector<std::size_t>{1, 2, 3, 4, 5});
  CHECK(all.targets == std::vector<TokenId>{4, 5, 6, 7, 8});
  CHECK(all.corrupted.ids[0] == Vocab::kCls);

  auto again = mask_tokens(seq, 0.5, 99, 20);
  CHECK(again.corrupted.ids == mask_tokens(seq, 0.5, 99, 20).corrupted.ids);
  CHECK(again.positions == mask_tokens(seq, 0.5, 99, 20).positions);
  CHECK_THROWS_AS(mask_tokens(TokenSequence{{Vocab::kCls}}, 0.15, 1, 20), std::invalid_argument);

  // 10k-token stream
  TokenSequence big;
  big.ids.push_back(Vocab::kCls);
  Rng rng(3);
  for (int i = 0; i < 10000; ++i) big.ids.push_back(static_cast<TokenId>(4 + rng.below(1000)));
  auto m = mask_tokens(big, 0.15, 7, 1004);
  const double rate = static_cast<double>(m.positions.size()) / 10000.0;
  CHECK(std::fabs(rate - 0.15) < 0.01);
  std::size_t to_mask = 0, kept = 0;
  for (std::size_t p : m.positions) {
    to_mask += m.corrupted.ids[p] == Vocab::kMask;
    kept += m.corrupted.ids[p] == big.ids[p];
  }
  const double n = static_cast<double>(m.positions.size());
  CHECK(std::fabs(to_mask / n - 0.8) < 0.03);
  CHECK(kept / n > 0.07);  // 10% unchanged plus random draws that hit the original
  CHECK(kept / n < 0.14);
}

TEST_CASE("mlm_loss") {
  TokenSequence seq{{Vocab::kCls, 4, 5, 6}};
  auto m = mask_tokens(seq, 1.0, 1, 10);
  TensorD uniform(Shape{4, 10});
  CHECK(std::fabs(mlm_loss(uniform, m).value - std::log(10.0)) < 1e-6);
  TensorD perfect(Shape{4, 10});
  for (std::size_t k = 0; k < m.positions.size(); ++k) perfect(m.positions[k], m.targets[k]) = 100;
  CHECK(mlm_loss(perfect, m).value < 1e-12);
  // gradient only on masked rows
  auto one = mask_tokens(seq, 0.0, 1, 10);
  Rng rng(4);
  auto logits = random_tensor(Shape{4, 10}, rng);
  auto r = mlm_loss(logits, one);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 10; ++j) s += std::fabs(r.grad(i, j));
    CHECK((s > 0) == (i == one.positions[0]));
  }
  auto fd = finite_difference_gradient([&](const TensorD& x) { return mlm_loss(x, one).value; }, logits);
  CHECK(relative_error(r.grad, fd) < 1e-6);
}

TEST_CASE("derangement") {
  for (std::size_t n = 2; n < 30; ++n) {
    auto p = derangement(n, n * 7);
    std::set<std::size_t> seen(p.begin(), p.end());
    CHECK(seen.size() == n);
    for (std::size_t i = 0; i < n; ++i) CHECK(p[i] != i);
  }
}

TEST_CASE("ema_update") {
  Rng rng(5);
  ParamStore<double> t, o;
  t.add("a", random_tensor(Shape{3, 2}, rng));
  o.add("a", random_tensor(Shape{3, 2}, rng));
  const auto t0 = t;

  auto t1 = t0;
  ema_update(t1, o, 1.0);
  CHECK(t1[0] == t0[0]);
  ema_update(t1, o, 0.0);
  CHECK(t1[0] == o[0]);

  // k steps toward a constant: d^k t0 + (1 - d^k) o
  for (double d : {0.999, 0.995, 0.5}) {
    auto tk = t0;
    for (int k = 0; k < 3; ++k) ema_update(tk, o, d);
    const double dk = d * d * d;
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::fabs(tk[0][i] - (dk * t0[0][i] + (1 - dk) * o[0][i])) < 1e-7);
    // contraction
    auto one = t0;
    ema_update(one, o, d);
    for (std::size_t i = 0; i < 6; ++i)
      CHECK(std::fabs(one[0][i] - o[0][i]) == doctest::Approx(d * std::fabs(t0[0][i] - o[0][i])).epsilon(1e-9));
  }
  ParamStore<double> other;
  other.add("b", TensorD(Shape{3, 2}));
  CHECK_THROWS_AS(ema_update(t1, other, 0.9), StructuralError);
}

TEST_CASE("pretrain_loss: additivity, oracle components, gradient check") {
  const auto c = micro_config();
  Rng rng(6);
  ModelD m(c, 31);
  std::vector<PretrainExample<double>> batch;
  for (int i = 0; i < 3; ++i) batch.push_back({random_sequence(rng, c), random_patches(rng, c)});
  TrainConfig cfg;
  cfg.seed = 5;
  const DropoutContext off;

  auto total = pretrain_loss<double>(m, batch, cfg, 0, off, nullptr);
  CHECK(std::fabs(total.total - (total.itc + total.itm + total.mlm)) < 1e-9);

  // ITC component from direct encodings
  std::vector<TensorD> tw, iv;
  for (auto& ex : batch) {
    tw.push_back(m.project_text(ops::slice_rows(m.encode_text(ex.text), 0, 1)));
    iv.push_back(m.project_image(ops::slice_rows(m.encode_image(ex.patches), 0, 1)));
  }
  CHECK(total.itc == doctest::Approx(itc_oracle(ops::stack_rows(tw), ops::stack_rows(iv), 0.07)).epsilon(1e-10));

  // ITM component from direct fusion with the same derangement
  const auto perm = derangement(3, hash_combine(cfg.seed ^ 0x17a5ULL, 0));
  double itm = 0;
  for (std::size_t k = 0; k < 6; ++k) {
    const std::size_t img = k % 3, txt = k < 3 ? k : perm[k - 3];
    auto f = m.fuse(m.encode_text(batch[txt].text), m.encode_image(batch[img].patches), {}, {}, false);
    auto l = m.itm_logits(ops::slice_rows(f.text, 0, 1), ops::slice_rows(f.image, 0, 1));
    const double lse = std::log(std::exp(l[0]) + std::exp(l[1]));
    itm += lse - l[k < 3 ? 1 : 0];
  }
  CHECK(total.itm == doctest::Approx(itm / 6).epsilon(1e-10));

  for (bool with_momentum : {false, true}) {
    ModelD mom(c, 32);
    for (double rate : {0.0, 0.1}) {
      DropoutContext ctx{rate, 9, 0, 0, 0};
      auto grads = m.params().zeros_like();
      pretrain_loss<double>(m, batch, cfg, 4, ctx, &grads, with_momentum ? &mom : nullptr);
      auto res = check_param_grads(
          m, [&] { return pretrain_loss<double>(m, batch, cfg, 4, ctx, nullptr, with_momentum ? &mom : nullptr).total; },
          grads);
      INFO("worst " << res.worst_name << " momentum " << with_momentum << " rate " << rate);
      CHECK(res.worst < 1e-4);
    }
  }
  CHECK_THROWS_AS(pretrain_loss<double>(m, {batch[0]}, cfg, 0, off, nullptr), std::invalid_argument);
}

TEST_CASE("rdrop_finetune_loss") {
  const auto c = micro_config();
  Rng rng(7);
  ModelD m(c, 41);
  std::vector<VqaExample<double>> batch;
  for (std::size_t i = 0; i < 3; ++i) {
    VqaExample<double> ex{random_sequence(rng, c), random_patches(rng, c), {}, {}, i % c.n_answers};
    for (int j = 0; j < 2; ++j) {
      ex.retrieved_text.push_back(random_sequence(rng, c));
      ex.retrieved_patches.push_back(random_patches(rng, c));
    }
    batch.push_back(ex);
  }
  const DropoutContext off;
  CHECK_THROWS_AS(rdrop_finetune_loss<double>(m, batch, 0.6, true, off, nullptr), ContractError);
  auto forced = rdrop_finetune_loss<double>(m, batch, 0.6, true, off, nullptr, true);
  CHECK(forced.kl == 0.0);
  CHECK(forced.total == doctest::Approx(vqa_ce_loss<double>(m, batch, true, off, nullptr)).epsilon(1e-12));

  DropoutContext ctx{0.2, 3, 1, 0, 0};
  auto a0 = rdrop_finetune_loss<double>(m, batch, 0.0, true, ctx, nullptr);
  auto a6 = rdrop_finetune_loss<double>(m, batch, 0.6, true, ctx, nullptr);
  CHECK(a0.total == doctest::Approx(a0.ce).epsilon(1e-12));
  CHECK(a6.kl > 0);
  CHECK(a6.total == doctest::Approx(a6.ce + 0.6 * a6.kl).epsilon(1e-12));

  // oracle from two explicit passes
  double ce = 0, kl = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    DropoutContext c0 = ctx, c1 = ctx;
    c0.sample = c1.sample = i;
    c1.pass = 1;
    auto l0 = vqa_forward(m, batch[i], true, c0);
    auto l1 = vqa_forward(m, batch[i], true, c1);
    auto sm = [](const TensorD& l) {
      double z = 0;
      for (double v : l.values()) z += std::exp(v);
      std::vector<double> p;
      for (double v : l.values()) p.push_back(std::exp(v) / z);
      return p;
    };
    auto p = sm(l0), q = sm(l1);
    const std::size_t y = batch[i].answer;
    ce += 0.5 * (-std::log(p[y]) - std::log(q[y]));
    double kpq = 0, kqp = 0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      kpq += p[j] * std::log(p[j] / q[j]);
      kqp += q[j] * std::log(q[j] / p[j]);
    }
    kl += 0.5 * (kpq + kqp);
  }
  CHECK(a6.ce == doctest::Approx(ce / 3).epsilon(1e-10));
  CHECK(a6.kl == doctest::Approx(kl / 3).epsilon(1e-10));

  auto grads = m.params().zeros_like();
  rdrop_finetune_loss<double>(m, batch, 0.6, true, ctx, &grads);
  auto res = check_param_grads(m, [&] { return rdrop_finetune_loss<double>(m, batch, 0.6, true, ctx, nullptr).total; }, grads);
  INFO("worst " << res.worst_name);
  CHECK(res.worst < 1e-4);
}

TEST_CASE("AdamW, schedule, clipping") {
  ParamStore<float> p, g;
  p.add("w", TensorF(Shape{1, 2}, 1.0f));
  p.add("b", TensorF(Shape{2}, 1.0f));
  g.add("w", TensorF(Shape{1, 2}, 0.5f));
  g.add("b", TensorF(Shape{2}, 0.5f));
  AdamW opt(p, 0.9, 0.999, 1e-8, 0.1);
  opt.step(p, g, 0.01);
  // first bias-corrected step is lr * sign(g); decay on rank-2 only
  CHECK(p[0][0] == doctest::Approx(1 - 0.01 * (1 + 0.1)).epsilon(1e-6));
  CHECK(p[1][0] == doctest::Approx(1 - 0.01).epsilon(1e-6));

  CHECK(linear_schedule(1.0, 0, 10, 0.0) == 1.0);
  CHECK(linear_schedule(1.0, 5, 10, 0.0) == doctest::Approx(0.5));
  CHECK(linear_schedule(1.0, 10, 10, 0.0) == 0.0);
  CHECK(linear_schedule(1.0, 0, 10, 0.2) == doctest::Approx(0.5));

  const double n = clip_grad_norm(g, 0.5);
  CHECK(n == doctest::Approx(1.0));
  CHECK(clip_grad_norm(g, 0.0) == doctest::Approx(0.5));
}
