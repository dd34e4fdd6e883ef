#include "ramm/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "ramm/rng.hpp"

namespace ramm {

void TrainConfig::validate() const {
  if (!(itc_temperature > 0)) throw std::invalid_argument("TrainConfig: itc_temperature must be > 0");
  if (!(momentum > 0 && momentum < 1)) throw std::invalid_argument("TrainConfig: momentum must be in (0,1)");
  if (!(ema_decay > 0 && ema_decay < 1)) throw std::invalid_argument("TrainConfig: ema_decay must be in (0,1)");
  if (!(mask_rate > 0 && mask_rate < 1)) throw std::invalid_argument("TrainConfig: mask_rate must be in (0,1)");
  if (!(distill_weight >= 0 && distill_weight <= 1)) throw std::invalid_argument("TrainConfig: distill_weight in [0,1]");
  if (rdrop_alpha < 0) throw std::invalid_argument("TrainConfig: rdrop_alpha must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(lr > 0)) throw std::invalid_argument("TrainConfig: lr must be > 0");
}

namespace {

template <typename T>
Tensor<T> first_row(const Tensor<T>& x) {
  return ops::slice_rows(x, 0, 1);
}

// [rows x d] zeros with `row0` in the first row.
template <typename T>
Tensor<T> cls_grad(const Tensor<T>& row0, std::size_t rows) {
  Tensor<T> g(Shape{rows, row0.size()});
  std::copy(row0.values().begin(), row0.values().end(), g.row(0).begin());
  return g;
}

std::uint64_t sequence_hash(const TokenSequence& seq) {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (auto id : seq.ids) h = hash_combine(h, id);
  return h;
}

}  // namespace

template <typename T>
ItcResult<T> itc_loss(const Tensor<T>& text_proj, const Tensor<T>& image_proj, T tau, const Tensor<T>* i2t_targets,
                      const Tensor<T>* t2i_targets) {
  const std::size_t B = text_proj.rows();
  if (B < 2) throw std::invalid_argument("itc_loss: batch size must be >= 2 (no negatives)");
  if (image_proj.shape() != text_proj.shape()) {
    throw DimensionError("itc_loss: " + shape_str(text_proj.shape()) + " vs " + shape_str(image_proj.shape()));
  }
  Tensor<T> sim = ops::scale(ops::matmul_nt(image_proj, text_proj), T(1) / tau);
  Tensor<T> simT = ops::transpose(sim);
  std::vector<std::size_t> diag(B);
  std::iota(diag.begin(), diag.end(), 0);
  auto i2t = i2t_targets ? ops::soft_cross_entropy(sim, *i2t_targets) : ops::cross_entropy<T>(sim, diag);
  auto t2i = t2i_targets ? ops::soft_cross_entropy(simT, *t2i_targets) : ops::cross_entropy<T>(simT, diag);
  ItcResult<T> r;
  r.loss = T(0.5) * (i2t.value + t2i.value);
  Tensor<T> dsim = ops::add(i2t.grad, ops::transpose(t2i.grad));
  for (auto& v : dsim.values()) v *= T(0.5) / tau;
  r.d_image = ops::matmul(dsim, text_proj);
  r.d_text = ops::matmul_tn(dsim, image_proj);
  return r;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> distillation_targets(const Tensor<T>& text_proj_m, const Tensor<T>& image_proj_m,
                                                     T tau, T weight) {
  Tensor<T> sim = ops::scale(ops::matmul_nt(image_proj_m, text_proj_m), T(1) / tau);
  Tensor<T> i2t = ops::scale(ops::softmax_rows(sim), weight);
  Tensor<T> t2i = ops::scale(ops::softmax_rows(ops::transpose(sim)), weight);
  for (std::size_t i = 0; i < sim.rows(); ++i) {
    i2t(i, i) += T(1) - weight;
    t2i(i, i) += T(1) - weight;
  }
  return {std::move(i2t), std::move(t2i)};
}

template <typename T>
ItmResult<T> itm_loss(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  if (logits.cols() != 2) throw DimensionError("itm_loss: expected [N x 2] logits, got " + shape_str(logits.shape()));
  auto ce = ops::cross_entropy(logits, labels);
  ItmResult<T> r{ce.value, std::move(ce.grad), false};
  r.single_class = std::all_of(labels.begin(), labels.end(), [&](std::size_t l) { return l == labels[0]; });
  return r;
}

MaskedTokens mask_tokens(const TokenSequence& seq, double rate, std::uint64_t seed, std::size_t vocab_size) {
  const std::size_t n = seq.ids.size();
  if (n < 2) throw std::invalid_argument("mask_tokens: sequence has no tokens after CLS");
  if (vocab_size <= Vocab::kFirstRegular) throw std::invalid_argument("mask_tokens: vocabulary has no regular tokens");
  const std::uint64_t key = hash_combine(seed, sequence_hash(seq));
  const std::uint64_t n_regular = vocab_size - Vocab::kFirstRegular;
  MaskedTokens out{seq, {}, {}};
  for (std::size_t i = 1; i < n; ++i) {
    if (!(hashed_uniform(key, 3 * i) < rate)) continue;
    out.positions.push_back(i);
    out.targets.push_back(seq.ids[i]);
    const double how = hashed_uniform(key, 3 * i + 1);
    if (how < 0.8) {
      out.corrupted.ids[i] = Vocab::kMask;
    } else if (how < 0.9) {
      out.corrupted.ids[i] =
          static_cast<TokenId>(Vocab::kFirstRegular + hash_combine(key, 3 * i + 2) % n_regular);
    }
  }
  if (out.positions.empty()) {
    const std::size_t pos = 1 + static_cast<std::size_t>(hash_combine(key, 0xf0f0f0f0ULL) % (n - 1));
    out.positions.push_back(pos);
    out.targets.push_back(seq.ids[pos]);
    out.corrupted.ids[pos] = Vocab::kMask;
  }
  return out;
}

template <typename T>
ops::Loss<T> mlm_loss(const Tensor<T>& logits, const MaskedTokens& masked) {
  std::vector<Tensor<T>> rows;
  std::vector<std::size_t> targets;
  for (std::size_t k = 0; k < masked.positions.size(); ++k) {
    rows.push_back(ops::slice_rows(logits, masked.positions[k], masked.positions[k] + 1));
    targets.push_back(masked.targets[k]);
  }
  auto ce = ops::cross_entropy(ops::stack_rows(rows), targets);
  ops::Loss<T> out{ce.value, Tensor<T>(logits.shape())};
  for (std::size_t k = 0; k < masked.positions.size(); ++k) {
    auto src = ce.grad.row(k);
    auto dst = out.grad.row(masked.positions[k]);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
  }
  return out;
}

std::vector<std::size_t> derangement(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i-- > 1;) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));  // j < i
    std::swap(p[i], p[j]);
  }
  return p;
}

template <typename T>
PretrainLoss<T> pretrain_loss(const Model<T>& model, const std::vector<PretrainExample<T>>& batch,
                              const TrainConfig& cfg, std::uint64_t step, const DropoutContext& ctx,
                              ParamStore<T>* grads, const Model<T>* momentum) {
  const std::size_t B = batch.size();
  if (B < 2) throw std::invalid_argument("pretrain_loss: batch size must be >= 2 (ITC needs in-batch negatives)");
  const bool train = grads != nullptr;
  const T tau = static_cast<T>(cfg.itc_temperature);
  const std::size_t vocab = model.config().vocab_size;
  auto sample_ctx = [&](std::size_t i, std::uint32_t pass) {
    DropoutContext c = ctx;
    c.step = step;
    c.sample = i;
    c.pass = pass;
    return c;
  };

  // uni-modal encodings and ITC projections
  std::vector<TextTrace<T>> text_tr(B);
  std::vector<ImageTrace<T>> image_tr(B);
  std::vector<ProjectionTrace<T>> ptext_tr(B), pimage_tr(B);
  std::vector<Tensor<T>> wt(B), vi(B), tproj(B), iproj(B);
  for (std::size_t i = 0; i < B; ++i) {
    const auto c = sample_ctx(i, 0);
    wt[i] = model.encode_text(batch[i].text, c, 0, train ? &text_tr[i] : nullptr);
    vi[i] = model.encode_image(batch[i].patches, c, 0, train ? &image_tr[i] : nullptr);
    tproj[i] = model.project_text(first_row(wt[i]), train ? &ptext_tr[i] : nullptr);
    iproj[i] = model.project_image(first_row(vi[i]), train ? &pimage_tr[i] : nullptr);
  }
  const Tensor<T> text_mat = ops::stack_rows(tproj);
  const Tensor<T> image_mat = ops::stack_rows(iproj);

  ItcResult<T> itc;
  if (momentum) {
    std::vector<Tensor<T>> tm(B), im(B);
    for (std::size_t i = 0; i < B; ++i) {
      tm[i] = momentum->project_text(first_row(momentum->encode_text(batch[i].text)));
      im[i] = momentum->project_image(first_row(momentum->encode_image(batch[i].patches)));
    }
    auto [i2t, t2i] = distillation_targets(ops::stack_rows(tm), ops::stack_rows(im), tau,
                                           static_cast<T>(cfg.distill_weight));
    itc = itc_loss(text_mat, image_mat, tau, &i2t, &t2i);
  } else {
    itc = itc_loss(text_mat, image_mat, tau);
  }

  // ITM: B matched pairs followed by B mismatched (caption derangement).
  const auto perm = derangement(B, hash_combine(cfg.seed ^ 0x17a5ULL, step));
  std::vector<FuseTrace<T>> itm_fuse(2 * B);
  std::vector<HeadTrace<T>> itm_head(2 * B);
  std::vector<Tensor<T>> itm_rows(2 * B);
  std::vector<std::size_t> itm_labels(2 * B);
  std::vector<std::size_t> text_of(2 * B), image_of(2 * B);
  std::vector<std::size_t> fused_rows(2 * B);
  for (std::size_t k = 0; k < 2 * B; ++k) {
    const bool positive = k < B;
    image_of[k] = positive ? k : k - B;
    text_of[k] = positive ? k : perm[k - B];
    itm_labels[k] = positive ? 1 : 0;
    const auto c = sample_ctx(image_of[k], positive ? 1 : 2);
    auto fused = model.fuse(wt[text_of[k]], vi[image_of[k]], {}, {}, false, c, train ? &itm_fuse[k] : nullptr);
    fused_rows[k] = fused.text.rows();
    itm_rows[k] = model.itm_logits(first_row(fused.text), first_row(fused.image), train ? &itm_head[k] : nullptr);
  }
  auto itm = itm_loss(ops::stack_rows(itm_rows), itm_labels);

  // MLM on a corrupted copy of each caption, fused with its own image.
  std::vector<MaskedTokens> masked(B);
  std::vector<TextTrace<T>> mtext_tr(B);
  std::vector<FuseTrace<T>> mlm_fuse(B);
  std::vector<HeadTrace<T>> mlm_head(B);
  std::vector<Tensor<T>> mlm_logits(B);
  std::vector<Tensor<T>> gathered;
  std::vector<std::size_t> gathered_targets;
  for (std::size_t i = 0; i < B; ++i) {
    masked[i] = mask_tokens(batch[i].text, cfg.mask_rate, hash_combine(hash_combine(cfg.seed, step), i), vocab);
    const auto c = sample_ctx(i, 3);
    Tensor<T> wm = model.encode_text(masked[i].corrupted, c, 1, train ? &mtext_tr[i] : nullptr);
    auto fused = model.fuse(wm, vi[i], {}, {}, false, c, train ? &mlm_fuse[i] : nullptr);
    mlm_logits[i] = model.mlm_logits(fused.text, train ? &mlm_head[i] : nullptr);
    for (std::size_t k = 0; k < masked[i].positions.size(); ++k) {
      gathered.push_back(ops::slice_rows(mlm_logits[i], masked[i].positions[k], masked[i].positions[k] + 1));
      gathered_targets.push_back(masked[i].targets[k]);
    }
  }
  auto mlm = ops::cross_entropy(ops::stack_rows(gathered), gathered_targets);

  PretrainLoss<T> out{itc.loss, itm.loss, mlm.value, itc.loss + itm.loss + mlm.value};
  if (!train) return out;

  std::vector<Tensor<T>> d_wt(B), d_vi(B), d_wm(B);
  for (std::size_t i = 0; i < B; ++i) {
    d_wt[i] = Tensor<T>(wt[i].shape());
    d_vi[i] = Tensor<T>(vi[i].shape());
    d_wm[i] = Tensor<T>(wt[i].shape());
  }
  const std::size_t image_rows = vi[0].rows();

  for (std::size_t i = 0; i < B; ++i) {
    ops::add_inplace(d_wt[i], cls_grad(model.project_text_backward(ptext_tr[i], first_row(ops::slice_rows(itc.d_text, i, i + 1)), *grads), wt[i].rows()));
    ops::add_inplace(d_vi[i], cls_grad(model.project_image_backward(pimage_tr[i], ops::slice_rows(itc.d_image, i, i + 1), *grads), image_rows));
  }

  for (std::size_t k = 0; k < 2 * B; ++k) {
    auto [dw, dv] = model.itm_backward(itm_head[k], ops::slice_rows(itm.dlogits, k, k + 1), *grads);
    auto sg = model.fuse_backward(itm_fuse[k], cls_grad(dw, fused_rows[k]), cls_grad(dv, image_rows), *grads);
    ops::add_inplace(d_wt[text_of[k]], sg.text[0]);
    ops::add_inplace(d_vi[image_of[k]], sg.image[0]);
  }

  std::size_t g = 0;
  for (std::size_t i = 0; i < B; ++i) {
    Tensor<T> dlog(mlm_logits[i].shape());
    for (std::size_t k = 0; k < masked[i].positions.size(); ++k, ++g) {
      auto src = mlm.grad.row(g);
      auto dst = dlog.row(masked[i].positions[k]);
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
    }
    Tensor<T> dfused = model.mlm_backward(mlm_head[i], dlog, *grads);
    auto sg = model.fuse_backward(mlm_fuse[i], dfused, Tensor<T>(vi[i].shape()), *grads);
    ops::add_inplace(d_wm[i], sg.text[0]);
    ops::add_inplace(d_vi[i], sg.image[0]);
  }

  for (std::size_t i = 0; i < B; ++i) {
    model.encode_text_backward(text_tr[i], d_wt[i], *grads);
    model.encode_text_backward(mtext_tr[i], d_wm[i], *grads);
    model.encode_image_backward(image_tr[i], d_vi[i], *grads);
  }
  return out;
}

template <typename T>
Tensor<T> vqa_forward(const Model<T>& model, const VqaExample<T>& ex, bool retrieval_enabled,
                      const DropoutContext& ctx, VqaTrace<T>* trace) {
  if (ex.retrieved_text.size() != ex.retrieved_patches.size()) {
    throw DimensionError("vqa_forward: retrieved text/image counts differ");
  }
  const std::size_t r = retrieval_enabled ? ex.retrieved_text.size() : 0;
  Tensor<T> wq = model.encode_text(ex.question, ctx, 0, trace ? &trace->question : nullptr);
  Tensor<T> vq = model.encode_image(ex.patches, ctx, 0, trace ? &trace->image : nullptr);
  std::vector<Tensor<T>> rt(r), ri(r);
  if (trace) {
    trace->retrieved_text.assign(r, {});
    trace->retrieved_image.assign(r, {});
  }
  for (std::size_t j = 0; j < r; ++j) {
    rt[j] = model.encode_text(ex.retrieved_text[j], ctx, j + 1, trace ? &trace->retrieved_text[j] : nullptr);
    ri[j] = model.encode_image(ex.retrieved_patches[j], ctx, j + 1, trace ? &trace->retrieved_image[j] : nullptr);
  }
  auto fused = model.fuse(wq, vq, rt, ri, retrieval_enabled, ctx, trace ? &trace->fuse : nullptr);
  return model.vqa_logits(first_row(fused.text), first_row(fused.image), trace ? &trace->head : nullptr);
}

template <typename T>
void vqa_backward(const Model<T>& model, const VqaTrace<T>& trace, const Tensor<T>& dlogits, ParamStore<T>& grads) {
  auto [dw, dv] = model.vqa_backward(trace.head, dlogits, grads);
  const std::size_t text_rows = trace.question.ids.size();
  const std::size_t image_rows = model.config().num_patches() + 1;
  auto sg = model.fuse_backward(trace.fuse, cls_grad(dw, text_rows), cls_grad(dv, image_rows), grads);
  model.encode_text_backward(trace.question, sg.text[0], grads);
  model.encode_image_backward(trace.image, sg.image[0], grads);
  for (std::size_t j = 0; j < trace.retrieved_text.size(); ++j) {
    model.encode_text_backward(trace.retrieved_text[j], sg.text[j + 1], grads);
    model.encode_image_backward(trace.retrieved_image[j], sg.image[j + 1], grads);
  }
}

template <typename T>
FinetuneLoss<T> rdrop_finetune_loss(const Model<T>& model, const std::vector<VqaExample<T>>& batch, double alpha,
                                    bool retrieval_enabled, const DropoutContext& ctx, ParamStore<T>* grads,
                                    bool allow_no_dropout) {
  if (!ctx.active() && !allow_no_dropout) {
    throw ContractError("rdrop_finetune_loss: dropout is disabled; R-Drop degenerates to plain CE");
  }
  if (batch.empty()) throw std::invalid_argument("rdrop_finetune_loss: empty batch");
  const T inv_b = T(1) / static_cast<T>(batch.size());
  FinetuneLoss<T> out;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    DropoutContext c0 = ctx, c1 = ctx;
    c0.sample = c1.sample = ctx.sample + i;
    c0.pass = 0;
    c1.pass = 1;
    VqaTrace<T> t0, t1;
    Tensor<T> l0 = vqa_forward(model, batch[i], retrieval_enabled, c0, grads ? &t0 : nullptr);
    Tensor<T> l1 = vqa_forward(model, batch[i], retrieval_enabled, c1, grads ? &t1 : nullptr);
    const std::size_t target[1] = {batch[i].answer};
    auto ce0 = ops::cross_entropy(l0, target);
    auto ce1 = ops::cross_entropy(l1, target);
    auto kl = ops::symmetric_kl(l0, l1);
    const T ce = T(0.5) * (ce0.value + ce1.value);
    out.ce += inv_b * ce;
    out.kl += inv_b * kl.value;
    if (grads) {
      const T a = static_cast<T>(alpha);
      Tensor<T> d0(l0.shape()), d1(l1.shape());
      for (std::size_t j = 0; j < d0.size(); ++j) {
        d0[j] = inv_b * (T(0.5) * ce0.grad[j] + a * kl.dp[j]);
        d1[j] = inv_b * (T(0.5) * ce1.grad[j] + a * kl.dq[j]);
      }
      vqa_backward(model, t0, d0, *grads);
      vqa_backward(model, t1, d1, *grads);
    }
  }
  out.total = out.ce + static_cast<T>(alpha) * out.kl;
  return out;
}

template <typename T>
T vqa_ce_loss(const Model<T>& model, const std::vector<VqaExample<T>>& batch, bool retrieval_enabled,
              const DropoutContext& ctx, ParamStore<T>* grads) {
  if (batch.empty()) throw std::invalid_argument("vqa_ce_loss: empty batch");
  const T inv_b = T(1) / static_cast<T>(batch.size());
  T total = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    DropoutContext c = ctx;
    c.sample = ctx.sample + i;
    VqaTrace<T> t;
    Tensor<T> logits = vqa_forward(model, batch[i], retrieval_enabled, c, grads ? &t : nullptr);
    const std::size_t target[1] = {batch[i].answer};
    auto ce = ops::cross_entropy(logits, target);
    total += inv_b * ce.value;
    if (grads) vqa_backward(model, t, ops::scale(ce.grad, inv_b), *grads);
  }
  return total;
}

AdamW::AdamW(const ParamStore<float>& like, double beta1, double beta2, double eps, double weight_decay)
    : m_(like.zeros_like()), v_(like.zeros_like()), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

void AdamW::step(ParamStore<float>& params, const ParamStore<float>& grads, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].values();
    auto g = grads[i].values();
    auto m = m_[i].values();
    auto v = v_[i].values();
    const bool decay = params[i].rank() == 2;
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = static_cast<float>(beta1_ * m[j] + (1 - beta1_) * g[j]);
      v[j] = static_cast<float>(beta2_ * v[j] + (1 - beta2_) * g[j] * g[j]);
      const double mh = m[j] / bc1, vh = v[j] / bc2;
      double upd = mh / (std::sqrt(vh) + eps_);
      if (decay) upd += wd_ * p[j];
      p[j] = static_cast<float>(p[j] - lr * upd);
    }
  }
}

double linear_schedule(double base_lr, std::uint64_t step, std::uint64_t total_steps, double warmup_fraction) {
  if (total_steps == 0) return base_lr;
  const double t = static_cast<double>(step);
  const double total = static_cast<double>(total_steps);
  const double warm = warmup_fraction * total;
  if (warm > 0 && t < warm) return base_lr * (t + 1) / warm;
  return base_lr * std::max(0.0, 1.0 - t / total);
}

double clip_grad_norm(ParamStore<float>& grads, double max_norm) {
  double ss = 0;
  for (std::size_t i = 0; i < grads.size(); ++i)
    for (float v : grads[i].values()) ss += static_cast<double>(v) * v;
  const double norm = std::sqrt(ss);
  if (max_norm > 0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / norm);
    for (std::size_t i = 0; i < grads.size(); ++i)
      for (float& v : grads[i].values()) v *= s;
  }
  return norm;
}

#define RAMM_INSTANTIATE_OBJECTIVES(T)                                                                             \
  template ItcResult<T> itc_loss(const Tensor<T>&, const Tensor<T>&, T, const Tensor<T>*, const Tensor<T>*);       \
  template std::pair<Tensor<T>, Tensor<T>> distillation_targets(const Tensor<T>&, const Tensor<T>&, T, T);         \
  template ItmResult<T> itm_loss(const Tensor<T>&, std::span<const std::size_t>);                                  \
  template ops::Loss<T> mlm_loss(const Tensor<T>&, const MaskedTokens&);                                           \
  template PretrainLoss<T> pretrain_loss(const Model<T>&, const std::vector<PretrainExample<T>>&,                  \
                                         const TrainConfig&, std::uint64_t, const DropoutContext&, ParamStore<T>*, \
                                         const Model<T>*);                                                         \
  template Tensor<T> vqa_forward(const Model<T>&, const VqaExample<T>&, bool, const DropoutContext&,               \
                                 VqaTrace<T>*);                                                                    \
  template void vqa_backward(const Model<T>&, const VqaTrace<T>&, const Tensor<T>&, ParamStore<T>&);               \
  template FinetuneLoss<T> rdrop_finetune_loss(const Model<T>&, const std::vector<VqaExample<T>>&, double, bool,   \
                                               const DropoutContext&, ParamStore<T>*, bool);                       \
  template T vqa_ce_loss(const Model<T>&, const std::vector<VqaExample<T>>&, bool, const DropoutContext&,          \
                         ParamStore<T>*);

RAMM_INSTANTIATE_OBJECTIVES(float)
RAMM_INSTANTIATE_OBJECTIVES(double)

#undef RAMM_INSTANTIATE_OBJECTIVES

}  // namespace ramm
