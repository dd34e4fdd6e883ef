#pragma once

// Parameterized building blocks. Every forward takes an optional cache; when
// the cache pointer is non-null the forward records what its backward needs.
// Backward passes accumulate parameter gradients into a ParamStore with the
// same manifest as the parameters.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ramm/ops.hpp"
#include "ramm/params.hpp"
#include "ramm/rng.hpp"

namespace ramm {

// Dropout masks are a pure function of (seed, step, sample, pass, site,
// stream, element), so two passes with different `pass` values get
// independent masks and any pass can be replayed exactly.
struct DropoutContext {
  double rate = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t sample = 0;
  std::uint32_t pass = 0;

  bool active() const { return rate > 0.0; }
  static DropoutContext off() { return {}; }
};

namespace nn {

struct LinearIdx {
  std::size_t w = 0, b = 0;
};
struct NormIdx {
  std::size_t gain = 0, bias = 0;
};
struct AttnIdx {
  LinearIdx q, k, v, o;
};
struct FfnIdx {
  LinearIdx up, down;
};

inline constexpr double kNormEps = 1e-5;

template <typename T>
LinearIdx add_linear(ParamStore<T>& p, const std::string& name, std::size_t din, std::size_t dout, Rng& rng) {
  Tensor<T> w(Shape{din, dout});
  const double sd = 1.0 / std::sqrt(static_cast<double>(din));
  for (auto& v : w.values()) v = static_cast<T>(rng.normal() * sd);
  LinearIdx idx;
  idx.w = p.add(name + ".W", std::move(w));
  idx.b = p.add(name + ".b", Tensor<T>(Shape{dout}));
  return idx;
}

template <typename T>
NormIdx add_norm(ParamStore<T>& p, const std::string& name, std::size_t d) {
  NormIdx idx;
  idx.gain = p.add(name + ".gain", Tensor<T>(Shape{d}, T(1)));
  idx.bias = p.add(name + ".bias", Tensor<T>(Shape{d}));
  return idx;
}

template <typename T>
AttnIdx add_attention(ParamStore<T>& p, const std::string& name, std::size_t d, Rng& rng) {
  return AttnIdx{add_linear(p, name + ".q", d, d, rng), add_linear(p, name + ".k", d, d, rng),
                 add_linear(p, name + ".v", d, d, rng), add_linear(p, name + ".o", d, d, rng)};
}

template <typename T>
FfnIdx add_ffn(ParamStore<T>& p, const std::string& name, std::size_t d, std::size_t d_ff, Rng& rng) {
  return FfnIdx{add_linear(p, name + ".up", d, d_ff, rng), add_linear(p, name + ".down", d_ff, d, rng)};
}

template <typename T>
struct LinearCache {
  Tensor<T> x;
};

template <typename T>
Tensor<T> linear_fwd(const ParamStore<T>& p, LinearIdx idx, const Tensor<T>& x, LinearCache<T>* c) {
  if (c) c->x = x;
  return ops::linear(x, p[idx.w], p[idx.b]);
}

template <typename T>
Tensor<T> linear_bwd(const ParamStore<T>& p, LinearIdx idx, const LinearCache<T>& c, const Tensor<T>& dy,
                     ParamStore<T>& g) {
  auto lg = ops::linear_backward(c.x, p[idx.w], dy);
  ops::add_inplace(g[idx.w], lg.dw);
  ops::add_inplace(g[idx.b], lg.db);
  return std::move(lg.dx);
}

template <typename T>
struct NormCache {
  ops::LayerNorm<T> fwd;
};

template <typename T>
Tensor<T> norm_fwd(const ParamStore<T>& p, NormIdx idx, const Tensor<T>& x, NormCache<T>* c) {
  auto f = ops::layer_norm(x, p[idx.gain], p[idx.bias], static_cast<T>(kNormEps));
  if (!c) return std::move(f.out);
  c->fwd = std::move(f);
  return c->fwd.out;
}

template <typename T>
Tensor<T> norm_bwd(const ParamStore<T>& p, NormIdx idx, const NormCache<T>& c, const Tensor<T>& dy,
                   ParamStore<T>& g) {
  auto ng = ops::layer_norm_backward(c.fwd, p[idx.gain], dy);
  ops::add_inplace(g[idx.gain], ng.dgain);
  ops::add_inplace(g[idx.bias], ng.dbias);
  return std::move(ng.dx);
}

template <typename T>
struct AttnCache {
  LinearCache<T> q, k, v, o;
  Tensor<T> Q, K, V;
  std::vector<Tensor<T>> probs;  // one per head
};

// Multi-head attention: queries from q_in, keys/values from kv_in, heads are
// contiguous column blocks of the projected matrices, then an output
// projection.
template <typename T>
Tensor<T> attn_fwd(const ParamStore<T>& p, const AttnIdx& idx, std::size_t n_head, const Tensor<T>& q_in,
                   const Tensor<T>& kv_in, AttnCache<T>* c) {
  Tensor<T> Q = linear_fwd(p, idx.q, q_in, c ? &c->q : nullptr);
  Tensor<T> K = linear_fwd(p, idx.k, kv_in, c ? &c->k : nullptr);
  Tensor<T> V = linear_fwd(p, idx.v, kv_in, c ? &c->v : nullptr);
  const std::size_t d = Q.cols();
  const std::size_t dh = d / n_head;
  Tensor<T> concat(Shape{Q.rows(), d});
  if (c) c->probs.resize(n_head);
  for (std::size_t h = 0; h < n_head; ++h) {
    const std::size_t c0 = h * dh, c1 = c0 + dh;
    auto a = ops::scaled_dot_attention(ops::slice_cols(Q, c0, c1), ops::slice_cols(K, c0, c1),
                                       ops::slice_cols(V, c0, c1));
    ops::add_cols(concat, a.out, c0);
    if (c) c->probs[h] = std::move(a.probs);
  }
  if (c) {
    c->Q = std::move(Q);
    c->K = std::move(K);
    c->V = std::move(V);
  }
  return linear_fwd(p, idx.o, concat, c ? &c->o : nullptr);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> attn_bwd(const ParamStore<T>& p, const AttnIdx& idx, std::size_t n_head,
                                         const AttnCache<T>& c, const Tensor<T>& dout, ParamStore<T>& g) {
  Tensor<T> dconcat = linear_bwd(p, idx.o, c.o, dout, g);
  const std::size_t d = c.Q.cols();
  const std::size_t dh = d / n_head;
  Tensor<T> dQ(c.Q.shape()), dK(c.K.shape()), dV(c.V.shape());
  for (std::size_t h = 0; h < n_head; ++h) {
    const std::size_t c0 = h * dh, c1 = c0 + dh;
    auto ag = ops::scaled_dot_attention_backward(ops::slice_cols(c.Q, c0, c1), ops::slice_cols(c.K, c0, c1),
                                                 ops::slice_cols(c.V, c0, c1), c.probs[h],
                                                 ops::slice_cols(dconcat, c0, c1));
    ops::add_cols(dQ, ag.dq, c0);
    ops::add_cols(dK, ag.dk, c0);
    ops::add_cols(dV, ag.dv, c0);
  }
  Tensor<T> dq_in = linear_bwd(p, idx.q, c.q, dQ, g);
  Tensor<T> dkv_in = linear_bwd(p, idx.k, c.k, dK, g);
  ops::add_inplace(dkv_in, linear_bwd(p, idx.v, c.v, dV, g));
  return {std::move(dq_in), std::move(dkv_in)};
}

template <typename T>
struct FfnCache {
  LinearCache<T> up, down;
  Tensor<T> pre;  // pre-activation
};

template <typename T>
Tensor<T> ffn_fwd(const ParamStore<T>& p, const FfnIdx& idx, const Tensor<T>& x, FfnCache<T>* c) {
  Tensor<T> pre = linear_fwd(p, idx.up, x, c ? &c->up : nullptr);
  Tensor<T> h = ops::gelu(pre);
  if (c) c->pre = std::move(pre);
  return linear_fwd(p, idx.down, h, c ? &c->down : nullptr);
}

template <typename T>
Tensor<T> ffn_bwd(const ParamStore<T>& p, const FfnIdx& idx, const FfnCache<T>& c, const Tensor<T>& dy,
                  ParamStore<T>& g) {
  Tensor<T> dh = linear_bwd(p, idx.down, c.down, dy, g);
  return linear_bwd(p, idx.up, c.up, ops::gelu_backward(c.pre, dh), g);
}

template <typename T>
struct DropCache {
  Tensor<T> mask;  // empty when dropout was inactive
};

inline std::uint64_t site_id(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
Tensor<T> dropout_fwd(const DropoutContext& ctx, std::uint64_t site, std::uint64_t stream, Tensor<T> x,
                      DropCache<T>* c) {
  if (!ctx.active()) return x;
  std::uint64_t key = hash_combine(ctx.seed, ctx.step);
  key = hash_combine(key, ctx.sample);
  key = hash_combine(key, ctx.pass);
  key = hash_combine(key, site);
  key = hash_combine(key, stream);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - ctx.rate));
  Tensor<T> mask(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = hashed_uniform(key, i) >= ctx.rate ? keep_scale : T(0);
    x[i] *= mask[i];
  }
  if (c) c->mask = std::move(mask);
  return x;
}

template <typename T>
Tensor<T> dropout_bwd(const DropCache<T>& c, Tensor<T> dy) {
  if (c.mask.empty()) return dy;
  for (std::size_t i = 0; i < dy.size(); ++i) dy[i] *= c.mask[i];
  return dy;
}

// Pre-norm transformer block: x + drop(attn(LN(x))), then + drop(ffn(LN(.))).
struct EncoderLayerIdx {
  NormIdx ln1;
  AttnIdx attn;
  NormIdx ln2;
  FfnIdx ffn;
  std::uint64_t site = 0;
};

template <typename T>
struct EncoderLayerCache {
  NormCache<T> n1, n2;
  AttnCache<T> attn;
  FfnCache<T> ffn;
  DropCache<T> d1, d2;
};

template <typename T>
EncoderLayerIdx add_encoder_layer(ParamStore<T>& p, const std::string& name, std::size_t d, std::size_t d_ff,
                                  Rng& rng) {
  EncoderLayerIdx idx;
  idx.ln1 = add_norm(p, name + ".ln1", d);
  idx.attn = add_attention(p, name + ".attn", d, rng);
  idx.ln2 = add_norm(p, name + ".ln2", d);
  idx.ffn = add_ffn(p, name + ".ffn", d, d_ff, rng);
  idx.site = site_id(name);
  return idx;
}

template <typename T>
Tensor<T> encoder_layer_fwd(const ParamStore<T>& p, const EncoderLayerIdx& idx, std::size_t n_head, Tensor<T> x,
                            const DropoutContext& ctx, std::uint64_t stream, EncoderLayerCache<T>* c) {
  Tensor<T> h = norm_fwd(p, idx.ln1, x, c ? &c->n1 : nullptr);
  Tensor<T> a = attn_fwd(p, idx.attn, n_head, h, h, c ? &c->attn : nullptr);
  ops::add_inplace(x, dropout_fwd(ctx, idx.site, stream, std::move(a), c ? &c->d1 : nullptr));
  h = norm_fwd(p, idx.ln2, x, c ? &c->n2 : nullptr);
  Tensor<T> f = ffn_fwd(p, idx.ffn, h, c ? &c->ffn : nullptr);
  ops::add_inplace(x, dropout_fwd(ctx, idx.site + 1, stream, std::move(f), c ? &c->d2 : nullptr));
  return x;
}

template <typename T>
Tensor<T> encoder_layer_bwd(const ParamStore<T>& p, const EncoderLayerIdx& idx, std::size_t n_head,
                            const EncoderLayerCache<T>& c, Tensor<T> dy, ParamStore<T>& g) {
  Tensor<T> df = ffn_bwd(p, idx.ffn, c.ffn, dropout_bwd(c.d2, dy), g);
  ops::add_inplace(dy, norm_bwd(p, idx.ln2, c.n2, df, g));
  auto [dq, dkv] = attn_bwd(p, idx.attn, n_head, c.attn, dropout_bwd(c.d1, dy), g);
  ops::add_inplace(dq, dkv);
  ops::add_inplace(dy, norm_bwd(p, idx.ln1, c.n1, dq, g));
  return dy;
}

}  // namespace nn
}  // namespace ramm
