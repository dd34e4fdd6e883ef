#include "ramm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace ramm::ops {

namespace {

void require(bool ok, const char* op, const Shape& a, const Shape& b) {
  if (!ok) throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.empty() || t.rank() > 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  require(b.rows() == k, "matmul", a.shape(), b.shape());
  Tensor<T> c(Shape{m, n});
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  T* pc = c.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  require(b.cols() == k, "matmul_nt", a.shape(), b.shape());
  Tensor<T> c(Shape{m, n});
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      const T* ar = pa + i * k;
      const T* br = pb + j * k;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      c(i, j) = s;
    }
  }
  return c;
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  require(b.rows() == k, "matmul_tn", a.shape(), b.shape());
  Tensor<T> c(Shape{m, n});
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  T* pc = c.values().data();
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T api = pa[p * m + i];
      if (api == T(0)) continue;
      T* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
  return c;
}

template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dc) {
  require(dc.rows() == a.rows() && dc.cols() == b.cols(), "matmul_backward", a.shape(), dc.shape());
  MatmulGrads<T> g{matmul_nt(dc, b), matmul_tn(a, dc)};
  if (a.rank() == 1) g.da = g.da.reshaped(a.shape());
  return g;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor<T> t(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  add_inplace(out, b);
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& x) {
  require(acc.size() == x.size(), "add", acc.shape(), x.shape());
  auto dst = acc.values();
  auto src = x.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = a;
  for (auto& v : out.values()) v *= s;
  return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  Tensor<T> y = x;
  const std::size_t n = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = y.row(i);
    const T mx = *std::max_element(row.begin(), row.end());
    T sum = 0;
    for (auto& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
  }
  return y;
}

template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  require(y.shape() == dy.shape(), "softmax_rows_backward", y.shape(), dy.shape());
  Tensor<T> dx(y.shape());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto yr = y.row(i);
    auto gr = dy.row(i);
    T dot = 0;
    for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
    auto out = dx.row(i);
    for (std::size_t j = 0; j < yr.size(); ++j) out[j] = yr[j] * (gr[j] - dot);
  }
  return dx;
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = y.row(i);
    const T mx = *std::max_element(row.begin(), row.end());
    T sum = 0;
    for (auto v : row) sum += std::exp(v - mx);
    const T lse = mx + std::log(sum);
    for (auto& v : row) v -= lse;
  }
  return y;
}

template <typename T>
Attention<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  require(q.cols() == k.cols(), "scaled_dot_attention(Q,K)", q.shape(), k.shape());
  require(k.rows() == v.rows(), "scaled_dot_attention(K,V)", k.shape(), v.shape());
  Tensor<T> scores = matmul_nt(q, k);
  const T inv = T(1) / std::sqrt(static_cast<T>(q.cols()));
  for (auto& s : scores.values()) s *= inv;
  Attention<T> a;
  a.probs = softmax_rows(scores);
  a.out = matmul(a.probs, v);
  return a;
}

template <typename T>
AttentionGrads<T> scaled_dot_attention_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                                const Tensor<T>& probs, const Tensor<T>& dout) {
  AttentionGrads<T> g;
  // out = P V
  g.dv = matmul_tn(probs, dout);
  Tensor<T> dp = matmul_nt(dout, v);
  Tensor<T> ds = softmax_rows_backward(probs, dp);
  const T inv = T(1) / std::sqrt(static_cast<T>(q.cols()));
  for (auto& s : ds.values()) s *= inv;
  g.dq = matmul(ds, k);
  g.dk = matmul_tn(ds, q);
  return g;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require(x.cols() == w.rows(), "linear(x,W)", x.shape(), w.shape());
  require(b.size() == w.cols(), "linear(W,b)", w.shape(), b.shape());
  Tensor<T> y = matmul(x, w);
  const std::size_t n = y.cols();
  auto bv = b.values();
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto row = y.row(i);
    for (std::size_t j = 0; j < n; ++j) row[j] += bv[j];
  }
  return y;
}

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy) {
  LinearGrads<T> g;
  auto mg = matmul_backward(x, w, dy);
  g.dx = std::move(mg.da);
  g.dw = std::move(mg.db);
  g.db = Tensor<T>(Shape{w.cols()});
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    auto row = dy.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) g.db[j] += row[j];
  }
  return g;
}

template <typename T>
LayerNorm<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t d = x.cols();
  require(gain.size() == d && bias.size() == d, "layer_norm", x.shape(), gain.shape());
  if (!(eps > T(0))) throw std::invalid_argument("layer_norm: eps must be positive");
  LayerNorm<T> f{Tensor<T>(x.shape()), Tensor<T>(x.shape()), std::vector<T>(x.rows())};
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    T mean = 0;
    for (auto v : in) mean += v;
    mean /= static_cast<T>(d);
    T var = 0;
    for (auto v : in) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T rstd = T(1) / std::sqrt(var + eps);
    f.rstd[i] = rstd;
    auto xh = f.xhat.row(i);
    auto out = f.out.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      xh[j] = (in[j] - mean) * rstd;
      out[j] = xh[j] * gain[j] + bias[j];
    }
  }
  return f;
}

template <typename T>
LayerNormGrads<T> layer_norm_backward(const LayerNorm<T>& fwd, const Tensor<T>& gain, const Tensor<T>& dy) {
  const std::size_t d = dy.cols();
  LayerNormGrads<T> g{Tensor<T>(dy.shape()), Tensor<T>(gain.shape()), Tensor<T>(gain.shape())};
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    auto gy = dy.row(i);
    auto xh = fwd.xhat.row(i);
    T sum_g = 0, sum_gx = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T gxh = gy[j] * gain[j];
      sum_g += gxh;
      sum_gx += gxh * xh[j];
      g.dgain[j] += gy[j] * xh[j];
      g.dbias[j] += gy[j];
    }
    auto dx = g.dx.row(i);
    const T inv_d = T(1) / static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const T gxh = gy[j] * gain[j];
      dx[j] = fwd.rstd[i] * (gxh - inv_d * sum_g - xh[j] * inv_d * sum_gx);
    }
  }
  return g;
}

namespace {
template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluA = static_cast<T>(0.044715);
}  // namespace

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.values()) {
    const T u = kGeluC<T> * (v + kGeluA<T> * v * v * v);
    v = T(0.5) * v * (T(1) + std::tanh(u));
  }
  return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  auto xv = x.values();
  auto gv = dy.values();
  auto out = dx.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T v = xv[i];
    const T u = kGeluC<T> * (v + kGeluA<T> * v * v * v);
    const T t = std::tanh(u);
    const T du = kGeluC<T> * (T(1) + T(3) * kGeluA<T> * v * v);
    out[i] = gv[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du);
  }
  return dx;
}

template <typename T>
Loss<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  const std::size_t m = logits.rows(), c = logits.cols();
  if (targets.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(m) +
                         " rows");
  }
  Loss<T> out{T(0), softmax_rows(logits)};
  const Tensor<T> logp = log_softmax_rows(logits);
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= c) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " out of range for " +
                       std::to_string(c) + " classes");
    }
    out.value -= logp(i, targets[i]);
    out.grad(i, targets[i]) -= T(1);
  }
  const T inv_m = T(1) / static_cast<T>(m);
  out.value *= inv_m;
  for (auto& g : out.grad.values()) g *= inv_m;
  return out;
}

template <typename T>
Loss<T> soft_cross_entropy(const Tensor<T>& logits, const Tensor<T>& target_probs) {
  require(logits.shape() == target_probs.shape(), "soft_cross_entropy", logits.shape(), target_probs.shape());
  const std::size_t m = logits.rows();
  Loss<T> out{T(0), softmax_rows(logits)};
  const Tensor<T> logp = log_softmax_rows(logits);
  auto tp = target_probs.values();
  auto lp = logp.values();
  auto g = out.grad.values();
  for (std::size_t i = 0; i < tp.size(); ++i) {
    out.value -= tp[i] * lp[i];
    g[i] -= tp[i];
  }
  const T inv_m = T(1) / static_cast<T>(m);
  out.value *= inv_m;
  for (auto& v : g) v *= inv_m;
  return out;
}

template <typename T>
KlResult<T> kl_divergence(const Tensor<T>& p_logits, const Tensor<T>& q_logits) {
  require(p_logits.shape() == q_logits.shape(), "kl_divergence", p_logits.shape(), q_logits.shape());
  const std::size_t m = p_logits.rows(), c = p_logits.cols();
  const Tensor<T> lp = log_softmax_rows(p_logits);
  const Tensor<T> lq = log_softmax_rows(q_logits);
  KlResult<T> r{T(0), Tensor<T>(p_logits.shape()), Tensor<T>(p_logits.shape())};
  const T inv_m = T(1) / static_cast<T>(m);
  for (std::size_t i = 0; i < m; ++i) {
    T row_kl = 0;
    for (std::size_t j = 0; j < c; ++j) row_kl += std::exp(lp(i, j)) * (lp(i, j) - lq(i, j));
    r.value += row_kl;
    for (std::size_t j = 0; j < c; ++j) {
      const T p = std::exp(lp(i, j));
      r.dp(i, j) = inv_m * p * ((lp(i, j) - lq(i, j)) - row_kl);
      r.dq(i, j) = inv_m * (std::exp(lq(i, j)) - p);
    }
  }
  r.value *= inv_m;
  return r;
}

template <typename T>
KlResult<T> symmetric_kl(const Tensor<T>& p_logits, const Tensor<T>& q_logits) {
  auto a = kl_divergence(p_logits, q_logits);
  auto b = kl_divergence(q_logits, p_logits);
  KlResult<T> r{T(0.5) * (a.value + b.value), add(a.dp, b.dq), add(a.dq, b.dp)};
  for (auto& v : r.dp.values()) v *= T(0.5);
  for (auto& v : r.dq.values()) v *= T(0.5);
  return r;
}

template <typename T>
Normalized<T> l2_normalize_rows(const Tensor<T>& x, T eps) {
  Normalized<T> n{x, std::vector<T>(x.rows())};
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = n.out.row(i);
    T ss = 0;
    for (auto v : row) ss += v * v;
    n.norm[i] = std::sqrt(ss + eps);
    for (auto& v : row) v /= n.norm[i];
  }
  return n;
}

template <typename T>
Tensor<T> l2_normalize_rows_backward(const Tensor<T>& x, const Normalized<T>& fwd, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto xr = x.row(i);
    auto gr = dy.row(i);
    const T n = fwd.norm[i];
    T dot = 0;
    for (std::size_t j = 0; j < xr.size(); ++j) dot += gr[j] * xr[j];
    auto out = dx.row(i);
    const T n3 = n * n * n;
    for (std::size_t j = 0; j < xr.size(); ++j) out[j] = gr[j] / n - xr[j] * dot / n3;
  }
  return dx;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t r0, std::size_t r1) {
  if (r0 >= r1 || r1 > x.rows()) throw IndexError("slice_rows out of range for " + shape_str(x.shape()));
  const std::size_t c = x.cols();
  auto v = x.values();
  return Tensor<T>(Shape{r1 - r0, c}, std::vector<T>(v.begin() + r0 * c, v.begin() + r1 * c));
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t c0, std::size_t c1) {
  if (c0 >= c1 || c1 > x.cols()) throw IndexError("slice_cols out of range for " + shape_str(x.shape()));
  Tensor<T> out(Shape{x.rows(), c1 - c0});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto src = x.row(i);
    std::copy(src.begin() + c0, src.begin() + c1, out.row(i).begin());
  }
  return out;
}

template <typename T>
void add_cols(Tensor<T>& dst, const Tensor<T>& src, std::size_t c0) {
  if (src.rows() != dst.rows() || c0 + src.cols() > dst.cols()) {
    throw DimensionError("add_cols: " + shape_str(src.shape()) + " into " + shape_str(dst.shape()));
  }
  for (std::size_t i = 0; i < src.rows(); ++i) {
    auto s = src.row(i);
    auto d = dst.row(i);
    for (std::size_t j = 0; j < s.size(); ++j) d[c0 + j] += s[j];
  }
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rows() == b.rows(), "concat_cols", a.shape(), b.shape());
  Tensor<T> out(Shape{a.rows(), a.cols() + b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ra = a.row(i);
    auto rb = b.row(i);
    auto o = out.row(i);
    std::copy(ra.begin(), ra.end(), o.begin());
    std::copy(rb.begin(), rb.end(), o.begin() + ra.size());
  }
  return out;
}

template <typename T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no rows");
  const std::size_t c = rows.front().size();
  std::vector<T> data;
  data.reserve(rows.size() * c);
  for (const auto& r : rows) {
    if (r.size() != c) throw DimensionError("stack_rows: ragged rows");
    data.insert(data.end(), r.values().begin(), r.values().end());
  }
  return Tensor<T>(Shape{rows.size(), c}, std::move(data));
}

#define RAMM_INSTANTIATE_OPS(T)                                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> matmul_tn(const Tensor<T>&, const Tensor<T>&);                                          \
  template MatmulGrads<T> matmul_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> transpose(const Tensor<T>&);                                                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                             \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                                         \
  template Tensor<T> softmax_rows_backward(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> log_softmax_rows(const Tensor<T>&);                                                     \
  template Attention<T> scaled_dot_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template AttentionGrads<T> scaled_dot_attention_backward(const Tensor<T>&, const Tensor<T>&,               \
                                                           const Tensor<T>&, const Tensor<T>&,               \
                                                           const Tensor<T>&);                                \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                           \
  template LinearGrads<T> linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template LayerNorm<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                 \
  template LayerNormGrads<T> layer_norm_backward(const LayerNorm<T>&, const Tensor<T>&, const Tensor<T>&);   \
  template Tensor<T> gelu(const Tensor<T>&);                                                                 \
  template Tensor<T> gelu_backward(const Tensor<T>&, const Tensor<T>&);                                      \
  template Loss<T> cross_entropy(const Tensor<T>&, std::span<const std::size_t>);                            \
  template Loss<T> soft_cross_entropy(const Tensor<T>&, const Tensor<T>&);                                   \
  template KlResult<T> kl_divergence(const Tensor<T>&, const Tensor<T>&);                                    \
  template KlResult<T> symmetric_kl(const Tensor<T>&, const Tensor<T>&);                                     \
  template Normalized<T> l2_normalize_rows(const Tensor<T>&, T);                                             \
  template Tensor<T> l2_normalize_rows_backward(const Tensor<T>&, const Normalized<T>&, const Tensor<T>&);   \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                                 \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                                 \
  template void add_cols(Tensor<T>&, const Tensor<T>&, std::size_t);                                         \
  template Tensor<T> concat_cols(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> stack_rows(const std::vector<Tensor<T>>&);

RAMM_INSTANTIATE_OPS(float)
RAMM_INSTANTIATE_OPS(double)

#undef RAMM_INSTANTIATE_OPS

}  // namespace ramm::ops
