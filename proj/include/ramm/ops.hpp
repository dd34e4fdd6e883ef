#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ramm/tensor.hpp"

// Dense kernels with hand-written backward passes. All functions are pure;
// 2-D arguments are [rows x cols], 1-D bias/gain vectors broadcast over rows.
namespace ramm::ops {

template <typename T>
struct MatmulGrads {
  Tensor<T> da, db;
};

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a . b^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
// a^T . b
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dc);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& x);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);
// Jacobian-vector product given the forward output y.
template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy);
template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x);

template <typename T>
struct Attention {
  Tensor<T> out;
  Tensor<T> probs;  // [q x s], kept for the backward pass
};

template <typename T>
struct AttentionGrads {
  Tensor<T> dq, dk, dv;
};

// softmax(Q K^T / sqrt(d_k)) V
template <typename T>
Attention<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);
template <typename T>
AttentionGrads<T> scaled_dot_attention_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                                const Tensor<T>& probs, const Tensor<T>& dout);

template <typename T>
struct LinearGrads {
  Tensor<T> dx, dw, db;
};

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);
template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy);

template <typename T>
struct LayerNorm {
  Tensor<T> out;
  Tensor<T> xhat;
  std::vector<T> rstd;
};

template <typename T>
struct LayerNormGrads {
  Tensor<T> dx, dgain, dbias;
};

// Population variance per row.
template <typename T>
LayerNorm<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);
template <typename T>
LayerNormGrads<T> layer_norm_backward(const LayerNorm<T>& fwd, const Tensor<T>& gain, const Tensor<T>& dy);

// gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy);

template <typename T>
struct Loss {
  T value{};
  Tensor<T> grad;  // d value / d input
};

// Mean over rows of -log softmax(logits)[target].
template <typename T>
Loss<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets);

// Mean over rows of -sum_c target[c] log softmax(logits)[c]; target rows sum to 1.
template <typename T>
Loss<T> soft_cross_entropy(const Tensor<T>& logits, const Tensor<T>& target_probs);

template <typename T>
struct KlResult {
  T value{};
  Tensor<T> dp, dq;  // gradients w.r.t. the two logit arguments
};

// Mean over rows of KL(softmax(p) || softmax(q)).
template <typename T>
KlResult<T> kl_divergence(const Tensor<T>& p_logits, const Tensor<T>& q_logits);
// (KL(p||q) + KL(q||p)) / 2
template <typename T>
KlResult<T> symmetric_kl(const Tensor<T>& p_logits, const Tensor<T>& q_logits);

template <typename T>
struct Normalized {
  Tensor<T> out;
  std::vector<T> norm;  // sqrt(|x|^2 + eps) per row
};

template <typename T>
Normalized<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12));
template <typename T>
Tensor<T> l2_normalize_rows_backward(const Tensor<T>& x, const Normalized<T>& fwd, const Tensor<T>& dy);

// Rows [r0, r1) and columns [c0, c1) helpers.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t r0, std::size_t r1);
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t c0, std::size_t c1);
template <typename T>
void add_cols(Tensor<T>& dst, const Tensor<T>& src, std::size_t c0);
template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows);

}  // namespace ramm::ops
