#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ramm/model.hpp"
#include "ramm/ops.hpp"
#include "ramm/params.hpp"

namespace ramm {

struct TrainConfig {
  double itc_temperature = 0.07;
  double momentum = 0.995;     // momentum-encoder EMA during pretraining
  double ema_decay = 0.999;    // weight EMA during fine-tuning
  double rdrop_alpha = 0.6;
  double mask_rate = 0.15;
  double distill_weight = 0.4;  // soft-target share of the ITC targets
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  double warmup_fraction = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

template <typename T>
struct ItcResult {
  T loss{};
  Tensor<T> d_text, d_image;  // [B x d_proj]
};

// Symmetric InfoNCE over the BxB similarity matrix image_i . text_j / tau.
// With soft targets (rows sum to 1) each direction uses them in place of the
// one-hot diagonal.
template <typename T>
ItcResult<T> itc_loss(const Tensor<T>& text_proj, const Tensor<T>& image_proj, T tau,
                      const Tensor<T>* i2t_targets = nullptr, const Tensor<T>* t2i_targets = nullptr);

// Mixes softmax(momentum similarities / tau) with one-hot targets:
// w * soft + (1 - w) * onehot, for image->text and text->image.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> distillation_targets(const Tensor<T>& text_proj_m, const Tensor<T>& image_proj_m,
                                                     T tau, T weight);

template <typename T>
struct ItmResult {
  T loss{};
  Tensor<T> dlogits;
  bool single_class = false;  // every label identical; loss is still defined
};

template <typename T>
ItmResult<T> itm_loss(const Tensor<T>& logits, std::span<const std::size_t> labels);

struct MaskedTokens {
  TokenSequence corrupted;
  std::vector<std::size_t> positions;
  std::vector<TokenId> targets;
};

// Selects each non-CLS position with probability `rate`; selected positions
// become [MASK] 80%, a random regular token 10%, unchanged 10%. When nothing
// is selected one position is forced to [MASK]. Pure in (seq, rate, seed).
MaskedTokens mask_tokens(const TokenSequence& seq, double rate, std::uint64_t seed, std::size_t vocab_size);

// Cross-entropy over the masked rows of [(n+1) x vocab] logits.
template <typename T>
ops::Loss<T> mlm_loss(const Tensor<T>& logits, const MaskedTokens& masked);

// Random derangement (Sattolo's algorithm): perm[i] != i for n >= 2.
std::vector<std::size_t> derangement(std::size_t n, std::uint64_t seed);

template <typename T>
struct PretrainExample {
  TokenSequence text;
  Tensor<T> patches;
};

template <typename T>
struct PretrainLoss {
  T itc{}, itm{}, mlm{};
  T total{};  // itc + itm + mlm
};

// One pretraining objective evaluation over a batch (B >= 2). When `grads`
// is non-null, parameter gradients of the total are accumulated into it.
// `momentum` (optional) supplies soft ITC targets.
template <typename T>
PretrainLoss<T> pretrain_loss(const Model<T>& model, const std::vector<PretrainExample<T>>& batch,
                              const TrainConfig& cfg, std::uint64_t step, const DropoutContext& ctx,
                              ParamStore<T>* grads, const Model<T>* momentum = nullptr);

template <typename T>
struct VqaExample {
  TokenSequence question;
  Tensor<T> patches;
  std::vector<TokenSequence> retrieved_text;
  std::vector<Tensor<T>> retrieved_patches;
  std::size_t answer = 0;
};

template <typename T>
struct VqaTrace {
  TextTrace<T> question;
  ImageTrace<T> image;
  std::vector<TextTrace<T>> retrieved_text;
  std::vector<ImageTrace<T>> retrieved_image;
  FuseTrace<T> fuse;
  HeadTrace<T> head;
};

// Uni-modal encoders on the sample and its retrieved pairs, fusion, VQA head.
template <typename T>
Tensor<T> vqa_forward(const Model<T>& model, const VqaExample<T>& ex, bool retrieval_enabled,
                      const DropoutContext& ctx, VqaTrace<T>* trace = nullptr);
template <typename T>
void vqa_backward(const Model<T>& model, const VqaTrace<T>& trace, const Tensor<T>& dlogits, ParamStore<T>& grads);

template <typename T>
struct FinetuneLoss {
  T ce{};   // mean cross-entropy of the two passes
  T kl{};   // symmetric KL between the passes
  T total{};
};

// Two dropout passes per sample (pass ids 0 and 1); loss = mean CE +
// alpha * symmetric KL, averaged over the batch. Throws ContractError when
// ctx has no dropout unless `allow_no_dropout` is set.
template <typename T>
FinetuneLoss<T> rdrop_finetune_loss(const Model<T>& model, const std::vector<VqaExample<T>>& batch, double alpha,
                                    bool retrieval_enabled, const DropoutContext& ctx, ParamStore<T>* grads,
                                    bool allow_no_dropout = false);

// Plain cross-entropy fine-tuning loss (single pass).
template <typename T>
T vqa_ce_loss(const Model<T>& model, const std::vector<VqaExample<T>>& batch, bool retrieval_enabled,
              const DropoutContext& ctx, ParamStore<T>* grads);

// Decoupled weight decay Adam. Decay applies to rank-2 tensors only.
class AdamW {
 public:
  AdamW(const ParamStore<float>& like, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
        double weight_decay = 0.01);
  void step(ParamStore<float>& params, const ParamStore<float>& grads, double lr);
  std::uint64_t steps() const { return t_; }

 private:
  ParamStore<float> m_, v_;
  double beta1_, beta2_, eps_, wd_;
  std::uint64_t t_ = 0;
};

// Linear warmup (optional) then linear decay to zero at total_steps.
double linear_schedule(double base_lr, std::uint64_t step, std::uint64_t total_steps, double warmup_fraction);

// Scales grads so their global L2 norm is at most max_norm; returns the
// pre-clip norm.
double clip_grad_norm(ParamStore<float>& grads, double max_norm);

}  // namespace ramm
