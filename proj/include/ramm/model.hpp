#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ramm/layers.hpp"
#include "ramm/params.hpp"
#include "ramm/tensor.hpp"

namespace ramm {

// Thrown when a caller violates an operation's precondition in a way that is
// a programming error rather than bad data (e.g. retrieval attention with no
// retrieved streams).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d = 64;
  std::size_t n_head = 4;
  std::size_t L_fuse = 2;
  std::size_t L_text = 2;
  std::size_t L_image = 2;
  std::size_t d_proj = 32;
  std::size_t d_ff = 0;  // 0 means 4 * d
  std::size_t max_text_len = 32;
  std::size_t patch_grid = 4;
  std::size_t d_patch = 16;
  std::size_t n_answers = 2;
  std::size_t max_r = 8;
  double dropout_rate = 0.1;

  std::size_t ffn_dim() const { return d_ff ? d_ff : 4 * d; }
  std::size_t num_patches() const { return patch_grid * patch_grid; }
  void validate() const;

  // Flat "key=value" lines.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
};

using TokenId = std::uint32_t;

class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kCls = 2;
  static constexpr TokenId kMask = 3;
  static constexpr TokenId kFirstRegular = 4;

  Vocab();

  TokenId add(std::string_view token);
  TokenId id(std::string_view token) const;  // kUnk when absent
  bool contains(std::string_view token) const;
  const std::string& token(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }

  std::string to_text() const;  // one token per line
  static Vocab from_text(const std::string& text);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

// Lowercases and splits on whitespace and ASCII punctuation; punctuation is
// a separator and never becomes a token.
std::vector<std::string> split_words(std::string_view text);

struct TokenSequence {
  std::vector<TokenId> ids;  // ids[0] == Vocab::kCls
  std::size_t size() const { return ids.size(); }
};

TokenSequence tokenize(std::string_view text, const Vocab& vocab, std::size_t max_len);

template <typename T>
struct FusionState {
  std::vector<Tensor<T>> text;   // (r+1) x [(n_j+1) x d]; stream 0 is the original sample
  std::vector<Tensor<T>> image;  // (r+1) x [(m+1) x d]
  std::size_t layer = 0;

  std::size_t streams() const { return text.size(); }
};

template <typename T>
struct TextTrace {
  std::vector<TokenId> ids;
  std::vector<nn::EncoderLayerCache<T>> layers;
  nn::NormCache<T> final_norm;
};

template <typename T>
struct ImageTrace {
  nn::LinearCache<T> patch;
  std::vector<nn::EncoderLayerCache<T>> layers;
  nn::NormCache<T> final_norm;
};

template <typename T>
struct ProjectionTrace {
  nn::LinearCache<T> lin;
  Tensor<T> pre;
  ops::Normalized<T> norm;
};

template <typename T>
struct FusionSideCache {
  nn::NormCache<T> n_self, n_cross, n_ffn;
  nn::AttnCache<T> self, cross;
  nn::FfnCache<T> ffn;
  nn::DropCache<T> d_self, d_cross, d_ffn;
};

template <typename T>
struct RetrievalCache {
  nn::NormCache<T> norm;
  nn::AttnCache<T> attn;
  nn::DropCache<T> drop;
};

template <typename T>
struct FusionLayerCache {
  std::vector<FusionSideCache<T>> text, image;  // per stream
  bool retrieval_ran = false;
  RetrievalCache<T> ret_text, ret_image;
};

template <typename T>
struct FuseTrace {
  std::vector<FusionLayerCache<T>> layers;
  nn::NormCache<T> final_text, final_image;
  std::size_t streams = 0;
};

template <typename T>
struct HeadTrace {
  nn::LinearCache<T> fc1, fc2;
  Tensor<T> pre;
};

template <typename T>
struct FusedPair {
  Tensor<T> text;   // w_L^0, [(n+1) x d]
  Tensor<T> image;  // v_L^0, [(m+1) x d]
};

template <typename T>
struct StreamGrads {
  std::vector<Tensor<T>> text, image;
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t init_seed);
  // Adopts an existing parameter set; its manifest must match the layout
  // this config produces.
  Model(const ModelConfig& config, ParamStore<T> params);

  const ModelConfig& config() const { return config_; }
  const ParamStore<T>& params() const { return params_; }
  ParamStore<T>& params() { return params_; }

  // Copies every parameter of `source` whose name and shape match; returns
  // the number copied.
  std::size_t load_matching(const ParamStore<T>& source);

  Tensor<T> encode_text(const TokenSequence& seq, const DropoutContext& ctx = {}, std::uint64_t stream = 0,
                        TextTrace<T>* trace = nullptr) const;
  void encode_text_backward(const TextTrace<T>& trace, const Tensor<T>& dout, ParamStore<T>& grads) const;

  // patches: [num_patches x d_patch]
  Tensor<T> encode_image(const Tensor<T>& patches, const DropoutContext& ctx = {}, std::uint64_t stream = 0,
                         ImageTrace<T>* trace = nullptr) const;
  void encode_image_backward(const ImageTrace<T>& trace, const Tensor<T>& dout, ParamStore<T>& grads) const;

  // g_w / g_v: linear then L2 normalize. cls is a [1 x d] row.
  Tensor<T> project_text(const Tensor<T>& cls, ProjectionTrace<T>* trace = nullptr) const;
  Tensor<T> project_image(const Tensor<T>& cls, ProjectionTrace<T>* trace = nullptr) const;
  Tensor<T> project_text_backward(const ProjectionTrace<T>& trace, const Tensor<T>& dout,
                                  ParamStore<T>& grads) const;
  Tensor<T> project_image_backward(const ProjectionTrace<T>& trace, const Tensor<T>& dout,
                                   ParamStore<T>& grads) const;

  // One co-attention layer over all streams: self -> cross -> retrieval
  // (when enabled and r >= 1) -> FFN.
  FusionState<T> fusion_layer(FusionState<T> state, bool retrieval_enabled, const DropoutContext& ctx = {},
                              FusionLayerCache<T>* cache = nullptr) const;
  // Updates only the CLS row of stream 0 in each modality. Requires r >= 1.
  void retrieval_attention(FusionState<T>& state, std::size_t layer, const DropoutContext& ctx = {},
                           FusionLayerCache<T>* cache = nullptr) const;

  // Runs all fusion layers on (text0, image0) plus retrieved pairs and
  // returns the normalized final stream-0 representations.
  FusedPair<T> fuse(const Tensor<T>& text0, const Tensor<T>& image0, const std::vector<Tensor<T>>& retrieved_text,
                    const std::vector<Tensor<T>>& retrieved_image, bool retrieval_enabled = true,
                    const DropoutContext& ctx = {}, FuseTrace<T>* trace = nullptr) const;
  // Gradients w.r.t. every input stream (index 0 = original sample).
  StreamGrads<T> fuse_backward(const FuseTrace<T>& trace, const Tensor<T>& d_text, const Tensor<T>& d_image,
                               ParamStore<T>& grads) const;

  // Heads. CLS inputs are [1 x d] rows; logits are [1 x classes].
  Tensor<T> vqa_logits(const Tensor<T>& w_cls, const Tensor<T>& v_cls, HeadTrace<T>* trace = nullptr) const;
  Tensor<T> itm_logits(const Tensor<T>& w_cls, const Tensor<T>& v_cls, HeadTrace<T>* trace = nullptr) const;
  // [(n+1) x vocab]
  Tensor<T> mlm_logits(const Tensor<T>& w_fused, HeadTrace<T>* trace = nullptr) const;
  std::pair<Tensor<T>, Tensor<T>> vqa_backward(const HeadTrace<T>& trace, const Tensor<T>& dlogits,
                                               ParamStore<T>& grads) const;
  std::pair<Tensor<T>, Tensor<T>> itm_backward(const HeadTrace<T>& trace, const Tensor<T>& dlogits,
                                               ParamStore<T>& grads) const;
  Tensor<T> mlm_backward(const HeadTrace<T>& trace, const Tensor<T>& dlogits, ParamStore<T>& grads) const;

  // Hash over the frozen retrieval path (uni-modal encoders + ITC heads)
  // and d_proj.
  std::uint64_t retrieval_fingerprint() const;

 private:
  struct FusionSideIdx {
    nn::NormIdx n_self, n_cross, n_ret, n_ffn;
    nn::AttnIdx self, cross, ret;
    nn::FfnIdx ffn;
    std::uint64_t site = 0;
  };
  struct FusionLayerIdx {
    FusionSideIdx text, image;
  };
  struct HeadIdx {
    nn::LinearIdx fc1, fc2;
  };

  void build(std::uint64_t init_seed);
  Tensor<T> head_fwd(const HeadIdx& idx, const Tensor<T>& x, HeadTrace<T>* trace) const;
  Tensor<T> head_bwd(const HeadIdx& idx, const HeadTrace<T>& trace, const Tensor<T>& dy, ParamStore<T>& g) const;

  ModelConfig config_;
  ParamStore<T> params_;

  std::size_t tok_emb_ = 0, text_pos_ = 0, image_cls_ = 0, image_pos_ = 0;
  nn::LinearIdx patch_proj_, proj_text_, proj_image_;
  std::vector<nn::EncoderLayerIdx> text_layers_, image_layers_;
  nn::NormIdx text_final_, image_final_;
  std::vector<FusionLayerIdx> fusion_;
  nn::NormIdx fuse_final_text_, fuse_final_image_;
  HeadIdx vqa_, itm_, mlm_;
};

using ModelF = Model<float>;
using ModelD = Model<double>;

// Checkpoint directory layout: config.txt, vocab.txt, params/ (weights
// manifest), optional answers.txt and retriever/ (frozen retrieval model).
struct Checkpoint {
  ModelConfig config;
  Vocab vocab;
  ParamStore<float> params;
  std::vector<std::string> answers;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace ramm
