#include "ramm/model.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "ramm/bytes.hpp"
#include "ramm/rng.hpp"

namespace ramm {

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string("ModelConfig: ") + name + " must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(d, "d");
  positive(n_head, "n_head");
  positive(L_fuse, "L_fuse");
  positive(L_text, "L_text");
  positive(L_image, "L_image");
  positive(d_proj, "d_proj");
  positive(max_text_len, "max_text_len");
  positive(patch_grid, "patch_grid");
  positive(d_patch, "d_patch");
  positive(n_answers, "n_answers");
  if (d % n_head != 0) throw std::invalid_argument("ModelConfig: d must be divisible by n_head");
  if (vocab_size <= Vocab::kFirstRegular) throw std::invalid_argument("ModelConfig: vocab must extend past specials");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw std::invalid_argument("ModelConfig: dropout_rate in [0,1)");
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "vocab_size=" << vocab_size << "\n"
     << "d=" << d << "\n"
     << "n_head=" << n_head << "\n"
     << "L_fuse=" << L_fuse << "\n"
     << "L_text=" << L_text << "\n"
     << "L_image=" << L_image << "\n"
     << "d_proj=" << d_proj << "\n"
     << "d_ff=" << d_ff << "\n"
     << "max_text_len=" << max_text_len << "\n"
     << "patch_grid=" << patch_grid << "\n"
     << "d_patch=" << d_patch << "\n"
     << "n_answers=" << n_answers << "\n"
     << "max_r=" << max_r << "\n"
     << "dropout_rate=" << dropout_rate << "\n";
  return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("bad config line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    auto as_size = [&] { return static_cast<std::size_t>(std::stoull(val)); };
    if (key == "vocab_size") c.vocab_size = as_size();
    else if (key == "d") c.d = as_size();
    else if (key == "n_head") c.n_head = as_size();
    else if (key == "L_fuse") c.L_fuse = as_size();
    else if (key == "L_text") c.L_text = as_size();
    else if (key == "L_image") c.L_image = as_size();
    else if (key == "d_proj") c.d_proj = as_size();
    else if (key == "d_ff") c.d_ff = as_size();
    else if (key == "max_text_len") c.max_text_len = as_size();
    else if (key == "patch_grid") c.patch_grid = as_size();
    else if (key == "d_patch") c.d_patch = as_size();
    else if (key == "n_answers") c.n_answers = as_size();
    else if (key == "max_r") c.max_r = as_size();
    else if (key == "dropout_rate") c.dropout_rate = std::stod(val);
    else throw std::invalid_argument("unknown config key: " + key);
  }
  return c;
}

// ---------------------------------------------------------------- vocab

Vocab::Vocab() {
  for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[MASK]"}) add(s);
}

TokenId Vocab::add(std::string_view token) {
  auto it = ids_.find(std::string(token));
  if (it != ids_.end()) return it->second;
  const auto id = static_cast<TokenId>(tokens_.size());
  tokens_.emplace_back(token);
  ids_.emplace(tokens_.back(), id);
  return id;
}

TokenId Vocab::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const { return ids_.contains(std::string(token)); }

const std::string& Vocab::token(TokenId id) const {
  if (id >= tokens_.size()) throw IndexError("token id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

std::string Vocab::to_text() const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  return out;
}

Vocab Vocab::from_text(const std::string& text) {
  Vocab v;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (n++ < kFirstRegular) continue;  // specials are fixed
    if (!line.empty()) v.add(line);
  }
  return v;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char ch : text) {
    if (ch >= 0x80 || std::isalnum(ch)) {
      cur += static_cast<char>(ch < 0x80 ? std::tolower(ch) : ch);
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

TokenSequence tokenize(std::string_view text, const Vocab& vocab, std::size_t max_len) {
  TokenSequence seq;
  seq.ids.push_back(Vocab::kCls);
  for (const auto& w : split_words(text)) {
    if (seq.ids.size() >= max_len) break;
    seq.ids.push_back(vocab.id(w));
  }
  return seq;
}

// ---------------------------------------------------------------- model

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, double sd, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal() * sd);
  return t;
}

template <typename T>
Tensor<T> row_of(const Tensor<T>& x, std::size_t r) {
  auto src = x.row(r);
  return Tensor<T>(Shape{1, src.size()}, std::vector<T>(src.begin(), src.end()));
}

template <typename T>
void add_row(Tensor<T>& dst, std::size_t r, std::span<const T> src) {
  auto d = dst.row(r);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
}

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  build(init_seed);
}

template <typename T>
Model<T>::Model(const ModelConfig& config, ParamStore<T> params) : config_(config) {
  config_.validate();
  build(0);
  if (params.manifest() != params_.manifest()) {
    throw StructuralError("parameter manifest does not match the model layout for this config");
  }
  params_ = std::move(params);
}

template <typename T>
void Model<T>::build(std::uint64_t init_seed) {
  Rng rng(init_seed);
  const std::size_t d = config_.d, dff = config_.ffn_dim();
  auto& p = params_;
  constexpr double kEmbSd = 0.1;

  tok_emb_ = p.add("text.tok_emb", random_tensor<T>({config_.vocab_size, d}, kEmbSd, rng));
  text_pos_ = p.add("text.pos_emb", random_tensor<T>({config_.max_text_len, d}, kEmbSd, rng));
  for (std::size_t i = 0; i < config_.L_text; ++i) {
    text_layers_.push_back(nn::add_encoder_layer(p, "text.layer" + std::to_string(i), d, dff, rng));
  }
  text_final_ = nn::add_norm(p, "text.ln_f", d);

  patch_proj_ = nn::add_linear(p, "image.patch", config_.d_patch, d, rng);
  image_cls_ = p.add("image.cls", random_tensor<T>({1, d}, kEmbSd, rng));
  image_pos_ = p.add("image.pos_emb", random_tensor<T>({config_.num_patches() + 1, d}, kEmbSd, rng));
  for (std::size_t i = 0; i < config_.L_image; ++i) {
    image_layers_.push_back(nn::add_encoder_layer(p, "image.layer" + std::to_string(i), d, dff, rng));
  }
  image_final_ = nn::add_norm(p, "image.ln_f", d);

  proj_text_ = nn::add_linear(p, "proj_text", d, config_.d_proj, rng);
  proj_image_ = nn::add_linear(p, "proj_image", d, config_.d_proj, rng);

  for (std::size_t i = 0; i < config_.L_fuse; ++i) {
    FusionLayerIdx layer;
    for (auto [side, name] : {std::pair{&layer.text, "text"}, std::pair{&layer.image, "image"}}) {
      const std::string pre = "fuse.layer" + std::to_string(i) + "." + name;
      side->n_self = nn::add_norm(p, pre + ".ln_self", d);
      side->self = nn::add_attention(p, pre + ".self", d, rng);
      side->n_cross = nn::add_norm(p, pre + ".ln_cross", d);
      side->cross = nn::add_attention(p, pre + ".cross", d, rng);
      side->n_ret = nn::add_norm(p, pre + ".ln_ret", d);
      side->ret = nn::add_attention(p, pre + ".ret", d, rng);
      side->n_ffn = nn::add_norm(p, pre + ".ln_ffn", d);
      side->ffn = nn::add_ffn(p, pre + ".ffn", d, dff, rng);
      side->site = nn::site_id(pre);
    }
    fusion_.push_back(layer);
  }
  fuse_final_text_ = nn::add_norm(p, "fuse.ln_text", d);
  fuse_final_image_ = nn::add_norm(p, "fuse.ln_image", d);

  vqa_ = {nn::add_linear(p, "head.vqa.fc1", 2 * d, d, rng), nn::add_linear(p, "head.vqa.fc2", d, config_.n_answers, rng)};
  itm_ = {nn::add_linear(p, "head.itm.fc1", 2 * d, d, rng), nn::add_linear(p, "head.itm.fc2", d, 2, rng)};
  mlm_ = {nn::add_linear(p, "head.mlm.fc1", d, d, rng), nn::add_linear(p, "head.mlm.fc2", d, config_.vocab_size, rng)};
}

template <typename T>
std::size_t Model<T>::load_matching(const ParamStore<T>& source) {
  std::size_t copied = 0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& name = params_.name(i);
    if (!source.contains(name)) continue;
    const auto& src = source.at(name);
    if (src.shape() != params_[i].shape()) continue;
    params_[i] = src;
    ++copied;
  }
  return copied;
}

// ---- uni-modal encoders

template <typename T>
Tensor<T> Model<T>::encode_text(const TokenSequence& seq, const DropoutContext& ctx, std::uint64_t stream,
                                TextTrace<T>* trace) const {
  const std::size_t n = seq.ids.size(), d = config_.d;
  if (n == 0 || n > config_.max_text_len) {
    throw DimensionError("encode_text: sequence length " + std::to_string(n) + " outside [1, " +
                         std::to_string(config_.max_text_len) + "]");
  }
  const auto& emb = params_[tok_emb_];
  const auto& pos = params_[text_pos_];
  Tensor<T> x(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i) {
    if (seq.ids[i] >= config_.vocab_size) {
      throw IndexError("encode_text: token id " + std::to_string(seq.ids[i]) + " >= vocab_size " +
                       std::to_string(config_.vocab_size));
    }
    auto e = emb.row(seq.ids[i]);
    auto ps = pos.row(i);
    auto out = x.row(i);
    for (std::size_t j = 0; j < d; ++j) out[j] = e[j] + ps[j];
  }
  if (trace) {
    trace->ids = seq.ids;
    trace->layers.assign(text_layers_.size(), {});
  }
  for (std::size_t l = 0; l < text_layers_.size(); ++l) {
    x = nn::encoder_layer_fwd(params_, text_layers_[l], config_.n_head, std::move(x), ctx, stream,
                              trace ? &trace->layers[l] : nullptr);
  }
  return nn::norm_fwd(params_, text_final_, x, trace ? &trace->final_norm : nullptr);
}

template <typename T>
void Model<T>::encode_text_backward(const TextTrace<T>& trace, const Tensor<T>& dout, ParamStore<T>& g) const {
  Tensor<T> dx = nn::norm_bwd(params_, text_final_, trace.final_norm, dout, g);
  for (std::size_t l = text_layers_.size(); l-- > 0;) {
    dx = nn::encoder_layer_bwd(params_, text_layers_[l], config_.n_head, trace.layers[l], std::move(dx), g);
  }
  for (std::size_t i = 0; i < trace.ids.size(); ++i) {
    add_row(g[tok_emb_], trace.ids[i], std::span<const T>(dx.row(i)));
    add_row(g[text_pos_], i, std::span<const T>(dx.row(i)));
  }
}

template <typename T>
Tensor<T> Model<T>::encode_image(const Tensor<T>& patches, const DropoutContext& ctx, std::uint64_t stream,
                                 ImageTrace<T>* trace) const {
  if (patches.rank() != 2 || patches.rows() != config_.num_patches() || patches.cols() != config_.d_patch) {
    throw DimensionError("encode_image: expected patches [" + std::to_string(config_.num_patches()) + "x" +
                         std::to_string(config_.d_patch) + "], got " + shape_str(patches.shape()));
  }
  const std::size_t m = patches.rows(), d = config_.d;
  Tensor<T> proj = nn::linear_fwd(params_, patch_proj_, patches, trace ? &trace->patch : nullptr);
  Tensor<T> x(Shape{m + 1, d});
  const auto& pos = params_[image_pos_];
  const auto& cls = params_[image_cls_];
  for (std::size_t j = 0; j < d; ++j) x(0, j) = cls[j] + pos(0, j);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i + 1, j) = proj(i, j) + pos(i + 1, j);
  if (trace) trace->layers.assign(image_layers_.size(), {});
  for (std::size_t l = 0; l < image_layers_.size(); ++l) {
    x = nn::encoder_layer_fwd(params_, image_layers_[l], config_.n_head, std::move(x), ctx, stream,
                              trace ? &trace->layers[l] : nullptr);
  }
  return nn::norm_fwd(params_, image_final_, x, trace ? &trace->final_norm : nullptr);
}

template <typename T>
void Model<T>::encode_image_backward(const ImageTrace<T>& trace, const Tensor<T>& dout, ParamStore<T>& g) const {
  Tensor<T> dx = nn::norm_bwd(params_, image_final_, trace.final_norm, dout, g);
  for (std::size_t l = image_layers_.size(); l-- > 0;) {
    dx = nn::encoder_layer_bwd(params_, image_layers_[l], config_.n_head, trace.layers[l], std::move(dx), g);
  }
  ops::add_inplace(g[image_pos_], dx);
  add_row(g[image_cls_], 0, std::span<const T>(dx.row(0)));
  nn::linear_bwd(params_, patch_proj_, trace.patch, ops::slice_rows(dx, 1, dx.rows()), g);
}

// ---- ITC projections

template <typename T>
Tensor<T> Model<T>::project_text(const Tensor<T>& cls, ProjectionTrace<T>* trace) const {
  Tensor<T> pre = nn::linear_fwd(params_, proj_text_, cls, trace ? &trace->lin : nullptr);
  auto n = ops::l2_normalize_rows(pre);
  Tensor<T> out = n.out;
  if (trace) {
    trace->pre = std::move(pre);
    trace->norm = std::move(n);
  }
  return out;
}

template <typename T>
Tensor<T> Model<T>::project_image(const Tensor<T>& cls, ProjectionTrace<T>* trace) const {
  Tensor<T> pre = nn::linear_fwd(params_, proj_image_, cls, trace ? &trace->lin : nullptr);
  auto n = ops::l2_normalize_rows(pre);
  Tensor<T> out = n.out;
  if (trace) {
    trace->pre = std::move(pre);
    trace->norm = std::move(n);
  }
  return out;
}

template <typename T>
Tensor<T> Model<T>::project_text_backward(const ProjectionTrace<T>& trace, const Tensor<T>& dout,
                                          ParamStore<T>& g) const {
  return nn::linear_bwd(params_, proj_text_, trace.lin, ops::l2_normalize_rows_backward(trace.pre, trace.norm, dout),
                        g);
}

template <typename T>
Tensor<T> Model<T>::project_image_backward(const ProjectionTrace<T>& trace, const Tensor<T>& dout,
                                           ParamStore<T>& g) const {
  return nn::linear_bwd(params_, proj_image_, trace.lin,
                        ops::l2_normalize_rows_backward(trace.pre, trace.norm, dout), g);
}

// ---- fusion

namespace {
constexpr std::uint64_t kSiteSelf = 0, kSiteCross = 1, kSiteRet = 2, kSiteFfn = 3;
}

template <typename T>
FusionState<T> Model<T>::fusion_layer(FusionState<T> s, bool retrieval_enabled, const DropoutContext& ctx,
                                      FusionLayerCache<T>* c) const {
  if (s.layer >= fusion_.size()) throw IndexError("fusion_layer: layer index past L_fuse");
  if (s.text.size() != s.image.size() || s.text.empty()) {
    throw DimensionError("fusion_layer: text and image stream counts differ or are zero");
  }
  const auto& L = fusion_[s.layer];
  const std::size_t H = config_.n_head, S = s.streams();
  if (c) {
    c->text.assign(S, {});
    c->image.assign(S, {});
    c->retrieval_ran = false;
  }
  for (std::size_t j = 0; j < S; ++j) {
    auto* ct = c ? &c->text[j] : nullptr;
    auto* ci = c ? &c->image[j] : nullptr;
    Tensor<T>& w = s.text[j];
    Tensor<T>& v = s.image[j];
    if (w.cols() != config_.d || v.cols() != config_.d) throw DimensionError("fusion_layer: stream width != d");

    Tensor<T> a = nn::norm_fwd(params_, L.text.n_self, w, ct ? &ct->n_self : nullptr);
    Tensor<T> b = nn::norm_fwd(params_, L.image.n_self, v, ci ? &ci->n_self : nullptr);
    ops::add_inplace(w, nn::dropout_fwd(ctx, L.text.site + kSiteSelf, j,
                                        nn::attn_fwd(params_, L.text.self, H, a, a, ct ? &ct->self : nullptr),
                                        ct ? &ct->d_self : nullptr));
    ops::add_inplace(v, nn::dropout_fwd(ctx, L.image.site + kSiteSelf, j,
                                        nn::attn_fwd(params_, L.image.self, H, b, b, ci ? &ci->self : nullptr),
                                        ci ? &ci->d_self : nullptr));

    // Both directions read the post-self-attention states of the other side.
    a = nn::norm_fwd(params_, L.text.n_cross, w, ct ? &ct->n_cross : nullptr);
    b = nn::norm_fwd(params_, L.image.n_cross, v, ci ? &ci->n_cross : nullptr);
    Tensor<T> to_text = nn::attn_fwd(params_, L.text.cross, H, a, b, ct ? &ct->cross : nullptr);
    Tensor<T> to_image = nn::attn_fwd(params_, L.image.cross, H, b, a, ci ? &ci->cross : nullptr);
    ops::add_inplace(w, nn::dropout_fwd(ctx, L.text.site + kSiteCross, j, std::move(to_text),
                                        ct ? &ct->d_cross : nullptr));
    ops::add_inplace(v, nn::dropout_fwd(ctx, L.image.site + kSiteCross, j, std::move(to_image),
                                        ci ? &ci->d_cross : nullptr));
  }

  if (retrieval_enabled && S > 1) {
    retrieval_attention(s, s.layer, ctx, c);
    if (c) c->retrieval_ran = true;
  }

  for (std::size_t j = 0; j < S; ++j) {
    auto* ct = c ? &c->text[j] : nullptr;
    auto* ci = c ? &c->image[j] : nullptr;
    Tensor<T> a = nn::norm_fwd(params_, L.text.n_ffn, s.text[j], ct ? &ct->n_ffn : nullptr);
    ops::add_inplace(s.text[j], nn::dropout_fwd(ctx, L.text.site + kSiteFfn, j,
                                                nn::ffn_fwd(params_, L.text.ffn, a, ct ? &ct->ffn : nullptr),
                                                ct ? &ct->d_ffn : nullptr));
    Tensor<T> b = nn::norm_fwd(params_, L.image.n_ffn, s.image[j], ci ? &ci->n_ffn : nullptr);
    ops::add_inplace(s.image[j], nn::dropout_fwd(ctx, L.image.site + kSiteFfn, j,
                                                 nn::ffn_fwd(params_, L.image.ffn, b, ci ? &ci->ffn : nullptr),
                                                 ci ? &ci->d_ffn : nullptr));
  }
  ++s.layer;
  return s;
}

template <typename T>
void Model<T>::retrieval_attention(FusionState<T>& s, std::size_t layer, const DropoutContext& ctx,
                                   FusionLayerCache<T>* c) const {
  if (s.streams() < 2) {
    throw ContractError("retrieval_attention requires at least one retrieved stream; skip the sublayer when r == 0");
  }
  if (layer >= fusion_.size()) throw IndexError("retrieval_attention: layer index past L_fuse");
  const auto& L = fusion_[layer];
  const std::size_t H = config_.n_head;
  auto run = [&](const FusionSideIdx& side, std::vector<Tensor<T>>& streams, RetrievalCache<T>* rc) {
    std::vector<Tensor<T>> cls;
    cls.reserve(streams.size());
    for (const auto& st : streams) cls.push_back(row_of(st, 0));
    // Keys/values are the CLS rows of streams 0..r; the query is stream 0.
    Tensor<T> keys = nn::norm_fwd(params_, side.n_ret, ops::stack_rows(cls), rc ? &rc->norm : nullptr);
    Tensor<T> query = ops::slice_rows(keys, 0, 1);
    Tensor<T> out = nn::attn_fwd(params_, side.ret, H, query, keys, rc ? &rc->attn : nullptr);
    out = nn::dropout_fwd(ctx, side.site + kSiteRet, 0, std::move(out), rc ? &rc->drop : nullptr);
    add_row(streams[0], 0, std::span<const T>(out.values()));
  };
  run(L.text, s.text, c ? &c->ret_text : nullptr);
  run(L.image, s.image, c ? &c->ret_image : nullptr);
}

template <typename T>
FusedPair<T> Model<T>::fuse(const Tensor<T>& text0, const Tensor<T>& image0,
                            const std::vector<Tensor<T>>& retrieved_text,
                            const std::vector<Tensor<T>>& retrieved_image, bool retrieval_enabled,
                            const DropoutContext& ctx, FuseTrace<T>* trace) const {
  if (retrieved_text.size() != retrieved_image.size()) {
    throw DimensionError("fuse: retrieved text/image counts differ");
  }
  if (retrieved_text.size() > config_.max_r) {
    throw std::invalid_argument("fuse: r=" + std::to_string(retrieved_text.size()) + " exceeds max_r=" +
                                std::to_string(config_.max_r));
  }
  FusionState<T> s;
  s.text.reserve(retrieved_text.size() + 1);
  s.image.reserve(retrieved_text.size() + 1);
  s.text.push_back(text0);
  s.image.push_back(image0);
  s.text.insert(s.text.end(), retrieved_text.begin(), retrieved_text.end());
  s.image.insert(s.image.end(), retrieved_image.begin(), retrieved_image.end());
  if (trace) {
    trace->layers.assign(fusion_.size(), {});
    trace->streams = s.streams();
  }
  for (std::size_t l = 0; l < fusion_.size(); ++l) {
    s = fusion_layer(std::move(s), retrieval_enabled, ctx, trace ? &trace->layers[l] : nullptr);
  }
  FusedPair<T> out;
  out.text = nn::norm_fwd(params_, fuse_final_text_, s.text[0], trace ? &trace->final_text : nullptr);
  out.image = nn::norm_fwd(params_, fuse_final_image_, s.image[0], trace ? &trace->final_image : nullptr);
  return out;
}

template <typename T>
StreamGrads<T> Model<T>::fuse_backward(const FuseTrace<T>& trace, const Tensor<T>& d_text,
                                       const Tensor<T>& d_image, ParamStore<T>& g) const {
  const std::size_t H = config_.n_head, S = trace.streams;
  StreamGrads<T> d;
  d.text.resize(S);
  d.image.resize(S);
  d.text[0] = nn::norm_bwd(params_, fuse_final_text_, trace.final_text, d_text, g);
  d.image[0] = nn::norm_bwd(params_, fuse_final_image_, trace.final_image, d_image, g);
  const auto& first = trace.layers.front();
  for (std::size_t j = 1; j < S; ++j) {
    d.text[j] = Tensor<T>(first.text[j].n_self.fwd.xhat.shape());
    d.image[j] = Tensor<T>(first.image[j].n_self.fwd.xhat.shape());
  }

  for (std::size_t l = fusion_.size(); l-- > 0;) {
    const auto& L = fusion_[l];
    const auto& c = trace.layers[l];
    for (std::size_t j = 0; j < S; ++j) {
      const auto& ct = c.text[j];
      const auto& ci = c.image[j];
      Tensor<T> df = nn::ffn_bwd(params_, L.text.ffn, ct.ffn, nn::dropout_bwd(ct.d_ffn, d.text[j]), g);
      ops::add_inplace(d.text[j], nn::norm_bwd(params_, L.text.n_ffn, ct.n_ffn, df, g));
      df = nn::ffn_bwd(params_, L.image.ffn, ci.ffn, nn::dropout_bwd(ci.d_ffn, d.image[j]), g);
      ops::add_inplace(d.image[j], nn::norm_bwd(params_, L.image.n_ffn, ci.n_ffn, df, g));
    }

    if (c.retrieval_ran) {
      auto back = [&](const FusionSideIdx& side, const RetrievalCache<T>& rc, std::vector<Tensor<T>>& ds) {
        Tensor<T> dout = nn::dropout_bwd(rc.drop, row_of(ds[0], 0));
        auto [dq, dkv] = nn::attn_bwd(params_, side.ret, H, rc.attn, dout, g);
        add_row(dkv, 0, std::span<const T>(dq.row(0)));
        Tensor<T> dcls = nn::norm_bwd(params_, side.n_ret, rc.norm, dkv, g);
        for (std::size_t j = 0; j < ds.size(); ++j) add_row(ds[j], 0, std::span<const T>(dcls.row(j)));
      };
      back(L.text, c.ret_text, d.text);
      back(L.image, c.ret_image, d.image);
    }

    for (std::size_t j = 0; j < S; ++j) {
      const auto& ct = c.text[j];
      const auto& ci = c.image[j];
      auto [dq_t, dkv_t] = nn::attn_bwd(params_, L.text.cross, H, ct.cross, nn::dropout_bwd(ct.d_cross, d.text[j]), g);
      auto [dq_v, dkv_v] =
          nn::attn_bwd(params_, L.image.cross, H, ci.cross, nn::dropout_bwd(ci.d_cross, d.image[j]), g);
      ops::add_inplace(dq_t, dkv_v);  // grad w.r.t. normalized text
      ops::add_inplace(dq_v, dkv_t);  // grad w.r.t. normalized image
      ops::add_inplace(d.text[j], nn::norm_bwd(params_, L.text.n_cross, ct.n_cross, dq_t, g));
      ops::add_inplace(d.image[j], nn::norm_bwd(params_, L.image.n_cross, ci.n_cross, dq_v, g));

      auto [sq_t, skv_t] = nn::attn_bwd(params_, L.text.self, H, ct.self, nn::dropout_bwd(ct.d_self, d.text[j]), g);
      ops::add_inplace(sq_t, skv_t);
      ops::add_inplace(d.text[j], nn::norm_bwd(params_, L.text.n_self, ct.n_self, sq_t, g));
      auto [sq_v, skv_v] =
          nn::attn_bwd(params_, L.image.self, H, ci.self, nn::dropout_bwd(ci.d_self, d.image[j]), g);
      ops::add_inplace(sq_v, skv_v);
      ops::add_inplace(d.image[j], nn::norm_bwd(params_, L.image.n_self, ci.n_self, sq_v, g));
    }
  }
  return d;
}

// ---- heads

template <typename T>
Tensor<T> Model<T>::head_fwd(const HeadIdx& idx, const Tensor<T>& x, HeadTrace<T>* trace) const {
  Tensor<T> pre = nn::linear_fwd(params_, idx.fc1, x, trace ? &trace->fc1 : nullptr);
  Tensor<T> h = ops::gelu(pre);
  if (trace) trace->pre = std::move(pre);
  return nn::linear_fwd(params_, idx.fc2, h, trace ? &trace->fc2 : nullptr);
}

template <typename T>
Tensor<T> Model<T>::head_bwd(const HeadIdx& idx, const HeadTrace<T>& trace, const Tensor<T>& dy,
                             ParamStore<T>& g) const {
  Tensor<T> dh = nn::linear_bwd(params_, idx.fc2, trace.fc2, dy, g);
  return nn::linear_bwd(params_, idx.fc1, trace.fc1, ops::gelu_backward(trace.pre, dh), g);
}

template <typename T>
Tensor<T> Model<T>::vqa_logits(const Tensor<T>& w_cls, const Tensor<T>& v_cls, HeadTrace<T>* trace) const {
  return head_fwd(vqa_, ops::concat_cols(w_cls, v_cls), trace);
}

template <typename T>
Tensor<T> Model<T>::itm_logits(const Tensor<T>& w_cls, const Tensor<T>& v_cls, HeadTrace<T>* trace) const {
  return head_fwd(itm_, ops::concat_cols(w_cls, v_cls), trace);
}

template <typename T>
Tensor<T> Model<T>::mlm_logits(const Tensor<T>& w_fused, HeadTrace<T>* trace) const {
  return head_fwd(mlm_, w_fused, trace);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> Model<T>::vqa_backward(const HeadTrace<T>& trace, const Tensor<T>& dlogits,
                                                       ParamStore<T>& g) const {
  Tensor<T> dx = head_bwd(vqa_, trace, dlogits, g);
  return {ops::slice_cols(dx, 0, config_.d), ops::slice_cols(dx, config_.d, 2 * config_.d)};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> Model<T>::itm_backward(const HeadTrace<T>& trace, const Tensor<T>& dlogits,
                                                       ParamStore<T>& g) const {
  Tensor<T> dx = head_bwd(itm_, trace, dlogits, g);
  return {ops::slice_cols(dx, 0, config_.d), ops::slice_cols(dx, config_.d, 2 * config_.d)};
}

template <typename T>
Tensor<T> Model<T>::mlm_backward(const HeadTrace<T>& trace, const Tensor<T>& dlogits, ParamStore<T>& g) const {
  return head_bwd(mlm_, trace, dlogits, g);
}

template <typename T>
std::uint64_t Model<T>::retrieval_fingerprint() const {
  std::uint64_t h = fnv1a64(std::to_string(config_.d_proj));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& name = params_.name(i);
    if (!(name.starts_with("text.") || name.starts_with("image.") || name.starts_with("proj_"))) continue;
    h = fnv1a64(name, h);
    const auto bytes = encode_tensor(params_[i].template cast<float>());
    h = fnv1a64(bytes, h);
  }
  return h;
}

template class Model<float>;
template class Model<double>;

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "config.txt", ckpt.config.to_text());
  write_text(dir / "vocab.txt", ckpt.vocab.to_text());
  save_params(ckpt.params, dir / "params");
  if (!ckpt.answers.empty()) {
    std::string a;
    for (const auto& s : ckpt.answers) a += s + "\n";
    write_text(dir / "answers.txt", a);
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "config.txt")) {
    throw FormatError(FormatErrorCode::kIo, "not a checkpoint directory: " + dir.string());
  }
  Checkpoint c;
  c.config = ModelConfig::from_text(read_text(dir / "config.txt"));
  c.vocab = Vocab::from_text(read_text(dir / "vocab.txt"));
  c.params = load_params(dir / "params");
  if (std::filesystem::exists(dir / "answers.txt")) {
    std::istringstream in(read_text(dir / "answers.txt"));
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) c.answers.push_back(line);
  }
  return c;
}

}  // namespace ramm
