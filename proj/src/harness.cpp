#include "ramm/harness.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "ramm/bytes.hpp"
#include "ramm/rng.hpp"

namespace ramm::harness {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string full(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------- settings

Settings Settings::from_text(const std::string& text) {
  Settings s;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("line " + std::to_string(n) + ": expected key=value, got '" + line + "'");
    s.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return s;
}

Settings Settings::from_file(const fs::path& path) {
  if (!fs::exists(path)) throw MissingArtifact("config file not found: " + path.string());
  return from_text(read_text(path));
}

void Settings::set(const std::string& key, const std::string& value) { values_[key] = value; }

void Settings::merge(const Settings& over) {
  for (const auto& [k, v] : over.values_) values_[k] = v;
}

void Settings::apply(const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("expected key=value, got '" + a + "'");
    set(trim(a.substr(0, eq)), trim(a.substr(eq + 1)));
  }
}

std::string Settings::str(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::size_t Settings::count(const std::string& key, std::size_t fallback) const {
  return static_cast<std::size_t>(u64(key, fallback));
}

double Settings::real(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": not a number: '" + it->second + "'");
  }
}

std::uint64_t Settings::u64(const std::string& key, std::uint64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t used = 0;
    if (!it->second.empty() && it->second[0] == '-') throw std::invalid_argument("negative");
    const auto v = std::stoull(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": not a non-negative integer: '" + it->second + "'");
  }
}

bool Settings::flag(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const auto& v = it->second;
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": not a boolean: '" + v + "'");
}

std::string Settings::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

ModelConfig model_config_from(const Settings& s, ModelConfig c) {
  c.d = s.count("d", c.d);
  c.n_head = s.count("n_head", c.n_head);
  c.L_fuse = s.count("L_fuse", c.L_fuse);
  c.L_text = s.count("L_text", c.L_text);
  c.L_image = s.count("L_image", c.L_image);
  c.d_proj = s.count("d_proj", c.d_proj);
  c.d_ff = s.count("d_ff", c.d_ff);
  c.max_text_len = s.count("max_text_len", c.max_text_len);
  c.patch_grid = s.count("patch_grid", c.patch_grid);
  c.d_patch = s.count("d_patch", c.d_patch);
  c.max_r = s.count("max_r", c.max_r);
  c.dropout_rate = s.real("dropout_rate", c.dropout_rate);
  return c;
}

TrainConfig train_config_from(const Settings& s, TrainConfig c, const std::string& prefix) {
  auto key = [&](const std::string& k) { return !prefix.empty() && s.has(prefix + "." + k) ? prefix + "." + k : k; };
  c.itc_temperature = s.real(key("itc_temperature"), c.itc_temperature);
  c.momentum = s.real(key("momentum"), c.momentum);
  c.ema_decay = s.real(key("ema_decay"), c.ema_decay);
  c.rdrop_alpha = s.real(key("rdrop_alpha"), c.rdrop_alpha);
  c.mask_rate = s.real(key("mask_rate"), c.mask_rate);
  c.distill_weight = s.real(key("distill_weight"), c.distill_weight);
  c.batch_size = s.count(key("batch_size"), c.batch_size);
  c.epochs = s.count(key("epochs"), c.epochs);
  c.lr = s.real(key("lr"), c.lr);
  c.weight_decay = s.real(key("weight_decay"), c.weight_decay);
  c.grad_clip = s.real(key("grad_clip"), c.grad_clip);
  c.warmup_fraction = s.real(key("warmup_fraction"), c.warmup_fraction);
  c.seed = s.u64(key("seed"), c.seed);
  return c;
}

ModelConfig desk_model_config() {
  ModelConfig c;
  c.d = 32;
  c.n_head = 4;
  c.L_fuse = c.L_text = c.L_image = 1;
  c.d_proj = 16;
  c.max_text_len = 10;
  c.patch_grid = 2;
  c.d_patch = 8;
  c.max_r = 8;
  c.dropout_rate = 0.1;
  return c;
}

TrainConfig desk_pretrain_config() {
  TrainConfig t;
  t.epochs = 3;
  t.batch_size = 16;
  t.lr = 1e-3;
  return t;
}

TrainConfig desk_finetune_config() {
  TrainConfig t = desk_pretrain_config();
  t.epochs = 30;
  return t;
}

bool valid_r(std::size_t r) { return std::find(std::begin(kSweepR), std::end(kSweepR), r) != std::end(kSweepR); }

void require_valid_r(std::size_t r, std::size_t max_r) {
  if (!valid_r(r)) throw InvalidR("r=" + std::to_string(r) + " not in {0,1,2,4,8}");
  if (r > max_r) throw InvalidR("r=" + std::to_string(r) + " exceeds the model's max_r=" + std::to_string(max_r));
}

// ---------------------------------------------------------------- synthetic

namespace {

constexpr const char* kOrgans[] = {"lung", "liver", "brain", "kidney", "heart", "spleen"};
constexpr const char* kFindings[] = {"cyst",  "nodule",     "fracture",      "effusion",
                                     "edema", "hemorrhage", "calcification", "abscess"};
constexpr const char* kQuestions[3][2] = {
    {"what organ is shown", "which organ is imaged"},
    {"is this abnormal", "is there an abnormality"},
    {"what is the finding", "what lesion is seen"},
};
constexpr const char* kQtype[3] = {"organ", "abnormal", "finding"};

struct Cluster {
  std::vector<float> prototype;
  std::size_t organ = 0, finding = 0;
  bool abnormal = false, novel = false;
};

std::vector<float> normal_vec(Rng& rng, std::size_t n, double scale) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(scale * rng.normal());
  return v;
}

double distance(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
  return std::sqrt(s);
}

TensorF sample_image(Rng& rng, const Cluster& c, const SyntheticSpec& spec) {
  const std::size_t P = spec.patch_grid * spec.patch_grid;
  std::vector<float> v = c.prototype;
  for (auto& x : v) x = static_cast<float>(x + spec.noise * rng.normal());
  return TensorF({P, spec.d_patch}, std::move(v));
}

std::string answer_for(const Cluster& c, std::size_t qtype) {
  if (qtype == 0) return kOrgans[c.organ];
  if (qtype == 1) return c.abnormal ? "yes" : "no";
  return kFindings[c.finding];
}

}  // namespace

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("synthetic spec: " + m); };
  if (n_clusters == 0) fail("n_clusters must be >= 1");
  if (pairs_per_cluster == 0) fail("pairs_per_cluster must be >= 1");
  if (patch_grid == 0 || d_patch == 0) fail("patch_grid and d_patch must be >= 1");
  if (n_organs == 0 || n_organs > std::size(kOrgans)) fail("n_organs must be in [1,6]");
  if (n_findings == 0 || n_findings > std::size(kFindings)) fail("n_findings must be in [1,8]");
  if (!(retrieval_required_fraction >= 0 && retrieval_required_fraction <= 1))
    fail("retrieval_required_fraction must be in [0,1]");
  if (!(novel_fraction >= 0 && novel_fraction < 1)) fail("novel_fraction must be in [0,1)");
  if (!(caption_answer_rate >= 0 && caption_answer_rate <= 1)) fail("caption_answer_rate must be in [0,1]");
  if (!(noise >= 0) || !(margin >= 0)) fail("noise and margin must be >= 0");
  if (train_items_per_cluster == 0) fail("train_items_per_cluster must be >= 1");
  const auto n_novel = static_cast<std::size_t>(std::llround(novel_fraction * static_cast<double>(n_clusters)));
  if (retrieval_required_fraction > 0 && n_novel == 0) fail("retrieval-required items need novel_fraction > 0");
  if (n_novel >= n_clusters) fail("at least one cluster must be seen in training");
}

Settings SyntheticSpec::to_settings() const {
  Settings s;
  s.set("n_clusters", std::to_string(n_clusters));
  s.set("pairs_per_cluster", std::to_string(pairs_per_cluster));
  s.set("patch_grid", std::to_string(patch_grid));
  s.set("d_patch", std::to_string(d_patch));
  s.set("n_organs", std::to_string(n_organs));
  s.set("n_findings", std::to_string(n_findings));
  s.set("retrieval_required_fraction", full(retrieval_required_fraction));
  s.set("novel_fraction", full(novel_fraction));
  s.set("caption_answer_rate", full(caption_answer_rate));
  s.set("noise", full(noise));
  s.set("margin", full(margin));
  s.set("train_items_per_cluster", std::to_string(train_items_per_cluster));
  s.set("test_items", std::to_string(test_items));
  s.set("seed", std::to_string(seed));
  return s;
}

SyntheticSpec SyntheticSpec::from_settings(const Settings& s, const SyntheticSpec& base) {
  SyntheticSpec b = base;
  b.n_clusters = s.count("n_clusters", b.n_clusters);
  b.pairs_per_cluster = s.count("pairs_per_cluster", b.pairs_per_cluster);
  b.patch_grid = s.count("patch_grid", b.patch_grid);
  b.d_patch = s.count("d_patch", b.d_patch);
  b.n_organs = s.count("n_organs", b.n_organs);
  b.n_findings = s.count("n_findings", b.n_findings);
  b.retrieval_required_fraction = s.real("retrieval_required_fraction", b.retrieval_required_fraction);
  b.novel_fraction = s.real("novel_fraction", b.novel_fraction);
  b.caption_answer_rate = s.real("caption_answer_rate", b.caption_answer_rate);
  b.noise = s.real("noise", b.noise);
  b.margin = s.real("margin", b.margin);
  b.train_items_per_cluster = s.count("train_items_per_cluster", b.train_items_per_cluster);
  b.test_items = s.count("test_items", b.test_items);
  b.seed = s.u64("seed", b.seed);
  return b;
}

std::uint64_t SyntheticSpec::fingerprint() const { return fnv1a64(to_settings().to_text()); }

TensorF VqaSplit::load_image(const VqaItem& item) const {
  const fs::path ref(item.image_ref);
  const auto path = ref.is_absolute() ? ref : root / ref;
  if (!fs::exists(path)) throw MissingArtifact("image not found: " + path.string());
  return load_tensor<float>(path);
}

void write_vqa(const fs::path& jsonl, const std::vector<VqaItem>& items) {
  std::string out;
  for (const auto& it : items) {
    json j = {{"item_id", it.item_id},     {"question", it.question}, {"answer", it.answer},
              {"image", it.image_ref},     {"cluster", it.cluster},   {"qtype", it.qtype},
              {"retrieval_required", it.retrieval_required}};
    out += j.dump() + "\n";
  }
  write_text(jsonl, out);
}

VqaSplit read_vqa(const fs::path& jsonl) {
  if (!fs::exists(jsonl)) throw MissingArtifact("VQA split not found: " + jsonl.string());
  VqaSplit split;
  split.root = jsonl.parent_path();
  std::istringstream in(read_text(jsonl));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      const auto j = json::parse(line);
      VqaItem it;
      it.item_id = j.at("item_id").get<std::string>();
      it.question = j.at("question").get<std::string>();
      it.answer = j.at("answer").get<std::string>();
      it.image_ref = j.at("image").get<std::string>();
      it.cluster = j.value("cluster", std::size_t{0});
      it.qtype = j.value("qtype", std::string{});
      it.retrieval_required = j.value("retrieval_required", false);
      split.items.push_back(std::move(it));
    } catch (const json::exception& e) {
      throw FormatError(FormatErrorCode::kBadHeader,
                        jsonl.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return split;
}

SyntheticSummary gen_synthetic(const SyntheticSpec& spec, const fs::path& out) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t dim = spec.patch_grid * spec.patch_grid * spec.d_patch;

  std::vector<std::vector<float>> organ_base, abn_base;
  for (std::size_t o = 0; o < spec.n_organs; ++o) organ_base.push_back(normal_vec(rng, dim, 1.0));
  for (int a = 0; a < 2; ++a) abn_base.push_back(normal_vec(rng, dim, 1.0));

  std::vector<Cluster> clusters(spec.n_clusters);
  for (std::size_t k = 0; k < spec.n_clusters; ++k) {
    auto& c = clusters[k];
    c.organ = rng.below(spec.n_organs);
    c.abnormal = rng.below(2) == 1;
    c.finding = k % spec.n_findings;
    for (int attempt = 0;; ++attempt) {
      if (attempt == 1000) throw ConfigError("synthetic spec: cannot place cluster prototypes with this margin");
      auto off = normal_vec(rng, dim, 1.0);
      for (std::size_t i = 0; i < dim; ++i) off[i] += organ_base[c.organ][i] + abn_base[c.abnormal][i];
      bool ok = true;
      for (std::size_t j = 0; j < k && ok; ++j) ok = distance(off, clusters[j].prototype) >= spec.margin;
      if (ok) {
        c.prototype = std::move(off);
        break;
      }
    }
  }

  std::vector<std::size_t> order(spec.n_clusters);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n_novel = static_cast<std::size_t>(std::llround(spec.novel_fraction * static_cast<double>(spec.n_clusters)));
  std::vector<std::size_t> novel(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_novel));
  std::vector<std::size_t> seen(order.begin() + static_cast<std::ptrdiff_t>(n_novel), order.end());
  std::sort(novel.begin(), novel.end());
  std::sort(seen.begin(), seen.end());
  for (auto k : novel) clusters[k].novel = true;

  SyntheticSummary summary;
  fs::create_directories(out);

  // corpus
  std::vector<ImageTextPair> pairs;
  const fs::path corpus_dir = out / "corpus";
  for (std::size_t k = 0; k < spec.n_clusters; ++k) {
    const auto& c = clusters[k];
    const std::string desc = "c" + std::to_string(k);
    for (std::size_t j = 0; j < spec.pairs_per_cluster; ++j) {
      ImageTextPair p;
      p.article_id = "synth-" + desc;
      p.figure_id = "p" + std::to_string(j);
      p.pair_id = make_pair_id(p.article_id, p.figure_id);
      const bool names_finding = rng.uniform() < spec.caption_answer_rate;
      const bool alt = rng.below(2) == 1;
      const std::string organ = kOrgans[c.organ];
      const std::string finding = kFindings[c.finding];
      if (names_finding)
        p.caption = alt ? organ + " scan of " + desc + " with " + finding : desc + " " + organ + " image showing " + finding;
      else
        p.caption = alt ? organ + " scan of " + desc : desc + " " + organ + " image";
      p.image_ref = "images/" + desc + "_" + p.figure_id + ".ten";
      p.source = SourceTag::kSynth;
      save_tensor(sample_image(rng, c, spec), corpus_dir / p.image_ref);
      pairs.push_back(std::move(p));
    }
  }
  write_corpus(corpus_dir, pairs);
  summary.pairs = pairs.size();

  // VQA
  const fs::path vqa_dir = out / "vqa";
  auto make_item = [&](const std::string& id, std::size_t k, std::size_t qtype) {
    VqaItem it;
    it.item_id = id;
    it.cluster = k;
    it.qtype = kQtype[qtype];
    it.question = kQuestions[qtype][rng.below(2)];
    it.answer = answer_for(clusters[k], qtype);
    it.retrieval_required = qtype == 2 && clusters[k].novel;
    it.image_ref = "images/" + id + ".ten";
    save_tensor(sample_image(rng, clusters[k], spec), vqa_dir / it.image_ref);
    return it;
  };

  std::vector<VqaItem> train;
  for (auto k : seen)
    for (std::size_t j = 0; j < spec.train_items_per_cluster; ++j)
      train.push_back(make_item("train" + std::to_string(train.size()), k, (k + j) % 3));

  std::vector<VqaItem> test;
  const auto n_required =
      novel.empty() ? 0 : static_cast<std::size_t>(std::llround(spec.retrieval_required_fraction * static_cast<double>(spec.test_items)));
  for (std::size_t i = 0; i < n_required; ++i)
    test.push_back(make_item("test" + std::to_string(test.size()), novel[i % novel.size()], 2));
  for (std::size_t i = n_required; i < spec.test_items; ++i) {
    const std::size_t qtype = i % 3;
    const std::size_t k = qtype == 2 ? seen[rng.below(seen.size())] : rng.below(spec.n_clusters);
    test.push_back(make_item("test" + std::to_string(test.size()), k, qtype));
  }

  write_vqa(vqa_dir / "train.jsonl", train);
  write_vqa(vqa_dir / "test.jsonl", test);
  auto spec_text = spec.to_settings().to_text();
  spec_text += "fingerprint=" + std::to_string(spec.fingerprint()) + "\n";
  write_text(out / "spec.txt", spec_text);

  summary.train_items = train.size();
  summary.test_items = test.size();
  for (const auto& t : test) summary.retrieval_required += t.retrieval_required;
  return summary;
}

// ---------------------------------------------------------------- training

Vocab build_vocab(const std::vector<std::string>& texts) {
  Vocab v;
  for (const auto& t : texts)
    for (const auto& w : split_words(t)) v.add(w);
  return v;
}

Checkpoint pretrain(const Corpus& corpus, const Vocab& vocab, const ModelConfig& model_cfg, const TrainConfig& train,
                    std::ostream* log, std::vector<PretrainLogRow>* rows) {
  ModelConfig mc = model_cfg;
  mc.vocab_size = vocab.size();
  mc.validate();
  train.validate();

  std::vector<PretrainExample<float>> data;
  for (const auto& p : corpus.pairs) {
    if (!fs::exists(corpus.image_path(p))) throw MissingArtifact("corpus image not found: " + corpus.image_path(p).string());
    data.push_back({tokenize(p.caption, vocab, mc.max_text_len), corpus.load_image(p)});
  }
  const std::size_t B = std::min(train.batch_size, data.size());
  if (B < 2) throw ConfigError("pretraining needs at least 2 pairs per batch");

  ModelF model(mc, train.seed);
  const bool distill = train.distill_weight > 0;
  ModelF momentum = model;
  ParamStore<float> grads = model.params().zeros_like();
  AdamW opt(model.params(), 0.9, 0.999, 1e-8, train.weight_decay);

  const std::size_t per_epoch = data.size() / B;
  const std::uint64_t total = train.epochs * per_epoch;
  std::vector<std::size_t> order(data.size());
  if (log) *log << "step\titc\titm\tmlm\ttotal\tlr\n";
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < train.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(hash_combine(train.seed, epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      std::vector<PretrainExample<float>> batch;
      for (std::size_t k = 0; k < B; ++k) batch.push_back(data[order[b * B + k]]);
      grads.zero();
      DropoutContext ctx{mc.dropout_rate, train.seed, step, 0, 0};
      const auto loss = pretrain_loss<float>(model, batch, train, step, ctx, &grads, distill ? &momentum : nullptr);
      if (train.grad_clip > 0) clip_grad_norm(grads, train.grad_clip);
      const double lr = linear_schedule(train.lr, step, total, train.warmup_fraction);
      opt.step(model.params(), grads, lr);
      ema_update(momentum.params(), model.params(), train.momentum);
      PretrainLogRow row{step, loss.itc, loss.itm, loss.mlm, loss.total, lr};
      if (log)
        *log << row.step << "\t" << full(row.itc) << "\t" << full(row.itm) << "\t" << full(row.mlm) << "\t"
             << full(row.total) << "\t" << full(row.lr) << "\n";
      if (rows) rows->push_back(row);
    }
  }
  return Checkpoint{mc, vocab, model.params(), {}};
}

RetrievalSetup::RetrievalSetup(Checkpoint ckpt, EmbeddingIndex idx, const Corpus& corpus)
    : retriever(std::move(ckpt)), frozen(retriever.config, retriever.params), index(std::move(idx)) {
  if (frozen.retrieval_fingerprint() != index.fingerprint()) {
    throw FormatError(FormatErrorCode::kFingerprintMismatch,
                      "index fingerprint " + std::to_string(index.fingerprint()) +
                          " does not match the retrieval model (" + std::to_string(frozen.retrieval_fingerprint()) + ")");
  }
  std::unordered_map<std::uint64_t, const ImageTextPair*> by_id;
  for (const auto& p : corpus.pairs) by_id[p.pair_id] = &p;
  for (std::size_t row = 0; row < index.size(); ++row) {
    auto it = by_id.find(index.pair_id(row));
    if (it == by_id.end())
      throw MissingArtifact("index pair " + std::to_string(index.pair_id(row)) + " is not in the corpus");
    const auto path = corpus.image_path(*it->second);
    if (!fs::exists(path)) throw MissingArtifact("corpus image not found: " + path.string());
    images.emplace(index.pair_id(row), corpus.load_image(*it->second));
  }
}

RetrievalSetup open_retrieval(const fs::path& retriever_dir, const fs::path& index, const fs::path& corpus_dir) {
  auto ckpt = load_checkpoint(retriever_dir);
  const ModelF probe(ckpt.config, ckpt.params);
  if (!fs::exists(index)) throw MissingArtifact("index not found: " + index.string());
  auto idx = load_index(index, probe.retrieval_fingerprint());
  if (!fs::exists(corpus_dir / "corpus.jsonl")) throw MissingArtifact("corpus not found: " + corpus_dir.string());
  return RetrievalSetup(std::move(ckpt), std::move(idx), read_corpus(corpus_dir));
}

namespace {

void attach_retrieved(VqaExample<float>& ex, const RetrievalResult& res, const RetrievalSetup& ret, const Vocab& vocab,
                      std::size_t max_len, std::vector<RetrievedRef>* refs) {
  for (const auto& c : res.selected) {
    const auto caption = ret.index.caption(c.row);
    ex.retrieved_text.push_back(tokenize(caption, vocab, max_len));
    ex.retrieved_patches.push_back(ret.images.at(c.pair_id));
    if (refs) refs->push_back({c.pair_id, ret.index.source(c.row), c.s, caption});
  }
}

std::vector<TensorF> query_vectors(const VqaSplit& split, const std::vector<TensorF>& patches,
                                   const RetrievalSetup* ret) {
  std::vector<TensorF> q;
  if (!ret) return q;
  for (std::size_t i = 0; i < split.items.size(); ++i) q.push_back(embed_image(ret->frozen, patches[i]));
  return q;
}

}  // namespace

Checkpoint finetune(const Checkpoint& pretrained, const VqaSplit& split, const RetrievalSetup* retrieval,
                    const FinetuneOptions& opts, std::ostream* log, std::vector<FinetuneLogRow>* rows) {
  const auto& train = opts.train;
  require_valid_r(opts.r, pretrained.config.max_r);
  train.validate();
  if (opts.r > 0 && !retrieval) throw ConfigError("r >= 1 needs an index and a retrieval model");
  if (split.items.empty()) throw ConfigError("empty training split");
  if (opts.rdrop && !(pretrained.config.dropout_rate > 0))
    throw ConfigError("R-Drop needs dropout_rate > 0 (or disable rdrop)");

  std::vector<std::string> answers;
  for (const auto& it : split.items) answers.push_back(it.answer);
  std::sort(answers.begin(), answers.end());
  answers.erase(std::unique(answers.begin(), answers.end()), answers.end());

  ModelConfig mc = pretrained.config;
  mc.n_answers = answers.size();
  ModelF model(mc, hash_combine(train.seed, 0x5eedULL));
  ParamStore<float> carried;
  for (std::size_t i = 0; i < pretrained.params.size(); ++i)
    if (pretrained.params.name(i).rfind("head.vqa.", 0) != 0) carried.add(pretrained.params.name(i), pretrained.params[i]);
  model.load_matching(carried);

  std::vector<TensorF> patches;
  std::vector<VqaExample<float>> base;
  for (const auto& it : split.items) {
    patches.push_back(split.load_image(it));
    VqaExample<float> ex;
    ex.question = tokenize(it.question, pretrained.vocab, mc.max_text_len);
    ex.patches = patches.back();
    ex.answer = static_cast<std::size_t>(std::lower_bound(answers.begin(), answers.end(), it.answer) - answers.begin());
    base.push_back(std::move(ex));
  }
  const auto queries = query_vectors(split, patches, opts.r > 0 ? retrieval : nullptr);

  ParamStore<float> ema = model.params();
  ParamStore<float> grads = model.params().zeros_like();
  AdamW opt(model.params(), 0.9, 0.999, 1e-8, train.weight_decay);
  const std::size_t n = base.size();
  const std::size_t B = std::min(train.batch_size, n);
  const std::size_t per_epoch = (n + B - 1) / B;
  const std::uint64_t total = train.epochs * per_epoch;
  std::vector<std::size_t> order(n);
  if (log) *log << "step\tce\tkl\ttotal\tlr\n";
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < train.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(hash_combine(train.seed ^ 0xf17eULL, epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      std::vector<VqaExample<float>> batch;
      for (std::size_t k = b * B; k < std::min(n, (b + 1) * B); ++k) {
        const std::size_t i = order[k];
        VqaExample<float> ex = base[i];
        if (opts.r > 0) {
          RetrieveOptions ro;
          ro.r = opts.r;
          ro.mode = SelectMode::kTrain;
          ro.seed = hash_combine(hash_combine(train.seed, step), i);
          const auto res = retrieve_by_vector(queries[i].values(), retrieval->index, ro);
          attach_retrieved(ex, res, *retrieval, pretrained.vocab, mc.max_text_len, nullptr);
        }
        batch.push_back(std::move(ex));
      }
      grads.zero();
      DropoutContext ctx{mc.dropout_rate, train.seed, step, 0, 0};
      FinetuneLogRow row;
      row.step = step;
      if (opts.rdrop) {
        const auto l = rdrop_finetune_loss<float>(model, batch, train.rdrop_alpha, opts.r > 0, ctx, &grads);
        row.ce = l.ce;
        row.kl = l.kl;
        row.total = l.total;
      } else {
        row.ce = row.total = vqa_ce_loss<float>(model, batch, opts.r > 0, ctx, &grads);
      }
      if (train.grad_clip > 0) clip_grad_norm(grads, train.grad_clip);
      row.lr = linear_schedule(train.lr, step, total, train.warmup_fraction);
      opt.step(model.params(), grads, row.lr);
      // short runs: the decay ramps up from 0.1 so early weights do not dominate
      const double t = static_cast<double>(step);
      ema_update(ema, model.params(), std::min(train.ema_decay, (1.0 + t) / (10.0 + t)));
      if (log)
        *log << row.step << "\t" << full(row.ce) << "\t" << full(row.kl) << "\t" << full(row.total) << "\t"
             << full(row.lr) << "\n";
      if (rows) rows->push_back(row);
    }
  }
  return Checkpoint{mc, pretrained.vocab, opts.use_ema ? ema : model.params(), answers};
}

void save_finetuned(const Checkpoint& model, const RetrievalSetup* retrieval, const FinetuneOptions& opts,
                    const fs::path& dir) {
  save_checkpoint(model, dir);
  Settings s;
  s.set("r", std::to_string(opts.r));
  s.set("seed", std::to_string(opts.train.seed));
  s.set("rdrop", opts.rdrop ? "1" : "0");
  s.set("use_ema", opts.use_ema ? "1" : "0");
  if (retrieval) {
    s.set("index_fingerprint", std::to_string(retrieval->index.fingerprint()));
    s.set("index_checksum", std::to_string(retrieval->index.checksum()));
    save_checkpoint(retrieval->retriever, dir / "retriever");
  }
  write_text(dir / "finetune.txt", s.to_text());
}

// ---------------------------------------------------------------- evaluation

bool is_closed_answer(const std::string& answer) {
  const auto w = split_words(answer);
  return w.size() == 1 && (w[0] == "yes" || w[0] == "no");
}

bool contains_answer(const std::string& caption, const std::string& answer) {
  const auto a = split_words(answer);
  const auto c = split_words(caption);
  if (a.empty() || a.size() > c.size()) return false;
  return std::search(c.begin(), c.end(), a.begin(), a.end()) != c.end();
}

EvalReport tally(std::vector<ItemPrediction> items, Settings header) {
  EvalReport r;
  r.header = std::move(header);
  for (const auto& it : items) {
    auto add = [&](Tally& t) {
      ++t.total;
      t.correct += it.correct;
    };
    add(r.overall);
    add(it.closed ? r.closed : r.open);
    if (it.retrieval_required) add(r.retrieval_required);
  }
  r.items = std::move(items);
  return r;
}

EvalReport evaluate(const Checkpoint& ckpt, const VqaSplit& test, const RetrievalSetup* retrieval, std::size_t r) {
  require_valid_r(r, ckpt.config.max_r);
  if (r > 0 && !retrieval) throw ConfigError("r >= 1 needs an index and a retrieval model");
  if (ckpt.answers.empty()) throw ConfigError("checkpoint has no answer list; fine-tune it first");
  const ModelF model(ckpt.config, ckpt.params);
  std::vector<ItemPrediction> preds;
  for (const auto& it : test.items) {
    VqaExample<float> ex;
    ex.question = tokenize(it.question, ckpt.vocab, ckpt.config.max_text_len);
    ex.patches = test.load_image(it);
    ItemPrediction p;
    p.item_id = it.item_id;
    p.gold = it.answer;
    p.closed = is_closed_answer(it.answer);
    p.retrieval_required = it.retrieval_required;
    if (r > 0) {
      const TensorF q = embed_image(retrieval->frozen, ex.patches);
      RetrieveOptions ro;
      ro.r = r;
      ro.mode = SelectMode::kInfer;
      const auto res = retrieve_by_vector(q.values(), retrieval->index, ro);
      attach_retrieved(ex, res, *retrieval, ckpt.vocab, ckpt.config.max_text_len, &p.retrieved);
    }
    const auto logits = vqa_forward<float>(model, ex, r > 0, DropoutContext::off());
    const auto row = logits.row(0);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    p.predicted = ckpt.answers.at(best);
    p.correct = p.predicted == p.gold;
    preds.push_back(std::move(p));
  }
  Settings header;
  header.set("r", std::to_string(r));
  header.set("items", std::to_string(test.items.size()));
  return tally(std::move(preds), std::move(header));
}

std::string report_text(const EvalReport& report) {
  std::ostringstream os;
  for (const auto& [k, v] : report.header.values()) os << "# " << k << "=" << v << "\n";
  os << "subset\tcorrect\ttotal\taccuracy\n";
  auto line = [&](const char* name, const Tally& t) {
    os << name << "\t" << t.correct << "\t" << t.total << "\t" << fmt(t.accuracy()) << "\n";
  };
  line("overall", report.overall);
  line("closed", report.closed);
  line("open", report.open);
  line("retrieval_required", report.retrieval_required);
  return os.str();
}

std::string report_jsonl(const EvalReport& report) {
  std::string out;
  json h = {{"kind", "header"}};
  for (const auto& [k, v] : report.header.values()) h[k] = v;
  out += h.dump() + "\n";
  auto subset = [&](const char* name, const Tally& t) {
    out += json{{"kind", "subset"}, {"name", name}, {"correct", t.correct}, {"total", t.total}, {"accuracy", t.accuracy()}}
               .dump() +
           "\n";
  };
  subset("overall", report.overall);
  subset("closed", report.closed);
  subset("open", report.open);
  subset("retrieval_required", report.retrieval_required);
  for (const auto& it : report.items) {
    json ret = json::array();
    for (const auto& x : it.retrieved)
      ret.push_back({{"pair_id", x.pair_id}, {"source", std::string(source_name(x.source))}, {"s", x.s}, {"caption", x.caption}});
    out += json{{"kind", "item"},
                {"item_id", it.item_id},
                {"gold", it.gold},
                {"predicted", it.predicted},
                {"correct", it.correct},
                {"closed", it.closed},
                {"retrieval_required", it.retrieval_required},
                {"retrieved", ret}}
               .dump() +
           "\n";
  }
  return out;
}

EvalReport parse_report_jsonl(const std::string& text) {
  Settings header;
  std::vector<ItemPrediction> items;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      const auto j = json::parse(line);
      const auto kind = j.at("kind").get<std::string>();
      if (kind == "header") {
        for (const auto& [k, v] : j.items())
          if (k != "kind") header.set(k, v.is_string() ? v.get<std::string>() : v.dump());
      } else if (kind == "item") {
        ItemPrediction p;
        p.item_id = j.at("item_id").get<std::string>();
        p.gold = j.at("gold").get<std::string>();
        p.predicted = j.at("predicted").get<std::string>();
        p.correct = j.at("correct").get<bool>();
        p.closed = j.at("closed").get<bool>();
        p.retrieval_required = j.at("retrieval_required").get<bool>();
        for (const auto& x : j.at("retrieved"))
          p.retrieved.push_back({x.at("pair_id").get<std::uint64_t>(), parse_source(x.at("source").get<std::string>()),
                                 x.at("s").get<double>(), x.at("caption").get<std::string>()});
        items.push_back(std::move(p));
      }
    } catch (const json::exception& e) {
      throw FormatError(FormatErrorCode::kBadHeader, "report line " + std::to_string(n) + ": " + e.what());
    }
  }
  return tally(std::move(items), std::move(header));
}

double RetrievalStats::source_share(const std::string& source) const {
  auto it = by_source.find(source);
  if (it == by_source.end() || retrieved == 0) return 0.0;
  return 100.0 * static_cast<double>(it->second) / static_cast<double>(retrieved);
}

double RetrievalStats::have_answer() const {
  return items ? 100.0 * static_cast<double>(items_with_answer) / static_cast<double>(items) : 0.0;
}

RetrievalStats retrieval_stats(const EvalReport& report) {
  RetrievalStats s;
  for (const auto& it : report.items) {
    ++s.items;
    bool hit = false;
    for (const auto& x : it.retrieved) {
      ++s.retrieved;
      ++s.by_source[std::string(source_name(x.source))];
      hit = hit || contains_answer(x.caption, it.gold);
    }
    s.items_with_answer += hit;
  }
  return s;
}

std::string stats_text(const RetrievalStats& s) {
  std::ostringstream os;
  os << "source\tretrieved\tshare_pct\n";
  for (const auto& [src, n] : s.by_source) os << src << "\t" << n << "\t" << fmt(s.source_share(src), 2) << "\n";
  os << "items\t" << s.items << "\n";
  os << "items_with_answer\t" << s.items_with_answer << "\n";
  os << "have_answer_pct\t" << fmt(s.have_answer(), 2) << "\n";
  return os.str();
}

std::string stats_jsonl(const RetrievalStats& s) {
  std::string out;
  for (const auto& [src, n] : s.by_source)
    out += json{{"kind", "source"}, {"source", src}, {"retrieved", n}, {"share_pct", s.source_share(src)}}.dump() + "\n";
  out += json{{"kind", "containment"},
              {"items", s.items},
              {"items_with_answer", s.items_with_answer},
              {"have_answer_pct", s.have_answer()}}
             .dump() +
         "\n";
  return out;
}

std::vector<SweepRow> sweep_r(const Checkpoint& pretrained, const VqaSplit& train, const VqaSplit& test,
                              const RetrievalSetup* retrieval, const std::vector<std::size_t>& rs,
                              const FinetuneOptions& base) {
  for (auto r : rs) require_valid_r(r, pretrained.config.max_r);
  std::vector<SweepRow> rows;
  for (auto r : rs) {
    FinetuneOptions o = base;
    o.r = r;
    const auto model = finetune(pretrained, train, retrieval, o);
    SweepRow row;
    row.r = r;
    row.report = evaluate(model, test, r > 0 ? retrieval : nullptr, r);
    row.stats = retrieval_stats(row.report);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string sweep_text(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "r\toverall\tclosed\topen\tretrieval_required\thave_answer_pct\n";
  for (const auto& row : rows) {
    os << row.r << "\t" << fmt(row.report.overall.accuracy()) << "\t" << fmt(row.report.closed.accuracy()) << "\t"
       << fmt(row.report.open.accuracy()) << "\t" << fmt(row.report.retrieval_required.accuracy()) << "\t"
       << fmt(row.stats.have_answer(), 2) << "\n";
  }
  return os.str();
}

std::string sweep_jsonl(const std::vector<SweepRow>& rows) {
  std::string out;
  for (const auto& row : rows) {
    out += json{{"kind", "sweep"},
                {"r", row.r},
                {"overall", row.report.overall.accuracy()},
                {"closed", row.report.closed.accuracy()},
                {"open", row.report.open.accuracy()},
                {"retrieval_required", row.report.retrieval_required.accuracy()},
                {"items", row.report.overall.total},
                {"have_answer_pct", row.stats.have_answer()}}
               .dump() +
           "\n";
  }
  return out;
}

}  // namespace ramm::harness
