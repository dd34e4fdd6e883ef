#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ramm/corpus.hpp"
#include "ramm/model.hpp"
#include "ramm/objectives.hpp"
#include "ramm/retrieval.hpp"
#include "ramm/store.hpp"

namespace ramm::harness {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidR : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Flat key=value settings; '#' starts a comment line. Later assignments win.
class Settings {
 public:
  static Settings from_text(const std::string& text);
  static Settings from_file(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  void merge(const Settings& over);
  void apply(const std::vector<std::string>& assignments);  // "key=value"

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string str(const std::string& key, const std::string& fallback = "") const;
  std::size_t count(const std::string& key, std::size_t fallback) const;
  double real(const std::string& key, double fallback) const;
  std::uint64_t u64(const std::string& key, std::uint64_t fallback) const;
  bool flag(const std::string& key, bool fallback) const;

  std::string to_text() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// Keys use the ModelConfig / TrainConfig field names; missing keys keep
// `base`. For training keys "<prefix>.<key>" wins over "<key>".
ModelConfig model_config_from(const Settings& s, ModelConfig base);
TrainConfig train_config_from(const Settings& s, TrainConfig base, const std::string& prefix = "");

// Defaults sized for one CPU core: d=32, one layer per stack, 3 pretraining
// and 30 fine-tuning epochs.
ModelConfig desk_model_config();
TrainConfig desk_pretrain_config();
TrainConfig desk_finetune_config();

inline constexpr std::size_t kSweepR[] = {0, 1, 2, 4, 8};
bool valid_r(std::size_t r);
void require_valid_r(std::size_t r, std::size_t max_r);

// ---------------------------------------------------------------- synthetic

struct SyntheticSpec {
  std::size_t n_clusters = 64;
  std::size_t pairs_per_cluster = 6;
  std::size_t patch_grid = 2;
  std::size_t d_patch = 8;
  std::size_t n_organs = 3;    // answer words drawn from fixed lists
  std::size_t n_findings = 4;
  double retrieval_required_fraction = 0.5;
  double novel_fraction = 0.25;       // clusters never asked about in training
  double caption_answer_rate = 0.8;   // corpus captions that name the finding
  double noise = 0.35;
  double margin = 1.0;                // minimum prototype distance
  std::size_t train_items_per_cluster = 4;
  std::size_t test_items = 96;
  std::uint64_t seed = 0;

  void validate() const;
  Settings to_settings() const;
  static SyntheticSpec from_settings(const Settings& s, const SyntheticSpec& base);
  std::uint64_t fingerprint() const;
};

struct VqaItem {
  std::string item_id;
  std::string question;
  std::string answer;
  std::string image_ref;  // relative to the split root
  std::size_t cluster = 0;
  std::string qtype;
  bool retrieval_required = false;
};

struct VqaSplit {
  std::filesystem::path root;
  std::vector<VqaItem> items;

  TensorF load_image(const VqaItem& item) const;
};

void write_vqa(const std::filesystem::path& jsonl, const std::vector<VqaItem>& items);
VqaSplit read_vqa(const std::filesystem::path& jsonl);

struct SyntheticSummary {
  std::size_t pairs = 0, train_items = 0, test_items = 0, retrieval_required = 0;
};

// Writes spec.txt, corpus/ (corpus.jsonl + images) and vqa/{train,test}.jsonl
// with vqa/images.
SyntheticSummary gen_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out);

// ---------------------------------------------------------------- training

// Tokens of every text, in order of first appearance.
Vocab build_vocab(const std::vector<std::string>& texts);

struct PretrainLogRow {
  std::uint64_t step = 0;
  double itc = 0, itm = 0, mlm = 0, total = 0, lr = 0;
};

Checkpoint pretrain(const Corpus& corpus, const Vocab& vocab, const ModelConfig& model, const TrainConfig& train,
                    std::ostream* log = nullptr, std::vector<PretrainLogRow>* rows = nullptr);

// Frozen retrieval model plus the index it built and the corpus images the
// index rows point to.
struct RetrievalSetup {
  Checkpoint retriever;
  ModelF frozen;
  EmbeddingIndex index;
  std::unordered_map<std::uint64_t, TensorF> images;

  RetrievalSetup(Checkpoint retriever, EmbeddingIndex index, const Corpus& corpus);
};

// Loads the retriever checkpoint, then the index (refusing a fingerprint
// mismatch), then the corpus.
RetrievalSetup open_retrieval(const std::filesystem::path& retriever_dir, const std::filesystem::path& index,
                              const std::filesystem::path& corpus_dir);

struct FinetuneOptions {
  std::size_t r = 4;
  TrainConfig train;
  bool rdrop = true;
  bool use_ema = true;  // save the EMA weights
};

struct FinetuneLogRow {
  std::uint64_t step = 0;
  double ce = 0, kl = 0, total = 0, lr = 0;
};

// Starts from `pretrained`, re-initializing the answer head. With r >= 1
// `retrieval` must be set; its retriever is stored as retriever/.
Checkpoint finetune(const Checkpoint& pretrained, const VqaSplit& train, const RetrievalSetup* retrieval,
                    const FinetuneOptions& opts, std::ostream* log = nullptr,
                    std::vector<FinetuneLogRow>* rows = nullptr);

void save_finetuned(const Checkpoint& model, const RetrievalSetup* retrieval, const FinetuneOptions& opts,
                    const std::filesystem::path& dir);

// ---------------------------------------------------------------- evaluation

struct RetrievedRef {
  std::uint64_t pair_id = 0;
  SourceTag source = SourceTag::kOther;
  double s = 0;
  std::string caption;
};

struct ItemPrediction {
  std::string item_id;
  std::string gold;
  std::string predicted;
  bool correct = false;
  bool closed = false;
  bool retrieval_required = false;
  std::vector<RetrievedRef> retrieved;
};

struct Tally {
  std::size_t total = 0, correct = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

struct EvalReport {
  Settings header;
  Tally overall, closed, open, retrieval_required;
  std::vector<ItemPrediction> items;
};

bool is_closed_answer(const std::string& answer);
// Whole-token, case-insensitive: the answer's tokens appear contiguously
// among the caption's tokens.
bool contains_answer(const std::string& caption, const std::string& answer);

EvalReport evaluate(const Checkpoint& model, const VqaSplit& test, const RetrievalSetup* retrieval, std::size_t r);
EvalReport tally(std::vector<ItemPrediction> items, Settings header = {});

std::string report_text(const EvalReport& report);
std::string report_jsonl(const EvalReport& report);
EvalReport parse_report_jsonl(const std::string& text);

struct RetrievalStats {
  std::size_t items = 0;
  std::size_t retrieved = 0;
  std::size_t items_with_answer = 0;
  std::map<std::string, std::size_t> by_source;

  double source_share(const std::string& source) const;  // percent of retrieved pairs
  double have_answer() const;                             // percent of items
};

RetrievalStats retrieval_stats(const EvalReport& report);
std::string stats_text(const RetrievalStats& stats);
std::string stats_jsonl(const RetrievalStats& stats);

struct SweepRow {
  std::size_t r = 0;
  EvalReport report;
  RetrievalStats stats;
};

std::vector<SweepRow> sweep_r(const Checkpoint& pretrained, const VqaSplit& train, const VqaSplit& test,
                              const RetrievalSetup* retrieval, const std::vector<std::size_t>& rs,
                              const FinetuneOptions& base);
std::string sweep_text(const std::vector<SweepRow>& rows);
std::string sweep_jsonl(const std::vector<SweepRow>& rows);

}  // namespace ramm::harness
