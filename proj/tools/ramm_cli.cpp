// ramm: desk-scale retrieval-augmented VQA pipeline driver.

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>

#include "ramm/bytes.hpp"
#include "ramm/harness.hpp"

using namespace ramm;
using namespace ramm::harness;
namespace fs = std::filesystem;

namespace {

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kMissingArtifact = 3,
  kFingerprint = 4,
  kBadR = 5,
  kCorrupt = 6,
};

// Flags are overrides of config keys: --config, then --set, then the
// subcommand's own flags.
struct Flags {
  CLI::App* app = nullptr;
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::pair<CLI::Option*, std::string>> keyed;
  std::map<std::string, std::string> raw;
  int (*run)(const Settings&) = nullptr;

  // CLI11 binds to these members, so a Flags must not move after this.
  Flags(CLI::App* a, int (*r)(const Settings&)) : app(a), run(r) {
    app->add_option("--config", config, "key=value config file");
    app->add_option("--set", sets, "key=value override (repeatable)");
  }

  Flags& opt(const std::string& name, const std::string& key, const std::string& desc) {
    keyed.emplace_back(app->add_option(name, raw[key], desc), key);
    return *this;
  }

  Settings settings() const {
    Settings s;
    if (!config.empty()) s = Settings::from_file(config);
    s.apply(sets);
    for (const auto& [o, k] : keyed)
      if (o->count()) s.set(k, raw.at(k));
    return s;
  }
};

std::string need(const Settings& s, const std::string& key) {
  if (!s.has(key) || s.str(key).empty()) throw ConfigError("missing required setting '" + key + "'");
  return s.str(key);
}

void write_pair(const fs::path& prefix, const std::string& text, const std::string& jsonl) {
  write_text(fs::path(prefix.string() + ".txt"), text);
  write_text(fs::path(prefix.string() + ".jsonl"), jsonl);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

ModelConfig desk_model(const Settings& s, const Corpus& corpus) {
  ModelConfig base = desk_model_config();
  if (!corpus.pairs.empty()) {
    const auto img = corpus.load_image(corpus.pairs.front());
    const auto grid = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(img.rows()))));
    if (grid * grid == img.rows()) {
      base.patch_grid = grid;
      base.d_patch = img.cols();
    }
  }
  return model_config_from(s, base);
}

TrainConfig desk_pretrain(const Settings& s) { return train_config_from(s, desk_pretrain_config(), "pretrain"); }

TrainConfig desk_finetune(const Settings& s) { return train_config_from(s, desk_finetune_config(), "finetune"); }

Corpus open_corpus(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "corpus.jsonl")) throw MissingArtifact("corpus not found: " + dir);
  return read_corpus(dir);
}

std::unique_ptr<RetrievalSetup> maybe_retrieval(const Settings& s, const std::string& retriever, bool required) {
  if (!s.has("index")) {
    if (required) throw ConfigError("r >= 1 needs --index");
    return nullptr;
  }
  return std::make_unique<RetrievalSetup>(open_retrieval(retriever, need(s, "index"), need(s, "corpus")));
}

// ---------------------------------------------------------------- commands

int cmd_gen_synth(const Settings& s) {
  const auto spec = SyntheticSpec::from_settings(s, SyntheticSpec{});
  const auto sum = gen_synthetic(spec, need(s, "out"));
  std::cout << "pairs\t" << sum.pairs << "\ntrain_items\t" << sum.train_items << "\ntest_items\t" << sum.test_items
            << "\nretrieval_required\t" << sum.retrieval_required << "\nfingerprint\t" << spec.fingerprint() << "\n";
  return kOk;
}

int cmd_harvest(const Settings& s) {
  const fs::path in = need(s, "in");
  if (!fs::is_directory(in)) throw MissingArtifact("input directory not found: " + in.string());
  SectionMatcher matcher;
  if (s.has("patterns")) {
    if (!fs::exists(s.str("patterns"))) throw MissingArtifact("patterns file not found: " + s.str("patterns"));
    matcher = SectionMatcher(read_patterns(s.str("patterns")));
  }
  NoteFilter filter;
  filter.min_chars = s.count("min_chars", filter.min_chars);
  filter.max_non_alpha = s.real("max_non_alpha", filter.max_non_alpha);
  const auto result = harvest_dir(in, matcher, filter);
  emit_corpus(result, in, need(s, "out"));
  std::cout << result.report.to_text();
  return kOk;
}

int cmd_pretrain(const Settings& s) {
  const auto corpus = open_corpus(need(s, "corpus"));
  std::vector<std::string> texts;
  for (const auto& p : corpus.pairs) texts.push_back(p.caption);
  for (const auto& path : split_list(s.str("vocab_texts")))
    for (const auto& it : read_vqa(path).items) texts.push_back(it.question);
  const auto vocab = build_vocab(texts);
  const auto mc = desk_model(s, corpus);
  const auto tc = desk_pretrain(s);
  const fs::path out = need(s, "out");
  fs::create_directories(out);
  std::ofstream log(out / "train_log.tsv");
  std::vector<PretrainLogRow> rows;
  const auto ckpt = pretrain(corpus, vocab, mc, tc, &log, &rows);
  save_checkpoint(ckpt, out);
  write_text(out / "run.txt", s.to_text());
  std::cout << "steps\t" << rows.size() << "\n";
  if (!rows.empty()) std::cout << "first_total\t" << rows.front().total << "\nlast_total\t" << rows.back().total << "\n";
  std::cout << "fingerprint\t" << ModelF(ckpt.config, ckpt.params).retrieval_fingerprint() << "\n";
  return kOk;
}

int cmd_build_index(const Settings& s) {
  const auto ckpt = load_checkpoint(need(s, "model"));
  const ModelF model(ckpt.config, ckpt.params);
  const auto corpus = open_corpus(need(s, "corpus"));
  BuildReport rep;
  const auto index = build_store(corpus, model, ckpt.vocab, &rep);
  save_index(index, need(s, "out"));
  std::cout << "rows\t" << index.size() << "\nskipped\t" << rep.skipped << "\nfingerprint\t" << index.fingerprint()
            << "\nchecksum\t" << index.checksum() << "\n";
  for (const auto& r : rep.skipped_reasons) std::cerr << "skipped: " << r << "\n";
  return kOk;
}

int cmd_finetune(const Settings& s) {
  FinetuneOptions opts;
  opts.r = s.count("r", 4);
  if (!valid_r(opts.r)) throw InvalidR("r=" + std::to_string(opts.r) + " not in {0,1,2,4,8}");
  opts.train = desk_finetune(s);
  opts.rdrop = s.flag("rdrop", true);
  opts.use_ema = s.flag("use_ema", true);
  const auto model_dir = need(s, "model");
  const auto pretrained = load_checkpoint(model_dir);
  const auto retrieval = maybe_retrieval(s, s.str("retriever", model_dir), opts.r > 0);
  const auto train = read_vqa(need(s, "train"));
  const fs::path out = need(s, "out");
  fs::create_directories(out);
  std::ofstream log(out / "train_log.tsv");
  std::vector<FinetuneLogRow> rows;
  const auto ckpt = finetune(pretrained, train, retrieval.get(), opts, &log, &rows);
  save_finetuned(ckpt, retrieval.get(), opts, out);
  write_text(out / "run.txt", s.to_text());
  std::cout << "r\t" << opts.r << "\nsteps\t" << rows.size() << "\nanswers\t" << ckpt.answers.size() << "\n";
  if (!rows.empty()) std::cout << "last_total\t" << rows.back().total << "\n";
  return kOk;
}

int cmd_eval(const Settings& s) {
  const fs::path model_dir = need(s, "model");
  const auto ckpt = load_checkpoint(model_dir);
  Settings trained;
  if (fs::exists(model_dir / "finetune.txt")) trained = Settings::from_file(model_dir / "finetune.txt");
  const std::size_t r = s.count("r", trained.count("r", 0));
  require_valid_r(r, ckpt.config.max_r);
  std::unique_ptr<RetrievalSetup> retrieval;
  if (r > 0) {
    if (!fs::exists(model_dir / "retriever")) throw MissingArtifact("no retriever/ in " + model_dir.string());
    retrieval = maybe_retrieval(s, (model_dir / "retriever").string(), true);
  }
  const auto test = read_vqa(need(s, "test"));
  auto report = evaluate(ckpt, test, retrieval.get(), r);
  Settings header = s;
  header.merge(report.header);
  for (const auto& [k, v] : trained.values()) header.set("finetune." + k, v);
  report.header = header;
  const auto text = report_text(report);
  if (s.has("out")) write_pair(s.str("out"), text, report_jsonl(report));
  std::cout << text;
  return kOk;
}

int cmd_retrieve(const Settings& s) {
  const fs::path index_path = need(s, "index");
  const fs::path query_path = need(s, "query_tensor");
  if (!fs::exists(index_path)) throw MissingArtifact("index not found: " + index_path.string());
  if (!fs::exists(query_path)) throw MissingArtifact("query tensor not found: " + query_path.string());
  const auto index = load_index(index_path);
  const auto query = load_tensor<float>(query_path);
  RetrieveOptions opts;
  opts.r = s.count("r", 4);
  const auto mode = s.str("mode", "infer");
  if (mode != "train" && mode != "infer") throw ConfigError("--mode must be train or infer");
  opts.mode = mode == "train" ? SelectMode::kTrain : SelectMode::kInfer;
  opts.seed = s.u64("seed", 0);
  if (s.has("exclude")) opts.exclude = s.u64("exclude", 0);
  RetrievalResult res;
  if (query.size() == index.d_proj()) {
    res = retrieve_by_vector(query.values(), index, opts);
  } else {
    if (!s.has("model")) throw ConfigError("query is not a d_proj vector; pass --model to embed image patches");
    const auto ckpt = load_checkpoint(s.str("model"));
    const ModelF frozen(ckpt.config, ckpt.params);
    res = retrieve(query, frozen, index, opts);
  }
  std::cout << "rank\tpair_id\ts_w\ts_v\ts\tcaption\n";
  auto num = [](const std::optional<double>& v) {
    if (!v) return std::string("NA");
    std::ostringstream os;
    os.precision(9);
    os << *v;
    return os.str();
  };
  for (std::size_t i = 0; i < res.selected.size(); ++i) {
    const auto& c = res.selected[i];
    std::cout << i + 1 << "\t" << c.pair_id << "\t" << num(c.s_w) << "\t" << num(c.s_v) << "\t" << num(c.s) << "\t"
              << index.caption(c.row) << "\n";
  }
  std::cerr << "pool\t" << res.pool_size << (res.short_pool ? "\tshort" : "") << "\n";
  return kOk;
}

int cmd_stats(const Settings& s) {
  const fs::path report_path = need(s, "report");
  if (!fs::exists(report_path)) throw MissingArtifact("report not found: " + report_path.string());
  const auto stats = retrieval_stats(parse_report_jsonl(read_text(report_path)));
  const auto text = stats_text(stats);
  if (s.has("out")) write_pair(s.str("out"), text, stats_jsonl(stats));
  std::cout << text;
  return kOk;
}

int cmd_sweep(const Settings& s) {
  std::vector<std::size_t> rs;
  for (const auto& x : split_list(s.str("rs", "0,1,2,4,8"))) {
    std::size_t r = 0;
    try {
      r = std::stoul(x);
    } catch (const std::exception&) {
      throw ConfigError("--rs: not an integer: '" + x + "'");
    }
    if (!valid_r(r)) throw InvalidR("r=" + x + " not in {0,1,2,4,8}");
    rs.push_back(r);
  }
  FinetuneOptions opts;
  opts.train = desk_finetune(s);
  opts.rdrop = s.flag("rdrop", true);
  const auto model_dir = need(s, "model");
  const auto pretrained = load_checkpoint(model_dir);
  bool any = false;
  for (auto r : rs) any = any || r > 0;
  const auto retrieval = maybe_retrieval(s, s.str("retriever", model_dir), any);
  const auto train = read_vqa(need(s, "train"));
  const auto test = read_vqa(need(s, "test"));
  const auto rows = sweep_r(pretrained, train, test, retrieval.get(), rs, opts);
  std::string text;
  for (const auto& [k, v] : s.values()) text += "# " + k + "=" + v + "\n";
  text += sweep_text(rows);
  if (s.has("out")) write_pair(s.str("out"), text, sweep_jsonl(rows));
  std::cout << text;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ramm: retrieval-augmented medical VQA pipeline"};
  app.require_subcommand(1);

  std::vector<std::unique_ptr<Flags>> commands;
  auto add = [&](const std::string& name, const std::string& desc, int (*run)(const Settings&)) -> Flags& {
    commands.push_back(std::make_unique<Flags>(app.add_subcommand(name, desc), run));
    return *commands.back();
  };

  add("gen-synth", "generate the synthetic corpus and VQA splits", cmd_gen_synth)
      .opt("--out", "out", "output directory")
      .opt("--seed", "seed", "generator seed")
      .opt("--n-clusters", "n_clusters", "number of clusters")
      .opt("--retrieval-required-fraction", "retrieval_required_fraction", "share of retrieval-required test items");
  add("harvest", "extract case notes and image-text pairs from article JSONL", cmd_harvest)
      .opt("--in", "in", "directory of *.jsonl articles")
      .opt("--out", "out", "output corpus directory")
      .opt("--patterns", "patterns", "heading regex file, one per line")
      .opt("--min-chars", "min_chars", "minimum note length");
  add("pretrain", "ITC + ITM + MLM pretraining", cmd_pretrain)
      .opt("--corpus", "corpus", "corpus directory")
      .opt("--out", "out", "checkpoint directory")
      .opt("--vocab-texts", "vocab_texts", "comma-separated VQA jsonl files whose questions join the vocabulary")
      .opt("--epochs", "pretrain.epochs", "epochs")
      .opt("--seed", "seed", "training seed");
  add("build-index", "embed the corpus with frozen encoders", cmd_build_index)
      .opt("--model", "model", "pretrained checkpoint")
      .opt("--corpus", "corpus", "corpus directory")
      .opt("--out", "out", "index file (RAMMIDX1)");
  add("finetune", "VQA fine-tuning with r retrieved pairs", cmd_finetune)
      .opt("--model", "model", "pretrained checkpoint")
      .opt("--retriever", "retriever", "frozen retrieval checkpoint (default: --model)")
      .opt("--index", "index", "index file")
      .opt("--corpus", "corpus", "corpus directory")
      .opt("--train", "train", "training split jsonl")
      .opt("--out", "out", "output checkpoint directory")
      .opt("--r", "r", "retrieved pairs: 0,1,2,4,8")
      .opt("--epochs", "finetune.epochs", "epochs")
      .opt("--seed", "seed", "training seed");
  add("eval", "accuracy on a split", cmd_eval)
      .opt("--model", "model", "fine-tuned checkpoint")
      .opt("--test", "test", "evaluation split jsonl")
      .opt("--index", "index", "index file")
      .opt("--corpus", "corpus", "corpus directory")
      .opt("--r", "r", "override the fine-tuned r")
      .opt("--out", "out", "report prefix (.txt and .jsonl)");
  add("retrieve", "top-r retrieval for one query", cmd_retrieve)
      .opt("--index", "index", "index file")
      .opt("--query-tensor", "query_tensor", "RAMMTEN1 query: d_proj vector or image patches")
      .opt("--model", "model", "checkpoint that embeds image patches")
      .opt("--r", "r", "pairs to return")
      .opt("--mode", "mode", "train | infer")
      .opt("--seed", "seed", "selection seed (train mode)")
      .opt("--exclude", "exclude", "pair id to skip");
  add("stats", "retrieval source shares and answer containment", cmd_stats)
      .opt("--report", "report", "eval report jsonl")
      .opt("--out", "out", "output prefix");
  add("sweep-r", "fine-tune and evaluate for each r", cmd_sweep)
      .opt("--model", "model", "pretrained checkpoint")
      .opt("--index", "index", "index file")
      .opt("--corpus", "corpus", "corpus directory")
      .opt("--train", "train", "training split jsonl")
      .opt("--test", "test", "evaluation split jsonl")
      .opt("--rs", "rs", "comma-separated r values")
      .opt("--epochs", "finetune.epochs", "epochs")
      .opt("--seed", "seed", "training seed")
      .opt("--out", "out", "report prefix");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    for (const auto& c : commands)
      if (c->app->parsed()) return c->run(c->settings());
  } catch (const InvalidR& e) {
    std::cerr << "error: invalid r: " << e.what() << "\n";
    return kBadR;
  } catch (const MissingArtifact& e) {
    std::cerr << "error: missing artifact: " << e.what() << "\n";
    return kMissingArtifact;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (e.code() == FormatErrorCode::kFingerprintMismatch) return kFingerprint;
    if (e.code() == FormatErrorCode::kIo) return kMissingArtifact;
    return kCorrupt;
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
  return kUsage;
}
