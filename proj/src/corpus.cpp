#include "ramm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <unordered_set>

#include "ramm/bytes.hpp"

namespace ramm {

using nlohmann::json;

namespace {

constexpr std::string_view kSourceNames[] = {"PMCPM", "ROCO", "MIMIC_CXR", "SYNTH", "OTHER"};



std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::string required_string(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_string()) throw CorpusError(std::string("missing string field '") + key + "'");
  return j[key].get<std::string>();
}

std::string hex_id(std::uint64_t id) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(id));
  return buf;
}

}  // namespace

std::string_view source_name(SourceTag tag) {
  const auto i = static_cast<std::size_t>(tag);
  return i < std::size(kSourceNames) ? kSourceNames[i] : kSourceNames[4];
}

SourceTag parse_source(std::string_view name) {
  std::string up(name);
  for (auto& c : up) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (std::size_t i = 0; i < std::size(kSourceNames); ++i)
    if (up == kSourceNames[i]) return static_cast<SourceTag>(i);
  return SourceTag::kOther;
}

std::uint64_t make_pair_id(std::string_view article_id, std::string_view figure_id) {
  std::string key(article_id);
  key += '/';
  key += figure_id;
  return fnv1a64(key);
}

ArticleDocument parse_article(std::string_view json_line) {
  json j;
  try {
    j = json::parse(json_line);
  } catch (const json::parse_error& e) {
    throw CorpusError(std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw CorpusError("document is not a JSON object");
  ArticleDocument doc;
  doc.article_id = required_string(j, "article_id");
  if (doc.article_id.empty()) throw CorpusError("empty article_id");
  if (j.contains("source")) {
    if (!j["source"].is_string()) throw CorpusError("field 'source' is not a string");
    doc.source = parse_source(j["source"].get<std::string>());
  }
  if (j.contains("sections")) {
    if (!j["sections"].is_array()) throw CorpusError("field 'sections' is not an array");
    for (const auto& s : j["sections"]) {
      if (!s.is_object()) throw CorpusError("section is not an object");
      doc.sections.push_back({required_string(s, "heading"), required_string(s, "body")});
    }
  }
  std::unordered_set<std::string> ids;
  if (j.contains("figures")) {
    if (!j["figures"].is_array()) throw CorpusError("field 'figures' is not an array");
    for (const auto& f : j["figures"]) {
      if (!f.is_object()) throw CorpusError("figure is not an object");
      Figure fig{required_string(f, "figure_id"), required_string(f, "caption"), required_string(f, "image_ref")};
      if (!ids.insert(fig.figure_id).second) throw CorpusError("duplicate figure_id '" + fig.figure_id + "'");
      doc.figures.push_back(std::move(fig));
    }
  }
  return doc;
}

std::string article_to_json(const ArticleDocument& doc) {
  json j;
  j["article_id"] = doc.article_id;
  j["source"] = std::string(source_name(doc.source));
  j["sections"] = json::array();
  for (const auto& s : doc.sections) j["sections"].push_back({{"heading", s.heading}, {"body", s.body}});
  j["figures"] = json::array();
  for (const auto& f : doc.figures)
    j["figures"].push_back({{"figure_id", f.figure_id}, {"caption", f.caption}, {"image_ref", f.image_ref}});
  return j.dump();
}

std::vector<std::string> default_section_patterns() {
  return {"case report", "case presentation", "case description", "patient presentation", "clinical case"};
}

SectionMatcher::SectionMatcher(const std::vector<std::string>& patterns) {
  for (const auto& p : patterns) {
    try {
      res_.emplace_back(p, std::regex::ECMAScript | std::regex::icase);
    } catch (const std::regex_error& e) {
      throw std::invalid_argument("bad section pattern '" + p + "': " + e.what());
    }
  }
}

bool SectionMatcher::matches(std::string_view heading) const {
  const std::string h(heading);
  return std::any_of(res_.begin(), res_.end(), [&](const std::regex& re) { return std::regex_search(h, re); });
}

std::vector<std::string> read_patterns(const std::filesystem::path& path) {
  std::vector<std::string> out;
  for (auto& line : split_lines(read_text(path))) {
    const auto b = line.find_first_not_of(" \t");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t");
    out.push_back(line.substr(b, e - b + 1));
  }
  return out;
}

std::vector<PatientNote> extract_case_sections(const ArticleDocument& doc, const SectionMatcher& matcher) {
  std::vector<PatientNote> notes;
  for (const auto& s : doc.sections)
    if (matcher.matches(s.heading)) notes.push_back({doc.article_id, s.heading, s.body});
  return notes;
}

std::vector<PatientNote> filter_notes(const std::vector<PatientNote>& notes, const NoteFilter& filter) {
  std::vector<PatientNote> out;
  std::unordered_set<std::string> seen;
  for (const auto& n : notes) {
    if (n.text.size() < filter.min_chars) continue;
    std::size_t counted = 0, alpha = 0;
    for (unsigned char c : n.text) {
      if (std::isspace(c)) continue;
      ++counted;
      alpha += std::isalpha(c) || c >= 0x80;
    }
    if (counted == 0) continue;
    const double non_alpha = 1.0 - static_cast<double>(alpha) / static_cast<double>(counted);
    if (non_alpha > filter.max_non_alpha) continue;
    if (!seen.insert(n.text).second) continue;
    out.push_back(n);
  }
  return out;
}

std::vector<ImageTextPair> pair_figures(const ArticleDocument& doc, const std::vector<PatientNote>& surviving) {
  const bool has_note = std::any_of(surviving.begin(), surviving.end(),
                                    [&](const PatientNote& n) { return n.article_id == doc.article_id; });
  std::vector<ImageTextPair> pairs;
  if (!has_note) return pairs;
  for (const auto& f : doc.figures) {
    if (f.caption.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    pairs.push_back({make_pair_id(doc.article_id, f.figure_id), doc.article_id, f.figure_id, f.caption, f.image_ref,
                     doc.source});
  }
  return pairs;
}

std::string HarvestReport::to_text() const {
  std::ostringstream os;
  os << "documents\t" << documents << "\n"
     << "malformed\t" << malformed << "\n"
     << "notes_extracted\t" << notes_extracted << "\n"
     << "notes_kept\t" << notes_kept << "\n"
     << "articles_with_notes\t" << articles_with_notes << "\n"
     << "pairs_emitted\t" << pairs_emitted << "\n"
     << "missing_images\t" << missing_images << "\n";
  for (const auto& e : errors) os << "error\t" << e << "\n";
  return os.str();
}

HarvestResult harvest(const std::vector<std::pair<std::string, std::string>>& lines, const SectionMatcher& matcher,
                      const NoteFilter& filter) {
  HarvestResult r;
  std::vector<PatientNote> extracted;
  for (const auto& [origin, text] : lines) {
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    ++r.report.documents;
    try {
      r.articles.push_back(parse_article(text));
    } catch (const CorpusError& e) {
      ++r.report.malformed;
      r.report.errors.push_back(origin + ": " + e.what());
      continue;
    }
    auto notes = extract_case_sections(r.articles.back(), matcher);
    extracted.insert(extracted.end(), notes.begin(), notes.end());
  }
  r.report.notes_extracted = extracted.size();
  r.notes = filter_notes(extracted, filter);
  r.report.notes_kept = r.notes.size();
  std::unordered_set<std::uint64_t> ids;
  for (const auto& doc : r.articles) {
    auto pairs = pair_figures(doc, r.notes);
    if (std::any_of(r.notes.begin(), r.notes.end(), [&](const PatientNote& n) { return n.article_id == doc.article_id; }))
      ++r.report.articles_with_notes;
    for (auto& p : pairs) {
      if (!ids.insert(p.pair_id).second) {
        r.report.errors.push_back("duplicate pair " + p.article_id + "/" + p.figure_id + " skipped");
        continue;
      }
      r.pairs.push_back(std::move(p));
    }
  }
  r.report.pairs_emitted = r.pairs.size();
  return r;
}

HarvestResult harvest_dir(const std::filesystem::path& dir, const SectionMatcher& matcher, const NoteFilter& filter) {
  if (!std::filesystem::is_directory(dir)) throw CorpusError("input is not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<std::pair<std::string, std::string>> lines;
  for (const auto& f : files) {
    auto all = split_lines(read_text(f));
    for (std::size_t i = 0; i < all.size(); ++i)
      lines.emplace_back(f.filename().string() + ":" + std::to_string(i + 1), std::move(all[i]));
  }
  return harvest(lines, matcher, filter);
}

void emit_corpus(const HarvestResult& result, const std::filesystem::path& image_root,
                 const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "articles");
  HarvestReport report = result.report;
  std::vector<ImageTextPair> pairs;
  std::unordered_set<std::string> kept_articles;
  for (auto p : result.pairs) {
    const fs::path src = fs::path(p.image_ref).is_absolute() ? fs::path(p.image_ref) : image_root / p.image_ref;
    const std::string local = "images/" + hex_id(p.pair_id) + ".ten";
    if (fs::exists(src)) {
      if (!fs::exists(out_dir / local) || !fs::equivalent(src, out_dir / local))
        fs::copy_file(src, out_dir / local, fs::copy_options::overwrite_existing);
      p.image_ref = local;
    } else {
      ++report.missing_images;
      report.errors.push_back("missing image for " + p.article_id + "/" + p.figure_id + ": " + src.string());
      p.image_ref = src.string();
    }
    kept_articles.insert(p.article_id);
    pairs.push_back(std::move(p));
  }
  write_corpus(out_dir, pairs);

  std::string notes;
  for (const auto& n : result.notes)
    notes += json{{"article_id", n.article_id}, {"heading", n.heading}, {"text", n.text}}.dump() + "\n";
  write_text(out_dir / "notes.jsonl", notes);

  // Re-ingestible documents: surviving sections and captioned figures only,
  // image refs pointing at the copies.
  std::string articles;
  for (const auto& doc : result.articles) {
    if (!kept_articles.count(doc.article_id)) continue;
    ArticleDocument d{doc.article_id, doc.source, {}, {}};
    for (const auto& n : result.notes)
      if (n.article_id == doc.article_id) d.sections.push_back({n.heading, n.text});
    for (const auto& p : pairs) {
      if (p.article_id != doc.article_id) continue;
      const fs::path ref = fs::path(p.image_ref).is_absolute() ? fs::path(p.image_ref) : fs::path("..") / p.image_ref;
      d.figures.push_back({p.figure_id, p.caption, ref.generic_string()});
    }
    articles += article_to_json(d) + "\n";
  }
  write_text(out_dir / "articles" / "articles.jsonl", articles);
  write_text(out_dir / "summary.txt", report.to_text());
}

std::filesystem::path Corpus::image_path(const ImageTextPair& p) const {
  const std::filesystem::path ref(p.image_ref);
  return ref.is_absolute() ? ref : root / ref;
}

TensorF Corpus::load_image(const ImageTextPair& p) const {
  return load_tensor<float>(image_path(p));
}

std::string pair_to_json(const ImageTextPair& p) {
  return json{{"pair_id", p.pair_id},     {"article_id", p.article_id}, {"figure_id", p.figure_id},
              {"caption", p.caption},     {"image_ref", p.image_ref},
              {"source_tag", std::string(source_name(p.source))}}
      .dump();
}

ImageTextPair pair_from_json(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw CorpusError(std::string("invalid corpus line: ") + e.what());
  }
  ImageTextPair p;
  if (!j.contains("pair_id") || !j["pair_id"].is_number_unsigned()) throw CorpusError("missing pair_id");
  p.pair_id = j["pair_id"].get<std::uint64_t>();
  p.article_id = required_string(j, "article_id");
  p.figure_id = j.value("figure_id", std::string());
  p.caption = required_string(j, "caption");
  p.image_ref = required_string(j, "image_ref");
  p.source = parse_source(j.value("source_tag", std::string("OTHER")));
  return p;
}

void write_corpus(const std::filesystem::path& dir, const std::vector<ImageTextPair>& pairs) {
  std::filesystem::create_directories(dir);
  std::string out;
  for (const auto& p : pairs) out += pair_to_json(p) + "\n";
  write_text(dir / "corpus.jsonl", out);
}

Corpus read_corpus(const std::filesystem::path& dir) {
  const auto file = dir / "corpus.jsonl";
  if (!std::filesystem::exists(file)) throw CorpusError("no corpus.jsonl in " + dir.string());
  Corpus c{dir, {}};
  const auto lines = split_lines(read_text(file));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    try {
      c.pairs.push_back(pair_from_json(lines[i]));
    } catch (const CorpusError& e) {
      throw CorpusError("corpus.jsonl:" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return c;
}

}  // namespace ramm
