#pragma once

#include <cstdint>
#include <filesystem>
#include <regex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ramm/tensor.hpp"

namespace ramm {

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SourceTag : std::uint8_t { kPmcpm = 0, kRoco = 1, kMimicCxr = 2, kSynth = 3, kOther = 4 };

std::string_view source_name(SourceTag tag);
// Case-insensitive; unknown names map to kOther.
SourceTag parse_source(std::string_view name);

struct Section {
  std::string heading, body;
};

struct Figure {
  std::string figure_id, caption, image_ref;
};

// One JSON object per line:
// {"article_id": ..., "source": ..., "sections": [{"heading","body"}], "figures": [{"figure_id","caption","image_ref"}]}
struct ArticleDocument {
  std::string article_id;
  SourceTag source = SourceTag::kPmcpm;
  std::vector<Section> sections;
  std::vector<Figure> figures;
};

struct PatientNote {
  std::string article_id, heading, text;
};

struct ImageTextPair {
  std::uint64_t pair_id = 0;
  std::string article_id, figure_id, caption;
  std::string image_ref;  // relative to the corpus directory, or absolute
  SourceTag source = SourceTag::kOther;
};

std::uint64_t make_pair_id(std::string_view article_id, std::string_view figure_id);

ArticleDocument parse_article(std::string_view json_line);
std::string article_to_json(const ArticleDocument& doc);

std::vector<std::string> default_section_patterns();

class SectionMatcher {
 public:
  explicit SectionMatcher(const std::vector<std::string>& patterns = default_section_patterns());
  bool matches(std::string_view heading) const;
  std::size_t size() const { return res_.size(); }

 private:
  std::vector<std::regex> res_;
};

// One pattern per line; blank lines and '#' comments ignored.
std::vector<std::string> read_patterns(const std::filesystem::path& path);

std::vector<PatientNote> extract_case_sections(const ArticleDocument& doc, const SectionMatcher& matcher);

struct NoteFilter {
  std::size_t min_chars = 200;
  double max_non_alpha = 0.5;  // fraction of non-whitespace characters
};

// Length and alphabetic-fraction rules, then exact-duplicate removal keeping
// the first occurrence. Order preserving.
std::vector<PatientNote> filter_notes(const std::vector<PatientNote>& notes, const NoteFilter& filter);

// All captioned figures of `doc` if any of `surviving` belongs to it.
std::vector<ImageTextPair> pair_figures(const ArticleDocument& doc, const std::vector<PatientNote>& surviving);

struct HarvestReport {
  std::size_t documents = 0;
  std::size_t malformed = 0;
  std::size_t notes_extracted = 0;
  std::size_t notes_kept = 0;
  std::size_t articles_with_notes = 0;
  std::size_t pairs_emitted = 0;
  std::size_t missing_images = 0;
  std::vector<std::string> errors;  // "<file>:<line>: message"

  std::string to_text() const;
};

struct HarvestResult {
  std::vector<ArticleDocument> articles;  // every well-formed input document
  std::vector<PatientNote> notes;         // surviving notes
  std::vector<ImageTextPair> pairs;
  HarvestReport report;
};

// `lines` are (origin label, JSON text).
HarvestResult harvest(const std::vector<std::pair<std::string, std::string>>& lines, const SectionMatcher& matcher,
                      const NoteFilter& filter);
// Reads every *.jsonl file of `dir` in name order.
HarvestResult harvest_dir(const std::filesystem::path& dir, const SectionMatcher& matcher, const NoteFilter& filter);

// Writes corpus.jsonl, notes.jsonl, summary.txt, images/ (copies of the
// referenced image files) and articles/articles.jsonl (re-ingestible input
// restricted to articles that produced pairs). `image_root` resolves
// relative image refs of the input.
void emit_corpus(const HarvestResult& result, const std::filesystem::path& image_root,
                 const std::filesystem::path& out_dir);

struct Corpus {
  std::filesystem::path root;
  std::vector<ImageTextPair> pairs;

  std::filesystem::path image_path(const ImageTextPair& p) const;
  TensorF load_image(const ImageTextPair& p) const;
};

std::string pair_to_json(const ImageTextPair& p);
ImageTextPair pair_from_json(std::string_view line);
void write_corpus(const std::filesystem::path& dir, const std::vector<ImageTextPair>& pairs);
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace ramm
