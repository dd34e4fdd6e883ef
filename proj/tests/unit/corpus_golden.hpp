#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ramm/corpus.hpp"

namespace ramm::testing {

inline std::vector<std::vector<std::string>> read_tsv(const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, '\t')) cols.push_back(c);
    rows.push_back(cols);
  }
  return rows;
}

inline std::vector<std::vector<std::string>> pair_rows(const std::vector<ImageTextPair>& pairs) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& p : pairs)
    rows.push_back({std::to_string(p.pair_id), p.article_id, p.figure_id, std::string(source_name(p.source)), p.caption});
  return rows;
}

inline std::vector<std::vector<std::string>> note_rows(const std::vector<PatientNote>& notes) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& n : notes) rows.push_back({n.article_id, n.heading});
  return rows;
}

// First lines of HarvestReport::to_text as name/value rows.
inline std::vector<std::vector<std::string>> summary_rows(const HarvestReport& r) {
  return {{"documents", std::to_string(r.documents)},
          {"malformed", std::to_string(r.malformed)},
          {"notes_extracted", std::to_string(r.notes_extracted)},
          {"notes_kept", std::to_string(r.notes_kept)},
          {"articles_with_notes", std::to_string(r.articles_with_notes)},
          {"pairs_emitted", std::to_string(r.pairs_emitted)}};
}

}  // namespace ramm::testing
