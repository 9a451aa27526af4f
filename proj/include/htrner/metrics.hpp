#pragma once

// Character error rate and entity-level basic/complete scores.
//
// A ground-truth entity word earns 100 * max(0, 1 - cer(pred, gt)) when it is
// aligned to a predicted entity with the same category (basic) or the same
// category and person (complete), and 0 otherwise. Alignment is the
// order-preserving one-to-one matching with maximal total credit.

#include "htrner/record.hpp"
#include "htrner/vocab.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace htrner {

inline int levenshtein(const std::string& a, const std::string& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double cer(const std::string& hyp, const std::string& ref) {
  if (ref.empty()) throw std::invalid_argument("cer: reference is empty");
  return static_cast<double>(levenshtein(hyp, ref)) / static_cast<double>(ref.size());
}

enum class ScoreLevel { basic, complete };

inline double word_credit(const EntityTriple& pred, const EntityTriple& gt, ScoreLevel level) {
  if (pred.category != gt.category) return 0.0;
  if (level == ScoreLevel::complete && pred.person != gt.person) return 0.0;
  return 100.0 * std::max(0.0, 1.0 - cer(pred.text, gt.text));
}

struct Alignment {
  std::vector<std::pair<int, int>> pairs;  // (pred index, gt index), increasing in both
  double total = 0.0;
};

inline Alignment align_entities(const std::vector<EntityTriple>& pred, const std::vector<EntityTriple>& gt,
                                ScoreLevel level = ScoreLevel::basic) {
  const std::size_t n = pred.size(), m = gt.size();
  std::vector<std::vector<double>> best(n + 1, std::vector<double>(m + 1, 0.0));
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      best[i][j] = std::max({best[i - 1][j], best[i][j - 1], best[i - 1][j - 1] + word_credit(pred[i - 1], gt[j - 1], level)});
  Alignment a;
  a.total = best[n][m];
  std::size_t i = n, j = m;
  while (i > 0 && j > 0) {
    const double c = word_credit(pred[i - 1], gt[j - 1], level);
    if (c > 0 && best[i][j] == best[i - 1][j - 1] + c) {
      a.pairs.emplace_back(static_cast<int>(i - 1), static_cast<int>(j - 1));
      --i;
      --j;
    } else if (best[i][j] == best[i - 1][j]) {
      --i;
    } else {
      --j;
    }
  }
  std::reverse(a.pairs.begin(), a.pairs.end());
  return a;
}

// Exhaustive search over every order-preserving matching; test oracle.
inline double align_entities_brute_force(const std::vector<EntityTriple>& pred, const std::vector<EntityTriple>& gt,
                                         ScoreLevel level = ScoreLevel::basic) {
  std::function<double(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> double {
    double best = 0.0;
    for (std::size_t a = i; a < pred.size(); ++a)
      for (std::size_t b = j; b < gt.size(); ++b) best = std::max(best, word_credit(pred[a], gt[b], level) + go(a + 1, b + 1));
    return best;
  };
  return go(0, 0);
}

// Mean credit over ground-truth entity words; nullopt when gt has none.
inline std::optional<double> entity_score(const Record& pred, const Record& gt, ScoreLevel level) {
  const auto g = parse_entities(gt);
  if (g.empty()) return std::nullopt;
  return align_entities(parse_entities(pred), g, level).total / static_cast<double>(g.size());
}

inline std::optional<double> basic_score(const Record& pred, const Record& gt) { return entity_score(pred, gt, ScoreLevel::basic); }
inline std::optional<double> complete_score(const Record& pred, const Record& gt) {
  return entity_score(pred, gt, ScoreLevel::complete);
}

struct RecordScore {
  std::string id;
  bool scorable = false;
  double basic = 0.0;
  double complete = 0.0;
  double cer = 0.0;
  int edits = 0;
  int ref_chars = 0;
  DecodeDiagnostics diagnostics;
};

struct ScoreReport {
  std::vector<RecordScore> records;
  double mean_basic = 0.0;
  double mean_complete = 0.0;
  double corpus_cer = 0.0;
  int scorable = 0;
  int unscorable = 0;
  DecodeDiagnostics diagnostics;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& r : records) {
      nlohmann::ordered_json j;
      j["id"] = r.id;
      j["scorable"] = r.scorable;
      j["basic"] = r.scorable ? nlohmann::ordered_json(r.basic) : nlohmann::ordered_json(nullptr);
      j["complete"] = r.scorable ? nlohmann::ordered_json(r.complete) : nlohmann::ordered_json(nullptr);
      j["cer"] = r.cer;
      j["diagnostics"] = r.diagnostics.to_json();
      rows.push_back(std::move(j));
    }
    nlohmann::ordered_json out;
    out["aggregate"] = {{"mean_basic", mean_basic},
                        {"mean_complete", mean_complete},
                        {"corpus_cer", corpus_cer},
                        {"records", records.size()},
                        {"scorable", scorable},
                        {"unscorable", unscorable},
                        {"diagnostics", diagnostics.to_json()}};
    out["records"] = std::move(rows);
    return out;
  }
};

inline RecordScore score_record(const Record& pred, const Record& gt, const DecodeDiagnostics& diag = {}) {
  RecordScore r;
  r.id = gt.id;
  r.diagnostics = diag;
  const std::string ref = gt.transcription();
  r.ref_chars = static_cast<int>(ref.size());
  r.edits = levenshtein(pred.transcription(), ref);
  r.cer = ref.empty() ? 0.0 : static_cast<double>(r.edits) / static_cast<double>(ref.size());
  const auto b = basic_score(pred, gt);
  if (b) {
    r.scorable = true;
    r.basic = *b;
    r.complete = *complete_score(pred, gt);
  }
  return r;
}

// Unweighted means over scorable records; corpus CER pools edits and
// reference characters over every record.
inline ScoreReport aggregate(std::vector<RecordScore> rows) {
  ScoreReport rep;
  long edits = 0, chars = 0;
  for (const auto& r : rows) {
    edits += r.edits;
    chars += r.ref_chars;
    rep.diagnostics += r.diagnostics;
    if (!r.scorable) {
      ++rep.unscorable;
      continue;
    }
    ++rep.scorable;
    rep.mean_basic += r.basic;
    rep.mean_complete += r.complete;
  }
  if (rep.scorable) {
    rep.mean_basic /= rep.scorable;
    rep.mean_complete /= rep.scorable;
  }
  rep.corpus_cer = chars ? static_cast<double>(edits) / static_cast<double>(chars) : 0.0;
  rep.records = std::move(rows);
  return rep;
}

}  // namespace htrner
