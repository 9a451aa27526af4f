#pragma once

// Decoding and scoring of manifest records with a trained model. Records are
// spread over worker threads, each owning a private model copy.

#include "htrner/checkpoint.hpp"
#include "htrner/dataset.hpp"
#include "htrner/metrics.hpp"

#include <nlohmann/json.hpp>

#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace htrner {

struct Prediction {
  std::string id;
  std::string image;
  std::string split;
  TokenSequence tokens;
  DecodedRecord decoded;
};

// Calls fn(worker_model, i) for i in [0, n) using up to `threads` copies of model.
template <class Fn>
void for_each_with_model(const HtrNerModel<float>& model, int n, int threads, Fn fn) {
  threads = std::max(1, std::min(threads, n));
  std::vector<HtrNerModel<float>> copies(static_cast<std::size_t>(threads), model);
  parallel_for(threads, threads, [&](int w) {
    for (int i = w; i < n; i += threads) fn(copies[static_cast<std::size_t>(w)], i);
  });
}

inline std::vector<Prediction> predict_rows(const HtrNerModel<float>& model, const Vocab& v, const DatasetManifest& m,
                                            const std::vector<const ManifestRow*>& rows, int threads = 1) {
  std::vector<Prediction> out(rows.size());
  const auto& mc = model.config();
  for_each_with_model(model, static_cast<int>(rows.size()), threads, [&](HtrNerModel<float>& net, int i) {
    const ManifestRow& row = *rows[static_cast<std::size_t>(i)];
    const ImageTensor img = preprocess(load_row_image(m, row), mc.image_height, mc.image_width);
    Prediction& p = out[static_cast<std::size_t>(i)];
    p.id = row.id;
    p.image = row.image;
    p.split = row.split;
    p.tokens = net.predict(img);
    p.decoded = decode_target(p.tokens, v, row.id);
  });
  return out;
}

inline std::string prediction_line(const Prediction& p, const Vocab& v) {
  nlohmann::ordered_json j;
  j["id"] = p.id;
  j["image"] = p.image;
  j["lines"] = lines_to_json(p.decoded.record);
  j["split"] = p.split;
  nlohmann::ordered_json ents = nlohmann::ordered_json::array();
  for (const auto& e : parse_entities(p.decoded.record)) ents.push_back({{"t", e.text}, {"c", e.category}, {"p", e.person}});
  j["entities"] = std::move(ents);
  std::string text;
  for (int t : p.tokens.tokens) text += v.label(t);
  j["tokens"] = text;
  j["truncated"] = p.tokens.truncated;
  j["diagnostics"] = p.decoded.diagnostics.to_json();
  return j.dump();
}

inline DecodeDiagnostics diagnostics_from_json(const nlohmann::json& j) {
  DecodeDiagnostics d;
  d.orphan_tags = j.value("orphan_tags", 0);
  d.duplicate_person = j.value("duplicate_person", 0);
  d.incomplete_entity = j.value("incomplete_entity", 0);
  d.missing_sop = j.value("missing_sop", 0);
  d.missing_eop = j.value("missing_eop", 0);
  d.stray_markers = j.value("stray_markers", 0);
  return d;
}

inline ScoreReport score_predictions(const std::vector<Prediction>& preds, const std::vector<const ManifestRow*>& refs) {
  std::vector<RecordScore> rows;
  for (std::size_t i = 0; i < refs.size(); ++i) rows.push_back(score_record(preds[i].decoded.record, refs[i]->record, preds[i].decoded.diagnostics));
  return aggregate(std::move(rows));
}

struct Evaluation {
  ScoreReport report;
  std::vector<Prediction> predictions;
};

// Decodes and scores one split ("all" selects every row).
inline Evaluation evaluate(const Checkpoint& ck, const DatasetManifest& m, const std::string& split, int threads = 1) {
  std::vector<const ManifestRow*> rows;
  for (const auto& r : m.rows)
    if (split == "all" || r.split == split) rows.push_back(&r);
  if (rows.empty()) throw DatasetError("split '" + split + "' has no rows in " + m.path.string());
  Evaluation ev;
  ev.predictions = predict_rows(ck.model, ck.vocab, m, rows, threads);
  ev.report = score_predictions(ev.predictions, rows);
  return ev;
}

}  // namespace htrner
