#pragma once

// File-level workflows shared by the CLI and the acceptance harness.

#include "htrner/config.hpp"
#include "htrner/evaluate.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace htrner {

inline std::vector<SourceRecord> load_sources(const DatasetManifest& m, const std::string& split, int threads = 1) {
  std::vector<const ManifestRow*> rows;
  for (const auto& r : m.rows)
    if (split == "all" || r.split == split) rows.push_back(&r);
  std::vector<SourceRecord> out(rows.size());
  parallel_for(static_cast<int>(rows.size()), threads, [&](int i) {
    const ManifestRow& r = *rows[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(i)] = {r.record, load_row_image(m, r)};
  });
  return out;
}

inline std::string format_loss(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

struct TrainPaths {
  std::filesystem::path checkpoint, loss_csv, phases, vocab, config;
  explicit TrainPaths(const std::filesystem::path& dir)
      : checkpoint(dir / "model.ckpt"), loss_csv(dir / "loss.csv"), phases(dir / "phases.jsonl"), vocab(dir / "vocab.json"),
        config(dir / "config.json") {}
};

// Trains cfg.training.scenario on the train split of the manifest and writes
// model.ckpt, loss.csv, phases.jsonl, vocab.json and config.json into out_dir.
// With resume, continues from out_dir/model.ckpt.
inline TrainState run_training(const RunConfig& cfg, const std::filesystem::path& out_dir, int threads = 1, bool resume = false,
                               int stop_after = -1, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (cfg.manifest.empty()) throw ConfigError("no manifest given (data.manifest or --manifest)");
  const DatasetManifest manifest = read_manifest(cfg.manifest);
  const Vocab vocab = cfg.vocab();
  const TrainPaths paths(out_dir);

  TrainState st;
  st.model = HtrNerModel<float>(cfg.model, vocab.size(), cfg.training.seed);
  std::vector<std::string> kept_loss, kept_phases;
  if (resume) {
    Checkpoint ck = load_checkpoint(paths.checkpoint, vocab.fingerprint());
    if (ck.scenario != cfg.training.scenario)
      throw ConfigError("checkpoint was trained with scenario " + to_string(ck.scenario) + ", not " + to_string(cfg.training.scenario));
    st.model = std::move(ck.model);
    st.optimizer = std::move(ck.optimizer);
    st.cursor = ck.cursor;
    st.finished = ck.finished;
    const int done = global_step(plan_phases(cfg.training), st.cursor);
    std::ifstream lf(paths.loss_csv);
    std::string line;
    while (std::getline(lf, line))
      if (!line.empty() && line[0] != 's' && std::stoi(line) <= done) kept_loss.push_back(line);
    std::ifstream pf(paths.phases);
    while (std::getline(pf, line)) {
      if (line.empty()) continue;
      const int ph = nlohmann::json::parse(line).at("phase").get<int>();
      if (ph < st.cursor.phase || (ph == st.cursor.phase && st.cursor.step > 0)) kept_phases.push_back(line);
    }
  }
  const auto sources = load_sources(manifest, "train", threads);
  if (sources.empty()) throw DatasetError("manifest " + cfg.manifest + " has no train rows");

  std::filesystem::create_directories(out_dir);
  if (!st.finished) train(st, cfg.training, vocab, sources, threads, stop_after, hooks);

  save_checkpoint(paths.checkpoint, checkpoint_from_state(st, vocab, cfg.training));
  std::ofstream lf(paths.loss_csv, std::ios::trunc);
  lf << "step,phase,loss\n";
  for (const auto& l : kept_loss) lf << l << '\n';
  for (const auto& r : st.trace) lf << r.step << ',' << r.phase << ',' << format_loss(r.loss) << '\n';
  std::ofstream pf(paths.phases, std::ios::trunc);
  for (const auto& l : kept_phases) pf << l << '\n';
  for (const auto& p : st.phases) pf << p.to_json().dump() << '\n';
  std::ofstream(paths.vocab, std::ios::trunc) << vocab.to_json().dump(2) << '\n';
  std::ofstream(paths.config, std::ios::trunc) << to_json(cfg).dump(2) << '\n';
  return st;
}

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

// Offline scoring of a predictions JSONL against a reference manifest,
// matched by id. Every reference row of the chosen split must have a prediction.
inline ScoreReport score_files(const std::filesystem::path& pred_path, const DatasetManifest& ref, const std::string& split = "all") {
  std::map<std::string, std::pair<Record, DecodeDiagnostics>> preds;
  int lineno = 0;
  for (const auto& line : read_lines(pred_path)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const ManifestRow row = parse_manifest_line(line);
      const auto j = nlohmann::json::parse(line);
      preds[row.id] = {row.record, j.contains("diagnostics") ? diagnostics_from_json(j.at("diagnostics")) : DecodeDiagnostics{}};
    } catch (const std::exception& e) {
      throw DatasetError(pred_path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  std::vector<RecordScore> rows;
  for (const auto& r : ref.rows) {
    if (split != "all" && r.split != split) continue;
    auto it = preds.find(r.id);
    if (it == preds.end()) throw DatasetError("no prediction for reference record '" + r.id + "'");
    rows.push_back(score_record(it->second.first, r.record, it->second.second));
  }
  return aggregate(std::move(rows));
}

}  // namespace htrner
