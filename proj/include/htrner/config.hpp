#pragma once

// Run configuration: one JSON file with a section per concern. Unknown keys
// are rejected so typos fail before any work starts.
//
// {
//   "grammar":  {...}, "render": {...},
//   "dataset":  {"num_records": 200, "seed": 0, "split": {"train": 0.8, "valid": 0.1, "test": 0.1}},
//   "vocab":    {"scheme": "joint"},
//   "model":    {...},
//   "training": {...},
//   "data":     {"manifest": "data/manifest.jsonl"}
// }

#include "htrner/dataset.hpp"
#include "htrner/training.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

namespace htrner {

struct RunConfig {
  DatasetConfig dataset;
  TagScheme scheme = TagScheme::joint;
  ModelConfig model;
  ScenarioConfig training;
  std::string manifest;

  void validate() const {
    validate_grammar(dataset.grammar);
    validate_render(dataset.render);
    if (dataset.num_records < 1) throw ConfigError("dataset.num_records must be positive");
    const auto& f = dataset.split;
    if (f.train < 0 || f.valid < 0 || f.test < 0 || std::abs(f.train + f.valid + f.test - 1.0) > 1e-9)
      throw ConfigError("dataset.split fractions must be non-negative and sum to 1");
    model.validate();
    training.validate();
  }

  Vocab vocab() const { return Vocab::from_grammar(scheme, dataset.grammar); }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"grammar", "render", "dataset", "vocab", "model", "training", "data"}, "config");
  RunConfig c;
  try {
    if (j.contains("grammar")) j.at("grammar").get_to(c.dataset.grammar);
    if (j.contains("render")) j.at("render").get_to(c.dataset.render);
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      detail::reject_unknown(d, {"num_records", "seed", "split"}, "dataset");
      c.dataset.num_records = d.value("num_records", c.dataset.num_records);
      c.dataset.seed = d.value("seed", c.dataset.seed);
      if (d.contains("split")) {
        const auto& s = d.at("split");
        detail::reject_unknown(s, {"train", "valid", "test"}, "dataset.split");
        c.dataset.split.train = s.value("train", c.dataset.split.train);
        c.dataset.split.valid = s.value("valid", c.dataset.split.valid);
        c.dataset.split.test = s.value("test", c.dataset.split.test);
      }
    }
    if (j.contains("vocab")) {
      detail::reject_unknown(j.at("vocab"), {"scheme"}, "vocab");
      c.scheme = parse_tag_scheme(j.at("vocab").value("scheme", std::string("joint")));
    }
    if (j.contains("model")) {
      detail::reject_unknown(j.at("model"), {"hidden", "heads", "layers", "feedforward", "dropout", "max_decode_len", "attention_scale",
                                             "positional_encoding", "image_height", "image_width", "backbone"},
                             "model");
      j.at("model").get_to(c.model);
    }
    if (j.contains("training")) {
      detail::reject_unknown(j.at("training"), {"scenario", "steps_per_phase", "phase_steps", "batch_size", "learning_rate", "warmup_steps",
                                                "clip_norm", "level_schedule", "seed"},
                             "training");
      j.at("training").get_to(c.training);
    }
    if (j.contains("data")) {
      detail::reject_unknown(j.at("data"), {"manifest"}, "data");
      c.manifest = j.at("data").value("manifest", std::string{});
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  RunConfig c = run_config_from_json(j);
  // A relative manifest path is relative to the config file.
  if (!c.manifest.empty() && std::filesystem::path(c.manifest).is_relative())
    c.manifest = (path.parent_path() / c.manifest).string();
  return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["grammar"] = c.dataset.grammar;
  j["render"] = c.dataset.render;
  j["dataset"] = {{"num_records", c.dataset.num_records},
                  {"seed", c.dataset.seed},
                  {"split", {{"train", c.dataset.split.train}, {"valid", c.dataset.split.valid}, {"test", c.dataset.split.test}}}};
  j["vocab"] = {{"scheme", to_string(c.scheme)}};
  j["model"] = c.model;
  j["training"] = c.training;
  if (!c.manifest.empty()) j["data"] = {{"manifest", c.manifest}};
  return j;
}

}  // namespace htrner
