#pragma once

// Learning scenarios. Each scenario expands to a list of phases; a phase
// trains on one corpus (paragraphs, k-line blocks or the mixed-level block
// set) with or without tag tokens in the targets. The optimizer is reset at
// the start of every phase.

#include "htrner/model.hpp"
#include "htrner/optim.hpp"
#include "htrner/parallel.hpp"
#include "htrner/render.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace htrner {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Scenario { one_stage, two_stage, mixed_level, two_stage_mixed, curriculum_sequential, curriculum_dual };

inline const std::vector<std::pair<Scenario, std::string>>& scenario_names() {
  static const std::vector<std::pair<Scenario, std::string>> names{{Scenario::one_stage, "one_stage"},
                                                                   {Scenario::two_stage, "two_stage"},
                                                                   {Scenario::mixed_level, "mixed_level"},
                                                                   {Scenario::two_stage_mixed, "two_stage_mixed"},
                                                                   {Scenario::curriculum_sequential, "curriculum_sequential"},
                                                                   {Scenario::curriculum_dual, "curriculum_dual"}};
  return names;
}

inline std::string to_string(Scenario s) {
  for (const auto& [k, n] : scenario_names())
    if (k == s) return n;
  return "?";
}

inline Scenario parse_scenario(const std::string& s) {
  for (const auto& [k, n] : scenario_names())
    if (n == s) return k;
  throw ConfigError("unknown scenario '" + s +
                    "' (expected one_stage|two_stage|mixed_level|two_stage_mixed|curriculum_sequential|curriculum_dual)");
}

// Block levels: k > 0 is a k-line block, kParagraph the full record,
// kMixed every block of every size.
inline constexpr int kParagraph = 0;
inline constexpr int kMixed = -1;

inline std::string level_name(int level) {
  if (level == kParagraph) return "paragraph";
  if (level == kMixed) return "mixed";
  return std::to_string(level);
}

struct ScenarioConfig {
  Scenario scenario = Scenario::one_stage;
  int steps_per_phase = 300;
  std::vector<int> phase_steps;  // optional per-phase override
  int batch_size = 8;
  OptimizerConfig optimizer;
  std::vector<int> level_schedule{1, kParagraph};
  std::uint64_t seed = 0;

  void validate() const {
    if (steps_per_phase <= 0) throw ConfigError("steps_per_phase must be positive");
    for (int s : phase_steps)
      if (s <= 0) throw ConfigError("phase_steps entries must be positive");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (optimizer.learning_rate <= 0) throw ConfigError("learning_rate must be positive");
    if (optimizer.warmup_steps < 0) throw ConfigError("warmup_steps must be non-negative");
    if (level_schedule.empty()) throw ConfigError("level_schedule must not be empty");
    for (std::size_t i = 0; i < level_schedule.size(); ++i) {
      const int k = level_schedule[i];
      if (k < 0) throw ConfigError("level_schedule entries must be positive line counts or \"paragraph\"");
      if (k == kParagraph && i + 1 != level_schedule.size()) throw ConfigError("\"paragraph\" must be the last level");
      if (i > 0 && k != kParagraph && k <= level_schedule[i - 1]) throw ConfigError("level_schedule must be increasing");
    }
  }
};

struct PhaseSpec {
  std::string name;
  int level = kParagraph;
  bool include_tags = true;
  int steps = 0;
};

inline std::vector<PhaseSpec> plan_phases(const ScenarioConfig& c) {
  std::vector<PhaseSpec> p;
  switch (c.scenario) {
    case Scenario::one_stage: p = {{"paragraph_tagged", kParagraph, true}}; break;
    case Scenario::two_stage: p = {{"paragraph_text", kParagraph, false}, {"paragraph_tagged", kParagraph, true}}; break;
    case Scenario::mixed_level: p = {{"mixed_tagged", kMixed, true}}; break;
    case Scenario::two_stage_mixed: p = {{"mixed_text", kMixed, false}, {"mixed_tagged", kMixed, true}}; break;
    case Scenario::curriculum_sequential:
      for (int k : c.level_schedule) p.push_back({level_name(k) + "_text", k, false});
      p.push_back({"paragraph_tagged", kParagraph, true});
      break;
    case Scenario::curriculum_dual:
      for (int k : c.level_schedule) {
        p.push_back({level_name(k) + "_text", k, false});
        p.push_back({level_name(k) + "_tagged", k, true});
      }
      break;
  }
  for (std::size_t i = 0; i < p.size(); ++i)
    p[i].steps = i < c.phase_steps.size() ? c.phase_steps[i] : c.steps_per_phase;
  return p;
}

struct SourceRecord {
  Record record;
  GrayImage image;
};

struct Example {
  Record record;
  ImageTensor image;
  TokenSequence text;
  TokenSequence tagged;
};

// Blocks of one level. A k-line level takes every k-line window of records
// with at least k lines; shorter records contribute their full paragraph.
inline std::vector<std::pair<Record, GrayImage>> blocks_for_level(const SourceRecord& src, int level) {
  std::vector<std::pair<Record, GrayImage>> out;
  const int lines = src.record.line_count();
  if (level == kParagraph || (level > 0 && level >= lines)) {
    out.emplace_back(src.record, src.image);
    return out;
  }
  const int k_lo = level == kMixed ? 1 : level;
  const int k_hi = level == kMixed ? lines : level;
  for (int k = k_lo; k <= k_hi; ++k)
    for (int start = 1; start + k - 1 <= lines; ++start) out.push_back(extract_block(src.record, src.image, start, k));
  return out;
}

inline std::vector<Example> build_corpus(const std::vector<SourceRecord>& data, int level, const Vocab& v, int height, int width,
                                         int threads = 1) {
  std::vector<std::vector<std::pair<Record, GrayImage>>> per(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) per[i] = blocks_for_level(data[i], level);
  std::vector<std::pair<Record, GrayImage>*> flat;
  for (auto& b : per)
    for (auto& x : b) flat.push_back(&x);
  std::vector<Example> out(flat.size());
  parallel_for(static_cast<int>(flat.size()), threads, [&](int i) {
    auto& [rec, img] = *flat[static_cast<std::size_t>(i)];
    Example& e = out[static_cast<std::size_t>(i)];
    e.image = preprocess(img, height, width);
    e.text = encode_target(rec, v, false);
    e.tagged = encode_target(rec, v, true);
    e.record = std::move(rec);
  });
  return out;
}

// Example indices of a phase step: an endless stream of per-epoch
// permutations, so a step's batch depends only on (seed, phase, step).
inline std::vector<int> batch_indices(int corpus_size, int batch, std::uint64_t seed, int phase, int step) {
  std::vector<int> out;
  std::vector<int> perm;
  int cached_epoch = -1;
  for (long pos = static_cast<long>(step) * batch; pos < static_cast<long>(step + 1) * batch; ++pos) {
    const int epoch = static_cast<int>(pos / corpus_size);
    if (epoch != cached_epoch) {
      perm.resize(static_cast<std::size_t>(corpus_size));
      for (int i = 0; i < corpus_size; ++i) perm[static_cast<std::size_t>(i)] = i;
      Rng rng(mix_seed(mix_seed(seed, 0x62617463ULL + static_cast<std::uint64_t>(phase)), static_cast<std::uint64_t>(epoch)));
      rng.shuffle(perm.begin(), perm.end());
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<std::size_t>(pos % corpus_size)]);
  }
  return out;
}

struct TrainCursor {
  int phase = 0;
  int step = 0;  // completed steps within the phase
};

struct LossRow {
  int step = 0;  // global, 1-based
  int phase = 0;
  double loss = 0;
};

struct PhaseLogEntry {
  int index = 0;
  std::string name;
  int level = kParagraph;
  bool include_tags = true;
  int steps = 0;
  int corpus_size = 0;

  nlohmann::json to_json() const {
    return {{"phase", index}, {"name", name}, {"level", level_name(level)}, {"include_tags", include_tags}, {"steps", steps}, {"corpus_size", corpus_size}};
  }
};

struct TrainState {
  HtrNerModel<float> model;
  Adam<float> optimizer;
  TrainCursor cursor;
  std::vector<LossRow> trace;
  std::vector<PhaseLogEntry> phases;
  bool finished = false;
};

inline int global_step(const std::vector<PhaseSpec>& plan, const TrainCursor& c) {
  int g = c.step;
  for (int p = 0; p < c.phase && p < static_cast<int>(plan.size()); ++p) g += plan[static_cast<std::size_t>(p)].steps;
  return g;
}

struct TrainHooks {
  // Called after a phase's last step with the phase index and corpus.
  std::function<void(int, const PhaseSpec&, HtrNerModel<float>&, const std::vector<Example>&)> phase_end;
  // Called after every step with the global step and loss.
  std::function<void(int, double)> step_end;
};

// Runs from st.cursor until the plan is finished or the global step count
// reaches stop_after (when positive).
inline void train(TrainState& st, const ScenarioConfig& sc, const Vocab& v, const std::vector<SourceRecord>& data, int threads = 1,
                  int stop_after = -1, const TrainHooks& hooks = {}) {
  sc.validate();
  if (data.empty()) throw TrainingError("training data is empty");
  const auto plan = plan_phases(sc);
  const ModelConfig& mc = st.model.config();
  std::map<int, std::vector<Example>> corpora;
  int gstep = global_step(plan, st.cursor);

  while (st.cursor.phase < static_cast<int>(plan.size())) {
    const int pi = st.cursor.phase;
    const PhaseSpec& ph = plan[static_cast<std::size_t>(pi)];
    auto it = corpora.find(ph.level);
    if (it == corpora.end()) it = corpora.emplace(ph.level, build_corpus(data, ph.level, v, mc.image_height, mc.image_width, threads)).first;
    const auto& corpus = it->second;
    if (corpus.empty()) throw TrainingError("phase " + ph.name + " has an empty corpus");
    if (st.cursor.step == 0) {
      st.phases.push_back({pi, ph.name, ph.level, ph.include_tags, ph.steps, static_cast<int>(corpus.size())});
      st.optimizer = Adam<float>(st.model.parameters(), sc.optimizer);
    }
    auto params = st.model.parameters();
    while (st.cursor.step < ph.steps) {
      if (stop_after > 0 && gstep >= stop_after) return;
      const auto idx = batch_indices(static_cast<int>(corpus.size()), sc.batch_size, sc.seed, pi, st.cursor.step);
      std::vector<Sample> batch;
      for (int i : idx) {
        const Example& e = corpus[static_cast<std::size_t>(i)];
        batch.push_back({&e.image, ph.include_tags ? &e.tagged : &e.text});
      }
      Rng drop(mix_seed(mix_seed(sc.seed, 0x64726f70ULL + static_cast<std::uint64_t>(pi)), static_cast<std::uint64_t>(st.cursor.step)));
      ForwardContext ctx{true, mc.dropout, &drop};
      for (auto* p : params) p->zero_grad();
      double loss_value = 0;
      {
        Tape<float> tp;
        Var loss = st.model.loss(tp, batch, Vocab::kPad, ctx);
        loss_value = tp.value(loss)[0];
        if (!std::isfinite(loss_value))
          throw TrainingError("loss diverged (" + std::to_string(loss_value) + ") in phase " + ph.name + " at step " + std::to_string(st.cursor.step + 1));
        tp.backward(loss);
      }
      st.optimizer.step(params);
      ++st.cursor.step;
      ++gstep;
      st.trace.push_back({gstep, pi, loss_value});
      if (hooks.step_end) hooks.step_end(gstep, loss_value);
    }
    if (hooks.phase_end) hooks.phase_end(pi, ph, st.model, corpus);
    st.cursor = {pi + 1, 0};
  }
  st.finished = true;
}

inline void to_json(nlohmann::json& j, const ScenarioConfig& c) {
  nlohmann::json levels = nlohmann::json::array();
  for (int k : c.level_schedule) levels.push_back(k == kParagraph ? nlohmann::json("paragraph") : nlohmann::json(k));
  j = nlohmann::json{{"scenario", to_string(c.scenario)},
                     {"steps_per_phase", c.steps_per_phase},
                     {"phase_steps", c.phase_steps},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.optimizer.learning_rate},
                     {"warmup_steps", c.optimizer.warmup_steps},
                     {"clip_norm", c.optimizer.clip_norm},
                     {"level_schedule", levels},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ScenarioConfig& c) {
  if (j.contains("scenario")) c.scenario = parse_scenario(j.at("scenario").get<std::string>());
  c.steps_per_phase = j.value("steps_per_phase", c.steps_per_phase);
  if (j.contains("phase_steps")) j.at("phase_steps").get_to(c.phase_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.optimizer.learning_rate = j.value("learning_rate", c.optimizer.learning_rate);
  c.optimizer.warmup_steps = j.value("warmup_steps", c.optimizer.warmup_steps);
  c.optimizer.clip_norm = j.value("clip_norm", c.optimizer.clip_norm);
  if (j.contains("level_schedule")) {
    c.level_schedule.clear();
    for (const auto& e : j.at("level_schedule")) {
      if (e.is_string()) {
        if (e.get<std::string>() != "paragraph") throw ConfigError("unknown level '" + e.get<std::string>() + "'");
        c.level_schedule.push_back(kParagraph);
      } else {
        c.level_schedule.push_back(e.get<int>());
      }
    }
  }
  c.seed = j.value("seed", c.seed);
}

}  // namespace htrner
