#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <set>

using namespace htrner;
using namespace htrner::testing;

namespace {

ModelConfig train_model_config() {
  ModelConfig c = tiny_model_config();
  c.hidden = 16;
  c.image_height = 64;
  c.image_width = 128;
  c.max_decode_len = 300;
  return c;
}

std::vector<SourceRecord> sources(int n, std::uint64_t seed, int lines = 0) {
  const GrammarConfig g;
  std::vector<SourceRecord> out;
  for (std::uint64_t s = seed; static_cast<int>(out.size()) < n; ++s) {
    Record r = generate_record(s, g);
    if (lines && r.line_count() != lines) continue;
    out.push_back({r, render_record(r, s)});
  }
  return out;
}

ScenarioConfig short_run(Scenario s, int steps, int batch = 4) {
  ScenarioConfig sc;
  sc.scenario = s;
  sc.steps_per_phase = steps;
  sc.batch_size = batch;
  sc.optimizer.warmup_steps = 5;
  sc.optimizer.learning_rate = 2e-3;
  sc.seed = 3;
  return sc;
}

TrainState fresh_state(const ModelConfig& mc, const Vocab& v, std::uint64_t seed) {
  TrainState st;
  st.model = HtrNerModel<float>(mc, v.size(), seed);
  return st;
}

float probe_sum(HtrNerModel<float>& m, const ImageTensor& img, const TokenSequence& target) {
  Tape<float> tp(false);
  return tp.value(m.loss(tp, {{&img, &target}}, Vocab::kPad))[0];
}

}  // namespace

TEST(Loss, UniformLogitsGiveLogClasses) {
  Tape<double> tp(false);
  const Tensor<double> logits({3, 45}, 0.7);
  EXPECT_NEAR(tp.value(ops::cross_entropy(tp, tp.constant(logits), {4, 9, 44}, 0))[0], std::log(45.0), 1e-12);
  EXPECT_NEAR(std::log(45.0), 3.8067, 1e-4);
}

TEST(Loss, ConfidentCorrectLogitsGiveZero) {
  Tensor<double> logits({2, 10}, 0.0);
  logits[3] = 60.0;
  logits[10 + 7] = 60.0;
  Tape<double> tp(false);
  EXPECT_LT(tp.value(ops::cross_entropy(tp, tp.constant(logits), {3, 7}, 0))[0], 1e-20);
}

TEST(Loss, PadPositionsIgnored) {
  Rng rng(1);
  Tensor<double> logits({3, 6});
  for (auto& x : logits.data) x = rng.normal();
  Tape<double> tp(false);
  const double with_pad = tp.value(ops::cross_entropy(tp, tp.constant(logits), {2, 0, 5}, 0))[0];
  Tensor<double> two({2, 6});
  std::copy(logits.data.begin(), logits.data.begin() + 6, two.data.begin());
  std::copy(logits.data.begin() + 12, logits.data.end(), two.data.begin() + 6);
  EXPECT_NEAR(with_pad, tp.value(ops::cross_entropy(tp, tp.constant(two), {2, 5}, 0))[0], 1e-14);
}

TEST(Loss, GradientMatchesFiniteDifference) {
  Rng rng(2);
  Parameter<double> logits("logits", {4, 7});
  for (auto& x : logits.value.data) x = rng.normal();
  const std::vector<int> targets{1, 6, 0, 3};
  auto loss = [&](bool with_backward) {
    Tape<double> tp(with_backward);
    Var l = ops::cross_entropy(tp, tp.param(logits), targets, 0);
    if (with_backward) tp.backward(l);
    return tp.value(l)[0];
  };
  const auto entries = finite_difference_check({&logits}, loss, rng, 28, 1e-6, 1e-12);
  EXPECT_EQ(entries.size(), 21u);  // the pad row has zero gradient
  for (const auto& e : entries) EXPECT_LE(e.rel_error, 1e-4);
}

TEST(Optimizer, ScheduleWarmupThenDecay) {
  EXPECT_EQ(schedule_factor(0, 10), 0.0);
  EXPECT_DOUBLE_EQ(schedule_factor(5, 10), 0.5);
  EXPECT_DOUBLE_EQ(schedule_factor(10, 10), 1.0);
  EXPECT_DOUBLE_EQ(schedule_factor(40, 10), 0.5);
  EXPECT_DOUBLE_EQ(schedule_factor(7, 0), 1.0);
}

TEST(Optimizer, FirstStepAndClipping) {
  Parameter<double> p("p", {3});
  p.value.data = {1.0, 2.0, 3.0};
  p.grad.data = {3.0, 0.0, -4.0};  // norm 5, clipped to 1
  OptimizerConfig oc;
  oc.learning_rate = 0.1;
  oc.warmup_steps = 0;
  Adam<double> opt({&p}, oc);
  EXPECT_DOUBLE_EQ(opt.step({&p}), 5.0);
  // With bias correction the first update is lr * g / (|g| + eps) per entry.
  EXPECT_NEAR(p.value[0], 1.0 - 0.1, 1e-9);
  EXPECT_NEAR(p.value[1], 2.0, 1e-12);
  EXPECT_NEAR(p.value[2], 3.0 + 0.1, 1e-9);
  EXPECT_NEAR(opt.first_moments()[0][0], 0.1 * 0.6, 1e-12);
  EXPECT_NEAR(opt.second_moments()[0][2], 0.02 * 0.64, 1e-12);
}

TEST(Phases, SequentialAndDualPlans) {
  ScenarioConfig sc;
  sc.scenario = Scenario::curriculum_sequential;
  sc.level_schedule = {1, kParagraph};
  auto p = plan_phases(sc);
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p[0].name, "1_text");
  EXPECT_EQ(p[0].level, 1);
  EXPECT_FALSE(p[0].include_tags);
  EXPECT_EQ(p[1].name, "paragraph_text");
  EXPECT_FALSE(p[1].include_tags);
  EXPECT_EQ(p[2].name, "paragraph_tagged");
  EXPECT_TRUE(p[2].include_tags);

  sc.scenario = Scenario::curriculum_dual;
  sc.level_schedule = {1, 2, kParagraph};
  p = plan_phases(sc);
  ASSERT_EQ(p.size(), 6u);
  const std::vector<std::string> names{"1_text", "1_tagged", "2_text", "2_tagged", "paragraph_text", "paragraph_tagged"};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(p[i].name, names[i]);
    EXPECT_EQ(p[i].include_tags, i % 2 == 1);
  }
}

TEST(Phases, SimpleScenarios) {
  ScenarioConfig sc;
  sc.phase_steps = {7};
  sc.scenario = Scenario::one_stage;
  auto p = plan_phases(sc);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p[0].steps, 7);
  sc.scenario = Scenario::two_stage;
  p = plan_phases(sc);
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p[1].steps, sc.steps_per_phase);
  EXPECT_FALSE(p[0].include_tags);
  sc.scenario = Scenario::mixed_level;
  EXPECT_EQ(plan_phases(sc)[0].level, kMixed);
  sc.scenario = Scenario::two_stage_mixed;
  p = plan_phases(sc);
  EXPECT_EQ(p[0].name, "mixed_text");
  EXPECT_EQ(p[1].name, "mixed_tagged");
}

TEST(Phases, ScheduleValidation) {
  ScenarioConfig sc;
  sc.level_schedule = {2, 1, kParagraph};
  EXPECT_THROW(sc.validate(), ConfigError);
  sc.level_schedule = {kParagraph, 1};
  EXPECT_THROW(sc.validate(), ConfigError);
  sc.level_schedule = {};
  EXPECT_THROW(sc.validate(), ConfigError);
  sc.level_schedule = {1, 3};
  EXPECT_NO_THROW(sc.validate());
  EXPECT_THROW(parse_scenario("three_stage"), ConfigError);
  for (const auto& [s, name] : scenario_names()) EXPECT_EQ(parse_scenario(name), s);
}

TEST(Blocks, FourLineRecordGivesTenMixedBlocks) {
  const auto src = sources(1, 0, 4)[0];
  const auto blocks = blocks_for_level(src, kMixed);
  EXPECT_EQ(blocks.size(), 10u);
  std::map<int, int> by_k;
  for (const auto& [r, img] : blocks) ++by_k[r.line_count()];
  EXPECT_EQ(by_k, (std::map<int, int>{{1, 4}, {2, 3}, {3, 2}, {4, 1}}));
  EXPECT_EQ(blocks_for_level(src, 2).size(), 3u);
  EXPECT_EQ(blocks_for_level(src, 4).size(), 1u);
  EXPECT_EQ(blocks_for_level(src, 6).size(), 1u);
  EXPECT_EQ(blocks_for_level(src, kParagraph)[0].first, src.record);
}

TEST(Batches, EpochsArePermutations) {
  const int n = 13, b = 4;
  std::vector<int> stream;
  for (int step = 0; step < 13; ++step) {
    const auto idx = batch_indices(n, b, 9, 1, step);
    ASSERT_EQ(idx, batch_indices(n, b, 9, 1, step));
    stream.insert(stream.end(), idx.begin(), idx.end());
  }
  for (int e = 0; e < 4; ++e) {
    std::set<int> seen(stream.begin() + e * n, stream.begin() + (e + 1) * n);
    EXPECT_EQ(static_cast<int>(seen.size()), n) << "epoch " << e;
  }
  EXPECT_NE(batch_indices(n, b, 9, 1, 0), batch_indices(n, b, 9, 2, 0));
}

TEST(Batches, MixedLevelBatchesMixLineCounts) {
  const Vocab v = Vocab::from_grammar(TagScheme::joint, GrammarConfig{});
  const auto corpus = build_corpus(sources(6, 0), kMixed, v, 32, 64);
  int mixed = 0;
  for (int step = 0; step < 100; ++step) {
    std::set<int> ks;
    for (int i : batch_indices(static_cast<int>(corpus.size()), 8, 1, 0, step))
      ks.insert(corpus[static_cast<std::size_t>(i)].record.line_count());
    mixed += ks.size() >= 2 ? 1 : 0;
  }
  EXPECT_GE(mixed, 95);
}

TEST(Training, SmoothedLossDecreases) {
  const ModelConfig mc = train_model_config();
  const Vocab v = Vocab::from_grammar(TagScheme::joint, GrammarConfig{});
  auto data = sources(6, 20);
  TrainState st = fresh_state(mc, v, 1);
  train(st, short_run(Scenario::one_stage, 100), v, data);
  ASSERT_EQ(st.trace.size(), 100u);
  auto window = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 20; ++i) s += st.trace[i].loss;
    return s / 20;
  };
  EXPECT_LT(window(80), window(0));
  EXPECT_TRUE(st.finished);
}

TEST(Training, SameSeedSameTraceAndCheckpoint) {
  const ModelConfig mc = train_model_config();
  const Vocab v = Vocab::from_grammar(TagScheme::separate, GrammarConfig{});
  auto data = sources(5, 40);
  const ScenarioConfig sc = short_run(Scenario::two_stage, 6);
  TrainState a = fresh_state(mc, v, 2), b = fresh_state(mc, v, 2);
  train(a, sc, v, data);
  train(b, sc, v, data);
  ASSERT_EQ(a.trace.size(), 12u);
  for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(a.trace[i].loss, b.trace[i].loss);
  EXPECT_EQ(serialize_checkpoint(checkpoint_from_state(a, v, sc)), serialize_checkpoint(checkpoint_from_state(b, v, sc)));
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  const ModelConfig mc = train_model_config();
  const Vocab v = Vocab::from_grammar(TagScheme::joint, GrammarConfig{});
  auto data = sources(5, 60);
  ScenarioConfig sc = short_run(Scenario::two_stage, 5);
  TrainState full = fresh_state(mc, v, 3);
  train(full, sc, v, data);

  for (int stop : {3, 5, 7}) {
    TrainState part = fresh_state(mc, v, 3);
    train(part, sc, v, data, 1, stop);
    EXPECT_FALSE(part.finished);
    EXPECT_EQ(global_step(plan_phases(sc), part.cursor), stop);
    Checkpoint ck = parse_checkpoint(serialize_checkpoint(checkpoint_from_state(part, v, sc)), v.fingerprint());
    EXPECT_EQ(ck.cursor.phase, stop < 5 ? 0 : 1);
    TrainState resumed;
    resumed.model = std::move(ck.model);
    resumed.optimizer = std::move(ck.optimizer);
    resumed.cursor = ck.cursor;
    train(resumed, sc, v, data);
    ASSERT_EQ(part.trace.size() + resumed.trace.size(), full.trace.size());
    for (std::size_t i = 0; i < resumed.trace.size(); ++i) EXPECT_EQ(resumed.trace[i].loss, full.trace[part.trace.size() + i].loss);
    EXPECT_EQ(serialize_checkpoint(checkpoint_from_state(resumed, v, sc)), serialize_checkpoint(checkpoint_from_state(full, v, sc)))
        << "stop " << stop;
  }
}

TEST(Training, TextPhaseDecodesWithoutTags) {
  const ModelConfig mc = train_model_config();
  const Vocab v = Vocab::from_grammar(TagScheme::joint, GrammarConfig{});
  auto data = sources(6, 80);
  int text_phases = 0, tags = 0;
  TrainHooks hooks;
  hooks.phase_end = [&](int, const PhaseSpec& ph, HtrNerModel<float>& m, const std::vector<Example>& corpus) {
    if (ph.include_tags) return;
    ++text_phases;
    for (const auto& e : corpus)
      for (int t : m.predict(e.image).tokens) tags += v.is_tag(t) ? 1 : 0;
  };
  TrainState st = fresh_state(mc, v, 4);
  train(st, short_run(Scenario::two_stage, 60), v, data, 1, -1, hooks);
  EXPECT_EQ(text_phases, 1);
  EXPECT_EQ(tags, 0);
}

TEST(Training, EmptyDataIsAnError) {
  const ModelConfig mc = train_model_config();
  const Vocab v = Vocab::from_grammar(TagScheme::joint, GrammarConfig{});
  TrainState st = fresh_state(mc, v, 5);
  EXPECT_THROW(train(st, short_run(Scenario::one_stage, 2), v, {}), TrainingError);
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const ModelConfig mc = train_model_config();
    vocab = Vocab::from_grammar(TagScheme::joint, GrammarConfig{});
    data = sources(4, 100);
    sc = short_run(Scenario::one_stage, 3);
    state = fresh_state(mc, vocab, 6);
    train(state, sc, vocab, data);
    bytes = serialize_checkpoint(checkpoint_from_state(state, vocab, sc));
  }

  Vocab vocab;
  std::vector<SourceRecord> data;
  ScenarioConfig sc;
  TrainState state;
  std::string bytes;
};

TEST_F(CheckpointTest, SaveLoadSaveIsByteIdentical) {
  const auto dir = fresh_dir("ckpt");
  save_checkpoint(dir / "a.ckpt", checkpoint_from_state(state, vocab, sc));
  const Checkpoint back = load_checkpoint(dir / "a.ckpt", vocab.fingerprint());
  save_checkpoint(dir / "b.ckpt", back);
  EXPECT_EQ(slurp(dir / "a.ckpt"), bytes);
  EXPECT_EQ(slurp(dir / "b.ckpt"), bytes);
  EXPECT_TRUE(back.finished);
  EXPECT_EQ(back.optimizer.step_count(), 3);
  EXPECT_FALSE(std::filesystem::exists(dir / "a.ckpt.tmp"));
}

TEST_F(CheckpointTest, ProbeOutputsIdenticalToTheBit) {
  Checkpoint back = parse_checkpoint(bytes, vocab.fingerprint());
  const auto& mc = state.model.config();
  for (const auto& src : data) {
    const ImageTensor img = preprocess(src.image, mc.image_height, mc.image_width);
    const TokenSequence t = encode_target(src.record, vocab, true);
    const float a = probe_sum(state.model, img, t), b = probe_sum(back.model, img, t);
    EXPECT_EQ(std::memcmp(&a, &b, sizeof(float)), 0);
    const RowMat<float> ma = state.model.memory(img), mb = back.model.memory(img);
    EXPECT_EQ(std::memcmp(ma.data(), mb.data(), sizeof(float) * static_cast<std::size_t>(ma.size())), 0);
    EXPECT_EQ(state.model.predict(img), back.model.predict(img));
  }
}

TEST_F(CheckpointTest, TamperingIsRejected) {
  auto rejects = [&](const std::string& b) {
    try {
      parse_checkpoint(b);
    } catch (const CheckpointError&) {
      return true;
    }
    return false;
  };
  EXPECT_TRUE(rejects(bytes.substr(0, bytes.size() - 4)));
  EXPECT_TRUE(rejects(bytes + "xxxx"));
  EXPECT_TRUE(rejects(bytes.substr(0, 10)));
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_TRUE(rejects(bad));
  bad = bytes;
  bad[8] = 2;
  EXPECT_TRUE(rejects(bad));
  // Edit the recorded payload length inside the header.
  bad = bytes;
  const auto pos = bad.find("\"payload_bytes\":");
  ASSERT_NE(pos, std::string::npos);
  bad[pos + 16] = bad[pos + 16] == '1' ? '2' : '1';
  EXPECT_TRUE(rejects(bad));
  EXPECT_FALSE(rejects(bytes));
}

TEST_F(CheckpointTest, VocabularyFingerprintChecked) {
  const Vocab other = Vocab::from_grammar(TagScheme::separate, GrammarConfig{});
  EXPECT_THROW(parse_checkpoint(bytes, other.fingerprint()), CheckpointError);
  EXPECT_NO_THROW(parse_checkpoint(bytes, vocab.fingerprint()));
  EXPECT_THROW(load_checkpoint("/nonexistent/model.ckpt"), CheckpointError);
}
