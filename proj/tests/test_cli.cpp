#include "test_support.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

using namespace htrner;
using namespace htrner::testing;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(HTRNER_CLI) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

nlohmann::json small_config() {
  return nlohmann::json::parse(R"({
    "dataset": {"num_records": 12, "seed": 5, "split": {"train": 0.5, "valid": 0.25, "test": 0.25}},
    "vocab": {"scheme": "joint"},
    "model": {"hidden": 16, "heads": 2, "layers": 1, "dropout": 0.0, "max_decode_len": 300,
              "image_height": 64, "image_width": 128,
              "backbone": {"kind": "toy", "stem_channels": 4, "stage_channels": [4, 4, 8, 8], "norm_groups": 2}},
    "training": {"scenario": "two_stage", "steps_per_phase": 4, "batch_size": 3, "warmup_steps": 2, "seed": 7}
  })");
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j) {
  const auto p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

}  // namespace

TEST(Config, UnknownKeysRejected) {
  auto j = small_config();
  j["model"]["hiden"] = 8;
  EXPECT_THROW(run_config_from_json(j), ConfigError);
  j = small_config();
  j["trainin"] = nlohmann::json::object();
  EXPECT_THROW(run_config_from_json(j), ConfigError);
  EXPECT_NO_THROW(run_config_from_json(small_config()).validate());
}

TEST(Config, JsonRoundTrip) {
  const RunConfig c = run_config_from_json(small_config());
  EXPECT_EQ(to_json(run_config_from_json(to_json(c))), to_json(c));
  EXPECT_EQ(c.model.hidden, 16);
  EXPECT_EQ(c.training.scenario, Scenario::two_stage);
}

TEST(Config, InvalidValuesRejected) {
  auto j = small_config();
  j["model"]["heads"] = 3;
  EXPECT_THROW(run_config_from_json(j).validate(), ConfigError);
  j = small_config();
  j["model"]["image_width"] = 100;
  EXPECT_THROW(run_config_from_json(j).validate(), ConfigError);
  j = small_config();
  j["training"]["level_schedule"] = {"paragraph", 1};
  EXPECT_THROW(run_config_from_json(j).validate(), ConfigError);
  j = small_config();
  j["training"]["scenario"] = "three_stage";
  EXPECT_THROW(run_config_from_json(j), ConfigError);
}

TEST(Cli, ConfigErrorsExitOne) {
  const auto dir = fresh_dir("cli_cfg");
  auto j = small_config();
  j["model"]["bogus"] = 1;
  EXPECT_EQ(run("synth --config " + write_config(dir, j).string() + " --out " + (dir / "d").string()), 1);
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_EQ(run("synth --config " + (dir / "broken.json").string() + " --out " + (dir / "d").string()), 1);
  EXPECT_EQ(run("train --out " + (dir / "t").string() + " --scenario nope --manifest x"), 1);
  EXPECT_EQ(run("no_such_command"), 1);
}

TEST(Cli, MissingFilesExitOne) {
  const auto dir = fresh_dir("cli_missing");
  EXPECT_EQ(run("eval --ckpt " + (dir / "none.ckpt").string() + " --manifest " + (dir / "none.jsonl").string()), 1);
  EXPECT_EQ(run("score --pred " + (dir / "p.jsonl").string() + " --ref " + (dir / "m.jsonl").string()), 1);
  EXPECT_EQ(run("train --out " + (dir / "t").string() + " --manifest " + (dir / "m.jsonl").string()), 1);
}

TEST(Cli, SelftestPassesAndDetectsFaults) {
  EXPECT_EQ(run("selftest"), 0);
  EXPECT_EQ(run("selftest --inject-fault position_sign"), 2);
  EXPECT_EQ(run("selftest --inject-fault causal_mask"), 2);
}

TEST(Cli, SynthTrainEvalPredictScore) {
  const auto dir = fresh_dir("cli_flow");
  const auto cfg = write_config(dir, small_config()).string();
  const auto data = dir / "data", run_dir = dir / "run";
  ASSERT_EQ(run("synth --config " + cfg + " --out " + data.string()), 0);
  const auto manifest = (data / "manifest.jsonl").string();
  ASSERT_TRUE(fs::exists(manifest));
  ASSERT_EQ(run("train --config " + cfg + " --manifest " + manifest + " --out " + run_dir.string()), 0);
  for (const char* f : {"model.ckpt", "loss.csv", "phases.jsonl", "vocab.json", "config.json"}) EXPECT_TRUE(fs::exists(run_dir / f)) << f;
  const auto loss = read_lines(run_dir / "loss.csv");
  ASSERT_EQ(loss.size(), 9u);
  EXPECT_EQ(loss[0], "step,phase,loss");
  EXPECT_EQ(read_lines(run_dir / "phases.jsonl").size(), 2u);

  const auto ckpt = (run_dir / "model.ckpt").string();
  ASSERT_EQ(run("eval --ckpt " + ckpt + " --manifest " + manifest + " --split test --out " + (dir / "report.json").string() + " --pred " +
                (dir / "eval_pred.jsonl").string()),
            0);
  const auto report = nlohmann::json::parse(slurp(dir / "report.json"));
  EXPECT_EQ(report["records"].size(), 3u);
  ASSERT_EQ(run("predict --ckpt " + ckpt + " --manifest " + manifest + " --split test --out " + (dir / "p1.jsonl").string()), 0);
  ASSERT_EQ(run("predict --ckpt " + ckpt + " --manifest " + manifest + " --split test --out " + (dir / "p2.jsonl").string()), 0);
  EXPECT_EQ(slurp(dir / "p1.jsonl"), slurp(dir / "p2.jsonl"));
  EXPECT_EQ(slurp(dir / "p1.jsonl"), slurp(dir / "eval_pred.jsonl"));
  ASSERT_EQ(run("score --pred " + (dir / "p1.jsonl").string() + " --ref " + manifest + " --split test --out " + (dir / "score.json").string()),
            0);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "score.json")), report);

  // A single image goes through the same decoder.
  const auto rows = read_manifest(manifest);
  EXPECT_EQ(run("predict --ckpt " + ckpt + " --image " + (data / rows.rows[0].image).string()), 0);
  EXPECT_EQ(run("predict --ckpt " + ckpt), 1);
}

TEST(Pipeline, ResumedRunMatchesUninterruptedRun) {
  const auto dir = fresh_dir("pipe_resume");
  RunConfig cfg = run_config_from_json(small_config());
  cfg.dataset.num_records = 8;
  const auto m = build_dataset(cfg.dataset, dir / "data");
  cfg.manifest = m.path.string();
  run_training(cfg, dir / "full");
  run_training(cfg, dir / "split", 1, false, 3);
  EXPECT_EQ(read_lines(dir / "split" / "loss.csv").size(), 4u);
  run_training(cfg, dir / "split", 1, true);
  for (const char* f : {"model.ckpt", "loss.csv", "phases.jsonl"}) EXPECT_EQ(slurp(dir / "full" / f), slurp(dir / "split" / f)) << f;
  // Resuming a finished run changes nothing.
  run_training(cfg, dir / "split", 1, true);
  EXPECT_EQ(slurp(dir / "full" / "model.ckpt"), slurp(dir / "split" / "model.ckpt"));
  cfg.training.scenario = Scenario::one_stage;
  EXPECT_THROW(run_training(cfg, dir / "split", 1, true), ConfigError);
}
