// htrner: synth | train | eval | predict | score | selftest
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include "htrner/pipeline.hpp"
#include "htrner/selftest.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace htrner;

namespace {

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

RunConfig config_or_default(const std::string& path) {
  if (path.empty()) return RunConfig{};
  return load_run_config(path);
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ValidationError(what + " is required");
  if (!fs::is_regular_file(path)) throw ValidationError(what + " '" + path + "' does not exist");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

void print_summary(const ScoreReport& r) {
  std::cout << "records " << r.records.size() << "  scorable " << r.scorable << "  basic " << r.mean_basic << "  complete "
            << r.mean_complete << "  cer " << r.corpus_cer << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint handwritten text recognition and entity tagging on synthetic records"};
  app.require_subcommand(1);

  std::string config_path, out, manifest, split = "test", ckpt, pred, ref, scenario, image, fault;
  std::optional<std::uint64_t> seed;
  int threads = 1, stop_after = -1;
  bool resume = false;

  auto add_common = [&](CLI::App* c) {
    c->add_option("--seed", seed, "Random seed (overrides the config)");
    c->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--config", config_path, "JSON config file");
  synth->add_option("--out", out, "Output directory")->required();
  add_common(synth);

  auto* train_cmd = app.add_subcommand("train", "Train a scenario");
  train_cmd->add_option("--config", config_path, "JSON config file");
  train_cmd->add_option("--scenario", scenario, "one_stage|two_stage|mixed_level|two_stage_mixed|curriculum_sequential|curriculum_dual");
  train_cmd->add_option("--out", out, "Output directory")->required();
  train_cmd->add_option("--manifest", manifest, "Dataset manifest (overrides data.manifest)");
  train_cmd->add_flag("--resume", resume, "Continue from OUT/model.ckpt");
  train_cmd->add_option("--stop-after", stop_after, "Stop once this many total steps are done");
  add_common(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Decode and score a manifest split");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--manifest", manifest, "Dataset manifest")->required();
  eval_cmd->add_option("--split", split, "train|valid|test|all");
  eval_cmd->add_option("--out", out, "report.json path");
  eval_cmd->add_option("--pred", pred, "Also write predictions JSONL here");
  add_common(eval_cmd);

  auto* predict_cmd = app.add_subcommand("predict", "Decode images to predictions JSONL");
  predict_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required();
  predict_cmd->add_option("--manifest", manifest, "Dataset manifest");
  predict_cmd->add_option("--image", image, "Single PNG image");
  predict_cmd->add_option("--split", split, "train|valid|test|all");
  predict_cmd->add_option("--out", out, "Output JSONL (stdout when omitted)");
  add_common(predict_cmd);

  auto* score_cmd = app.add_subcommand("score", "Score predictions JSONL against a manifest");
  score_cmd->add_option("--pred", pred, "Predictions JSONL")->required();
  score_cmd->add_option("--ref", ref, "Reference manifest")->required();
  score_cmd->add_option("--split", split, "train|valid|test|all (default all)");
  score_cmd->add_option("--out", out, "report.json path");
  add_common(score_cmd);

  auto* selftest_cmd = app.add_subcommand("selftest", "Run the fast invariant suite");
  selftest_cmd->add_option("--inject-fault", fault, "position_sign|causal_mask (test fixture)")
      ->check(CLI::IsMember({"position_sign", "causal_mask"}));
  add_common(selftest_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  if (score_cmd->parsed() && score_cmd->count("--split") == 0) split = "all";

  try {
    if (synth->parsed()) {
      RunConfig cfg = config_or_default(config_path);
      if (seed) cfg.dataset.seed = *seed;
      cfg.dataset.threads = threads;
      cfg.validate();
      const auto m = build_dataset(cfg.dataset, out);
      std::cout << "wrote " << m.rows.size() << " records to " << m.path.string() << "\n";
      return 0;
    }

    if (train_cmd->parsed()) {
      RunConfig cfg = config_or_default(config_path);
      if (!scenario.empty()) cfg.training.scenario = parse_scenario(scenario);
      if (seed) cfg.training.seed = *seed;
      if (!manifest.empty()) cfg.manifest = manifest;
      cfg.validate();
      require_file(cfg.manifest, "manifest");
      if (resume) require_file((fs::path(out) / "model.ckpt").string(), "checkpoint to resume");
      TrainHooks hooks;
      hooks.step_end = [](int step, double loss) {
        if (step % 50 == 0) std::cerr << "step " << step << " loss " << loss << "\n";
      };
      const auto st = run_training(cfg, out, threads, resume, stop_after, hooks);
      std::cout << (st.finished ? "finished" : "stopped") << " at phase " << st.cursor.phase << " step " << st.cursor.step << "; checkpoint "
                << (fs::path(out) / "model.ckpt").string() << "\n";
      return 0;
    }

    if (eval_cmd->parsed()) {
      require_file(ckpt, "checkpoint");
      require_file(manifest, "manifest");
      const Checkpoint ck = load_checkpoint(ckpt);
      const DatasetManifest m = read_manifest(manifest);
      const Evaluation ev = evaluate(ck, m, split, threads);
      const std::string report = ev.report.to_json().dump(2) + "\n";
      if (!out.empty()) write_text(out, report);
      if (!pred.empty()) {
        std::string lines;
        for (const auto& p : ev.predictions) lines += prediction_line(p, ck.vocab) + "\n";
        write_text(pred, lines);
      }
      print_summary(ev.report);
      return 0;
    }

    if (predict_cmd->parsed()) {
      require_file(ckpt, "checkpoint");
      if (manifest.empty() == image.empty()) throw ValidationError("give exactly one of --manifest or --image");
      if (!manifest.empty()) require_file(manifest, "manifest");
      if (!image.empty()) require_file(image, "image");
      const Checkpoint ck = load_checkpoint(ckpt);
      std::vector<Prediction> preds;
      if (!image.empty()) {
        const auto& mc = ck.model.config();
        HtrNerModel<float> net = ck.model;
        Prediction p;
        p.id = fs::path(image).stem().string();
        p.image = image;
        p.tokens = net.predict(preprocess(read_png(image), mc.image_height, mc.image_width));
        p.decoded = decode_target(p.tokens, ck.vocab, p.id);
        preds.push_back(std::move(p));
      } else {
        const DatasetManifest m = read_manifest(manifest);
        std::vector<const ManifestRow*> rows;
        for (const auto& r : m.rows)
          if (split == "all" || r.split == split) rows.push_back(&r);
        preds = predict_rows(ck.model, ck.vocab, m, rows, threads);
      }
      std::string lines;
      for (const auto& p : preds) lines += prediction_line(p, ck.vocab) + "\n";
      if (out.empty()) std::cout << lines;
      else write_text(out, lines);
      return 0;
    }

    if (score_cmd->parsed()) {
      require_file(pred, "predictions");
      require_file(ref, "reference manifest");
      const ScoreReport rep = score_files(pred, read_manifest(ref), split);
      if (!out.empty()) write_text(out, rep.to_json().dump(2) + "\n");
      print_summary(rep);
      return 0;
    }

    if (selftest_cmd->parsed()) {
      FaultInjection f;
      f.flip_position_sign = fault == "position_sign";
      f.causal_off_by_one = fault == "causal_mask";
      bool all = true;
      for (const auto& r : run_selftest(f)) {
        std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << "  (" << r.detail << ", " << r.seconds << " s)\n";
        all = all && r.passed;
      }
      return all ? 0 : 2;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
