#pragma once

// Fast invariant suite behind `htrner selftest`. Faults can be injected to
// confirm that the relevant checks actually detect defects.

#include "htrner/checkpoint.hpp"
#include "htrner/gradcheck.hpp"
#include "htrner/metrics.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace htrner {

struct SelftestResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.hidden = 8;
  c.heads = 2;
  c.layers = 1;
  c.dropout = 0.0;
  c.max_decode_len = 64;
  c.image_height = 32;
  c.image_width = 64;
  c.backbone.stem_channels = 4;
  c.backbone.stage_channels = {4, 4, 8, 8};
  c.backbone.norm_groups = 2;
  return c;
}

namespace selftest_detail {

inline SelftestResult sinusoid_oracle() {
  const int len = 64, d = 256;
  const auto t = sinusoid_table<double>(len, d);
  double worst = 0;
  for (int p = 0; p < len; ++p)
    for (int k = 0; k < d; ++k) {
      const double ph = p / std::pow(10000.0, (k - k % 2) / static_cast<double>(d));
      worst = std::max(worst, std::abs(t[static_cast<std::size_t>(p) * d + k] - (k % 2 ? std::cos(ph) : std::sin(ph))));
    }
  return {"sinusoid_table_oracle", worst <= 1e-12, "max abs error " + std::to_string(worst)};
}

inline SelftestResult a2dpe_identity(const FaultInjection& faults) {
  const int h = 3, w = 5, d = 8;
  Rng rng(11);
  A2dpeParams<double> p(d, rng);
  p.w2_h.value.fill(0.0);
  p.w2_w.value.fill(0.0);
  Tensor<double> e({1, h, w, d});
  for (auto& x : e.data) x = rng.normal();
  Tape<double> tp(false);
  const auto& out = tp.value(a2dpe(tp, tp.constant(e), p, faults.flip_position_sign ? -1.0 : 1.0));
  const auto ph = sinusoid_table<double>(h, d), pw = sinusoid_table<double>(w, d);
  double worst = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < d; ++k) {
        const std::size_t i = (static_cast<std::size_t>(y) * w + x) * d + k;
        const double want = e[i] + 0.5 * (ph[static_cast<std::size_t>(y) * d + k] + pw[static_cast<std::size_t>(x) * d + k]);
        worst = std::max(worst, std::abs(out[i] - want));
      }
  return {"a2dpe_zero_w2_identity", worst == 0.0, "max abs deviation " + std::to_string(worst)};
}

inline SelftestResult causality(const FaultInjection& faults) {
  ModelConfig c = tiny_model_config();
  c.faults = faults;
  Rng rng(5);
  const int classes = 12, mem_len = 6, t_len = 7;
  TransformerDecoder<double> dec(c, classes, rng);
  Tensor<double> mem({mem_len, c.hidden});
  for (auto& x : mem.data) x = rng.normal();
  std::vector<int> tokens(t_len);
  for (auto& t : tokens) t = static_cast<int>(rng.uniform_int(0, classes - 1));
  auto run = [&](const std::vector<int>& toks) {
    Tape<double> tp(false);
    return tp.value(dec(tp, tp.constant(mem), 1, mem_len, toks, t_len));
  };
  const auto base = run(tokens);
  int violations = 0;
  for (int t = 1; t < t_len; ++t) {
    auto changed = tokens;
    changed[static_cast<std::size_t>(t)] = (changed[static_cast<std::size_t>(t)] + 1) % classes;
    const auto out = run(changed);
    for (std::size_t i = 0; i < static_cast<std::size_t>(t) * classes; ++i)
      if (out[i] != base[i]) {
        ++violations;
        break;
      }
  }
  return {"decoder_causality", violations == 0, std::to_string(violations) + " positions saw a later token"};
}

inline SelftestResult vocab_round_trip() {
  const GrammarConfig g;
  int failures = 0;
  for (TagScheme s : {TagScheme::joint, TagScheme::separate}) {
    const Vocab v = Vocab::from_grammar(s, g);
    for (int i = 0; i < 100; ++i) {
      const Record r = generate_record(static_cast<std::uint64_t>(i), g);
      const auto d = decode_target(encode_target(r, v, true), v, r.id);
      if (!(d.record == r) || d.diagnostics.total() != 0) ++failures;
    }
  }
  return {"vocab_round_trip", failures == 0, std::to_string(failures) + " mismatches over 200 records"};
}

inline std::vector<Sample> tiny_batch(const ModelConfig& c, const Vocab& v, std::vector<ImageTensor>& imgs, std::vector<TokenSequence>& seqs,
                                      int n) {
  const GrammarConfig g;
  RenderConfig rc;
  imgs.clear();
  seqs.clear();
  for (int i = 0; i < n; ++i) {
    Record r = generate_record(static_cast<std::uint64_t>(100 + i), g);
    r.lines.resize(1);
    r.lines[0].resize(std::min<std::size_t>(r.lines[0].size(), 2));
    imgs.push_back(preprocess(render_record(r, static_cast<std::uint64_t>(i), rc), c.image_height, c.image_width));
    seqs.push_back(encode_target(r, v, true));
  }
  std::vector<Sample> b;
  for (int i = 0; i < n; ++i) b.push_back({&imgs[static_cast<std::size_t>(i)], &seqs[static_cast<std::size_t>(i)]});
  return b;
}

inline SelftestResult gradient_check() {
  const ModelConfig c = tiny_model_config();
  const Vocab v = Vocab::from_grammar(TagScheme::joint, GrammarConfig{});
  HtrNerModel<double> m(c, v.size(), 3);
  std::vector<ImageTensor> imgs;
  std::vector<TokenSequence> seqs;
  const auto batch = tiny_batch(c, v, imgs, seqs, 2);
  Rng rng(9);
  std::vector<Parameter<double>*> pick;
  for (auto* p : m.parameters())
    if (p->name == "backbone.stem.w" || p->name == "compress.w" || p->name == "a2dpe.w1_h" || p->name == "encoder.0.attn.q.w" ||
        p->name == "decoder.embedding" || p->name == "decoder.projection.w")
      pick.push_back(p);
  const auto entries = finite_difference_check(pick, model_loss_fn(m, batch), rng, 3);
  double worst = 0;
  for (const auto& e : entries) worst = std::max(worst, e.rel_error);
  const bool ok = !entries.empty() && worst <= 1e-4;
  return {"gradient_check_tiny", ok, std::to_string(entries.size()) + " entries, worst relative error " + std::to_string(worst)};
}

inline SelftestResult kv_cache() {
  const ModelConfig c = tiny_model_config();
  Rng rng(21);
  const int classes = 10, mem_len = 5, t_len = 9;
  TransformerDecoder<double> dec(c, classes, rng);
  Tensor<double> mem({mem_len, c.hidden});
  for (auto& x : mem.data) x = rng.normal();
  std::vector<int> tokens(t_len);
  for (auto& t : tokens) t = static_cast<int>(rng.uniform_int(0, classes - 1));
  Tape<double> tp(false);
  const auto full = tp.value(dec(tp, tp.constant(mem), 1, mem_len, tokens, t_len));
  auto cache = dec.start(as_mat(mem));
  double worst = 0;
  for (int t = 0; t < t_len; ++t) {
    const auto row = dec.step(cache, tokens[static_cast<std::size_t>(t)]);
    for (int k = 0; k < classes; ++k) worst = std::max(worst, std::abs(row[k] - full[static_cast<std::size_t>(t) * classes + k]));
  }
  return {"kv_cache_matches_teacher_forcing", worst <= 1e-10, "max abs difference " + std::to_string(worst)};
}

inline SelftestResult metric_oracle() {
  Rng rng(3);
  const std::vector<std::string> cats{"name", "surname", "location"}, persons{"husband", "wife"};
  const std::vector<std::string> words{"maria", "marla", "joan", "pere", "puig", "vic"};
  int mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    auto rand_list = [&](int n) {
      std::vector<EntityTriple> l;
      for (int i = 0; i < n; ++i)
        l.push_back({words[rng.uniform_int(0, 5)], cats[rng.uniform_int(0, 2)], persons[rng.uniform_int(0, 1)]});
      return l;
    };
    const auto gt = rand_list(static_cast<int>(rng.uniform_int(0, 6)));
    const auto pred = rand_list(static_cast<int>(rng.uniform_int(0, 6)));
    for (ScoreLevel lv : {ScoreLevel::basic, ScoreLevel::complete})
      if (std::abs(align_entities(pred, gt, lv).total - align_entities_brute_force(pred, gt, lv)) > 1e-9) ++mismatches;
  }
  return {"metric_alignment_oracle", mismatches == 0, std::to_string(mismatches) + " DP/brute-force disagreements"};
}

inline SelftestResult cer_examples() {
  const bool ok = cer("abc", "abc") == 0.0 && cer("marla", "maria") == 0.2 && cer("", "ab") == 1.0;
  return {"cer_examples", ok, ok ? "0, 0.2, 1.0" : "unexpected value"};
}

inline SelftestResult checkpoint_round_trip() {
  const ModelConfig c = tiny_model_config();
  Checkpoint ck;
  ck.vocab = Vocab::from_grammar(TagScheme::separate, GrammarConfig{});
  ck.model = HtrNerModel<float>(c, ck.vocab.size(), 4);
  const std::string a = serialize_checkpoint(ck);
  const Checkpoint back = parse_checkpoint(a, ck.vocab.fingerprint());
  const bool same = serialize_checkpoint(back) == a;
  std::string tampered = a.substr(0, a.size() - 4);
  bool rejected = false;
  try {
    parse_checkpoint(tampered);
  } catch (const CheckpointError&) {
    rejected = true;
  }
  return {"checkpoint_round_trip", same && rejected, std::string(same ? "identical bytes" : "bytes differ") + (rejected ? ", truncation rejected" : ", truncation accepted")};
}

}  // namespace selftest_detail

inline std::vector<SelftestResult> run_selftest(const FaultInjection& faults = {}) {
  using namespace selftest_detail;
  const std::vector<std::function<SelftestResult()>> checks{
      sinusoid_oracle,
      [&] { return a2dpe_identity(faults); },
      [&] { return causality(faults); },
      vocab_round_trip,
      gradient_check,
      kv_cache,
      metric_oracle,
      cer_examples,
      checkpoint_round_trip,
  };
  std::vector<SelftestResult> out;
  for (const auto& f : checks) {
    const auto t0 = std::chrono::steady_clock::now();
    SelftestResult r;
    try {
      r = f();
    } catch (const std::exception& e) {
      r.name = r.name.empty() ? "check" : r.name;
      r.passed = false;
      r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace htrner
