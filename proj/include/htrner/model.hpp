#pragma once

// Full image-to-sequence model: backbone -> channel compression -> positional
// encoding -> flatten -> encoder -> decoder -> class logits.

#include "htrner/backbone.hpp"
#include "htrner/posenc.hpp"
#include "htrner/transformer.hpp"
#include "htrner/vocab.hpp"

#include <map>
#include <string>
#include <vector>

namespace htrner {

// One training example: preprocessed image plus full target sequence.
struct Sample {
  const ImageTensor* image = nullptr;
  const TokenSequence* target = nullptr;
};

// Teacher-forcing layout of a batch: decoder input is target[0..n-2], expected
// output target[1..n-1], right-padded with <pad> to the longest sequence.
struct TeacherBatch {
  int batch = 0;
  int t_len = 0;
  std::vector<int> inputs;
  std::vector<int> outputs;
};

inline TeacherBatch make_teacher_batch(const std::vector<const TokenSequence*>& targets, int pad) {
  TeacherBatch tb;
  tb.batch = static_cast<int>(targets.size());
  for (const auto* t : targets) {
    if (t->tokens.size() < 2) throw ShapeError("target sequence needs at least <sop> and <eop>");
    tb.t_len = std::max(tb.t_len, static_cast<int>(t->tokens.size()) - 1);
  }
  tb.inputs.assign(static_cast<std::size_t>(tb.batch) * tb.t_len, pad);
  tb.outputs.assign(tb.inputs.size(), pad);
  for (int b = 0; b < tb.batch; ++b) {
    const auto& tok = targets[static_cast<std::size_t>(b)]->tokens;
    for (std::size_t t = 0; t + 1 < tok.size(); ++t) {
      tb.inputs[static_cast<std::size_t>(b) * tb.t_len + t] = tok[t];
      tb.outputs[static_cast<std::size_t>(b) * tb.t_len + t] = tok[t + 1];
    }
  }
  return tb;
}

template <class T>
class HtrNerModel {
 public:
  HtrNerModel() = default;
  HtrNerModel(const ModelConfig& cfg, int classes, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0x6d6f64656cULL));
    backbone_ = Backbone<T>(cfg.backbone, rng);
    compress_ = ChannelCompressor<T>(backbone_.output_channels(), cfg.hidden, rng);
    a2dpe_ = A2dpeParams<T>(cfg.hidden, rng);
    encoder_ = TransformerEncoder<T>(cfg, rng);
    decoder_ = TransformerDecoder<T>(cfg, classes, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& config() { return cfg_; }
  int classes() const { return decoder_.classes(); }

  // Parameters in a fixed order; A2DPE weights are only present in a2dpe mode.
  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    backbone_.collect(out);
    compress_.collect(out);
    if (cfg_.positional_encoding == PositionalEncoding::a2dpe) a2dpe_.collect(out);
    encoder_.collect(out);
    decoder_.collect(out);
    return out;
  }

  // Parameter group of a name, used by gradient-flow checks.
  static std::string group_of(const std::string& name) {
    const auto dot = name.find('.');
    const std::string head = name.substr(0, dot);
    if (head == "decoder") {
      if (name.rfind("decoder.embedding", 0) == 0) return "embedding";
      if (name.rfind("decoder.projection", 0) == 0) return "projection";
    }
    return head;
  }

  // images: [N, H, W, 3] -> memory [N * S, D]; seq_len receives S.
  Var encode(Tape<T>& tp, Var images, int& seq_len, const ForwardContext& ctx = {}) {
    Var f = compress_(tp, backbone_(tp, images));
    const auto s = tp.shape(f);
    const int n = s[0], h = s[1], w = s[2], d = s[3];
    seq_len = h * w;
    if (cfg_.positional_encoding == PositionalEncoding::a2dpe) {
      f = a2dpe(tp, f, a2dpe_, cfg_.faults.flip_position_sign ? T(-1) : T(1));
      f = ops::reshape(tp, f, {n * seq_len, d});
    } else {
      f = ops::reshape(tp, f, {n * seq_len, d});
      const auto tab = sinusoid_table<T>(seq_len, d);
      Tensor<T> tiled({n * seq_len, d});
      for (int b = 0; b < n; ++b) std::copy(tab.data.begin(), tab.data.end(), tiled.data.begin() + static_cast<std::ptrdiff_t>(b) * tab.size());
      f = ops::add_const(tp, f, tiled);
    }
    f = maybe_dropout(tp, f, ctx);
    return encoder_(tp, f, n, seq_len, ctx);
  }

  // Teacher-forced logits [N * t_len, classes].
  Var logits(Tape<T>& tp, Var images, const TeacherBatch& tb, const ForwardContext& ctx = {}) {
    int seq_len = 0;
    Var memory = encode(tp, images, seq_len, ctx);
    return decoder_(tp, memory, tb.batch, seq_len, tb.inputs, tb.t_len, ctx);
  }

  // Mean next-token cross-entropy over non-pad positions.
  Var loss(Tape<T>& tp, const std::vector<Sample>& batch, int pad, const ForwardContext& ctx = {}) {
    std::vector<const ImageTensor*> imgs;
    std::vector<const TokenSequence*> targets;
    for (const auto& s : batch) {
      imgs.push_back(s.image);
      targets.push_back(s.target);
    }
    const TeacherBatch tb = make_teacher_batch(targets, pad);
    Var images = tp.constant(to_batch<T>(imgs));
    return ops::cross_entropy(tp, logits(tp, images, tb, ctx), tb.outputs, pad);
  }

  // Encoder memory of a single image, no gradient.
  RowMat<T> memory(const ImageTensor& img) {
    Tape<T> tp(false);
    int seq_len = 0;
    Var m = encode(tp, tp.constant(to_batch<T>({&img})), seq_len);
    return as_mat(tp.value(m));
  }

  // Greedy argmax decoding with lowest-index tie breaking. Stops at <eop> or
  // max_decode_len tokens; a truncated sequence gets a closing <eop>.
  TokenSequence greedy_decode(const RowMat<T>& memory, int sop, int eop) const {
    TokenSequence seq;
    seq.tokens.push_back(sop);
    DecoderCache<T> cache = decoder_.start(memory);
    while (true) {
      if (static_cast<int>(seq.tokens.size()) >= cfg_.max_decode_len) {
        seq.tokens.push_back(eop);
        seq.truncated = true;
        break;
      }
      const auto row = decoder_.step(cache, seq.tokens.back());
      int best = 0;
      for (int c = 1; c < row.size(); ++c)
        if (row[c] > row[best]) best = c;
      seq.tokens.push_back(best);
      if (best == eop) break;
    }
    return seq;
  }

  TokenSequence greedy_decode(const RowMat<T>& memory, const Vocab&) const {
    return greedy_decode(memory, Vocab::kSop, Vocab::kEop);
  }

  TokenSequence predict(const ImageTensor& img) { return greedy_decode(memory(img), Vocab::kSop, Vocab::kEop); }

  Backbone<T>& backbone() { return backbone_; }
  ChannelCompressor<T>& compressor() { return compress_; }
  A2dpeParams<T>& position() { return a2dpe_; }
  TransformerEncoder<T>& encoder() { return encoder_; }
  TransformerDecoder<T>& decoder() { return decoder_; }

 private:
  ModelConfig cfg_;
  Backbone<T> backbone_;
  ChannelCompressor<T> compress_;
  A2dpeParams<T> a2dpe_;
  TransformerEncoder<T> encoder_;
  TransformerDecoder<T> decoder_;
};

}  // namespace htrner
