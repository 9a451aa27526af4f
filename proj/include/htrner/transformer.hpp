#pragma once

// Pre-norm transformer encoder/decoder. The training path records on a Tape;
// the decoder also has an incremental inference path with key/value caches
// that reproduces the teacher-forced logits row by row.

#include "htrner/model_config.hpp"
#include "htrner/ops.hpp"
#include "htrner/posenc.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace htrner {

template <class T>
struct LinearLayer {
  Parameter<T> weight, bias;

  LinearLayer() = default;
  LinearLayer(const std::string& name, int in, int out, Rng& rng) : weight(name + ".w", {in, out}), bias(name + ".b", {out}) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& x : weight.value.data) x = static_cast<T>(rng.uniform(-bound, bound));
  }
  Var operator()(Tape<T>& tp, Var x) { return ops::linear(tp, x, tp.param(weight), tp.param(bias)); }
  // Inference form on row-major rows.
  RowMat<T> apply(const RowMat<T>& x) const {
    RowMat<T> y = x * as_mat(weight.value);
    y.rowwise() += as_mat(bias.value, 1, bias.value.dim(0)).row(0);
    return y;
  }
  void collect(std::vector<Parameter<T>*>& out) { out.insert(out.end(), {&weight, &bias}); }
};

template <class T>
struct LayerNormLayer {
  Parameter<T> gamma, beta;

  LayerNormLayer() = default;
  LayerNormLayer(const std::string& name, int d) : gamma(name + ".gamma", {d}), beta(name + ".beta", {d}) { gamma.value.fill(T(1)); }
  Var operator()(Tape<T>& tp, Var x) { return ops::layer_norm(tp, x, tp.param(gamma), tp.param(beta)); }
  RowMat<T> apply(const RowMat<T>& x) const {
    RowMat<T> y(x.rows(), x.cols());
    const int d = static_cast<int>(x.cols());
    for (int r = 0; r < x.rows(); ++r) {
      T mean = 0;
      for (int k = 0; k < d; ++k) mean += x(r, k);
      mean /= d;
      T var = 0;
      for (int k = 0; k < d; ++k) var += (x(r, k) - mean) * (x(r, k) - mean);
      var /= d;
      const T rstd = T(1) / std::sqrt(var + T(1e-5));
      for (int k = 0; k < d; ++k) y(r, k) = (x(r, k) - mean) * rstd * gamma.value[k] + beta.value[k];
    }
    return y;
  }
  void collect(std::vector<Parameter<T>*>& out) { out.insert(out.end(), {&gamma, &beta}); }
};

template <class T>
T attention_scale(const ModelConfig& cfg) {
  if (cfg.attention_scale == AttentionScale::hidden) return T(1) / static_cast<T>(cfg.hidden);
  return T(1) / std::sqrt(static_cast<T>(cfg.hidden / cfg.heads));
}

template <class T>
struct MultiHeadAttention {
  LinearLayer<T> q, k, v, o;

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, int d, Rng& rng)
      : q(name + ".q", d, d, rng), k(name + ".k", d, d, rng), v(name + ".v", d, d, rng), o(name + ".o", d, d, rng) {}

  Var operator()(Tape<T>& tp, Var xq, Var xkv, const ops::AttentionShape& s, T scale, std::vector<T>* probs = nullptr) {
    Var a = ops::attention(tp, q(tp, xq), k(tp, xkv), v(tp, xkv), s, scale, probs);
    return o(tp, a);
  }
  void collect(std::vector<Parameter<T>*>& out) {
    for (auto* l : {&q, &k, &v, &o}) l->collect(out);
  }
};

template <class T>
struct FeedForward {
  LinearLayer<T> up, down;

  FeedForward() = default;
  FeedForward(const std::string& name, int d, int f, Rng& rng) : up(name + ".up", d, f, rng), down(name + ".down", f, d, rng) {}
  Var operator()(Tape<T>& tp, Var x) { return down(tp, ops::relu(tp, up(tp, x))); }
  RowMat<T> apply(const RowMat<T>& x) const { return down.apply(up.apply(x).cwiseMax(T(0))); }
  void collect(std::vector<Parameter<T>*>& out) {
    up.collect(out);
    down.collect(out);
  }
};

// Training-time context shared by the layers of one forward pass.
struct ForwardContext {
  bool train = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
};

template <class T>
Var maybe_dropout(Tape<T>& tp, Var x, const ForwardContext& ctx) {
  if (!ctx.train || ctx.dropout <= 0.0 || !ctx.rng) return x;
  return ops::dropout(tp, x, ctx.dropout, *ctx.rng);
}

template <class T>
struct EncoderLayer {
  LayerNormLayer<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  FeedForward<T> ff;

  EncoderLayer(const std::string& name, const ModelConfig& cfg, Rng& rng)
      : ln1(name + ".ln1", cfg.hidden), ln2(name + ".ln2", cfg.hidden), attn(name + ".attn", cfg.hidden, rng),
        ff(name + ".ff", cfg.hidden, cfg.ff_width(), rng) {}

  Var operator()(Tape<T>& tp, Var x, const ops::AttentionShape& s, T scale, const ForwardContext& ctx, std::vector<T>* probs) {
    Var h = ln1(tp, x);
    x = ops::add(tp, x, maybe_dropout(tp, attn(tp, h, h, s, scale, probs), ctx));
    x = ops::add(tp, x, maybe_dropout(tp, ff(tp, ln2(tp, x)), ctx));
    return x;
  }
  void collect(std::vector<Parameter<T>*>& out) {
    ln1.collect(out);
    attn.collect(out);
    ln2.collect(out);
    ff.collect(out);
  }
};

template <class T>
class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(const ModelConfig& cfg, Rng& rng) : cfg_(cfg), final_ln_("encoder.ln", cfg.hidden) {
    for (int l = 0; l < cfg.layers; ++l) layers_.emplace_back("encoder." + std::to_string(l), cfg, rng);
  }

  // x: [batch * seq_len, hidden] -> same shape. probs, when given, receives
  // the attention weights of every layer.
  Var operator()(Tape<T>& tp, Var x, int batch, int seq_len, const ForwardContext& ctx = {},
                 std::vector<std::vector<T>>* probs = nullptr) {
    const auto& s = tp.shape(x);
    if (s.size() != 2 || s[1] != cfg_.hidden || s[0] != batch * seq_len)
      throw ShapeError("encoder: expected [" + std::to_string(batch * seq_len) + ", " + std::to_string(cfg_.hidden) + "], got " + shape_str(s));
    ops::AttentionShape as{batch, seq_len, seq_len, cfg_.heads, false, 0};
    if (probs) probs->assign(layers_.size(), {});
    for (std::size_t l = 0; l < layers_.size(); ++l)
      x = layers_[l](tp, x, as, attention_scale<T>(cfg_), ctx, probs ? &(*probs)[l] : nullptr);
    return final_ln_(tp, x);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    for (auto& l : layers_) l.collect(out);
    final_ln_.collect(out);
  }
  const std::vector<EncoderLayer<T>>& layers() const { return layers_; }
  const LayerNormLayer<T>& final_norm() const { return final_ln_; }

 private:
  ModelConfig cfg_;
  std::vector<EncoderLayer<T>> layers_;
  LayerNormLayer<T> final_ln_;
};

template <class T>
struct DecoderLayer {
  LayerNormLayer<T> ln1, ln2, ln3;
  MultiHeadAttention<T> self_attn, cross_attn;
  FeedForward<T> ff;

  DecoderLayer(const std::string& name, const ModelConfig& cfg, Rng& rng)
      : ln1(name + ".ln1", cfg.hidden), ln2(name + ".ln2", cfg.hidden), ln3(name + ".ln3", cfg.hidden),
        self_attn(name + ".self_attn", cfg.hidden, rng), cross_attn(name + ".cross_attn", cfg.hidden, rng),
        ff(name + ".ff", cfg.hidden, cfg.ff_width(), rng) {}

  void collect(std::vector<Parameter<T>*>& out) {
    ln1.collect(out);
    self_attn.collect(out);
    ln2.collect(out);
    cross_attn.collect(out);
    ln3.collect(out);
    ff.collect(out);
  }
};

// Per-sample incremental decoding state.
template <class T>
struct DecoderCache {
  std::vector<RowMat<T>> self_k, self_v;    // grows by one row per step
  std::vector<RowMat<T>> cross_k, cross_v;  // fixed, from the encoder memory
  int position = 0;
};

template <class T>
class TransformerDecoder {
 public:
  TransformerDecoder() = default;
  TransformerDecoder(const ModelConfig& cfg, int classes, Rng& rng)
      : cfg_(cfg), embedding_("decoder.embedding", {classes, cfg.hidden}), final_ln_("decoder.ln", cfg.hidden),
        projection_("decoder.projection", cfg.hidden, classes, rng) {
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    for (auto& x : embedding_.value.data) x = static_cast<T>(std_dev * rng.normal());
    for (int l = 0; l < cfg.layers; ++l) layers_.emplace_back("decoder." + std::to_string(l), cfg, rng);
  }

  int classes() const { return embedding_.value.dim(0); }

  // Embeds tokens, scales by sqrt(D) and adds the 1D encoding.
  // tokens: batch rows of length t_len, flattened. -> [batch * t_len, D].
  Var embed(Tape<T>& tp, const std::vector<int>& tokens, int batch, int t_len, const ForwardContext& ctx) {
    Var e = ops::scale(tp, ops::embedding(tp, tp.param(embedding_), tokens), std::sqrt(static_cast<T>(cfg_.hidden)));
    const auto tab = sinusoid_table<T>(t_len, cfg_.hidden);
    Tensor<T> tiled({batch * t_len, cfg_.hidden});
    for (int b = 0; b < batch; ++b) std::copy(tab.data.begin(), tab.data.end(), tiled.data.begin() + static_cast<std::ptrdiff_t>(b) * tab.size());
    return maybe_dropout(tp, ops::add_const(tp, e, tiled), ctx);
  }

  // Decoder stack output before projection: [batch * t_len, D].
  Var hidden_states(Tape<T>& tp, Var memory, int batch, int mem_len, const std::vector<int>& tokens, int t_len,
                    const ForwardContext& ctx = {}) {
    if (static_cast<int>(tokens.size()) != batch * t_len) throw ShapeError("decoder: token count does not match batch x length");
    if (t_len > cfg_.max_decode_len)
      throw ShapeError("decoder: target length " + std::to_string(t_len) + " exceeds max_decode_len " + std::to_string(cfg_.max_decode_len));
    const T scale = attention_scale<T>(cfg_);
    ops::AttentionShape self_s{batch, t_len, t_len, cfg_.heads, true, cfg_.faults.causal_off_by_one ? 1 : 0};
    ops::AttentionShape cross_s{batch, t_len, mem_len, cfg_.heads, false, 0};
    Var x = embed(tp, tokens, batch, t_len, ctx);
    for (auto& l : layers_) {
      Var h = l.ln1(tp, x);
      x = ops::add(tp, x, maybe_dropout(tp, l.self_attn(tp, h, h, self_s, scale), ctx));
      x = ops::add(tp, x, maybe_dropout(tp, l.cross_attn(tp, l.ln2(tp, x), memory, cross_s, scale), ctx));
      x = ops::add(tp, x, maybe_dropout(tp, l.ff(tp, l.ln3(tp, x)), ctx));
    }
    return final_ln_(tp, x);
  }

  // Linear map D -> classes, no activation.
  Var project(Tape<T>& tp, Var h) { return projection_(tp, h); }

  Var operator()(Tape<T>& tp, Var memory, int batch, int mem_len, const std::vector<int>& tokens, int t_len,
                 const ForwardContext& ctx = {}) {
    return project(tp, hidden_states(tp, memory, batch, mem_len, tokens, t_len, ctx));
  }

  DecoderCache<T> start(const RowMat<T>& memory) const {
    DecoderCache<T> c;
    for (const auto& l : layers_) {
      c.cross_k.push_back(l.cross_attn.k.apply(memory));
      c.cross_v.push_back(l.cross_attn.v.apply(memory));
      c.self_k.emplace_back(0, cfg_.hidden);
      c.self_v.emplace_back(0, cfg_.hidden);
    }
    return c;
  }

  // Feeds one token at the cache position and returns the logits row.
  Eigen::Matrix<T, 1, Eigen::Dynamic> step(DecoderCache<T>& c, int token) const {
    if (token < 0 || token >= classes()) throw ShapeError("decoder step: token out of range");
    const int d = cfg_.hidden;
    const T scale = attention_scale<T>(cfg_);
    RowMat<T> x(1, d);
    const T emb_scale = std::sqrt(static_cast<T>(d));
    for (int k = 0; k < d; ++k) {
      const double ph = sinusoid_phase(c.position, k / 2, d);
      const T pe = static_cast<T>(k % 2 ? std::cos(ph) : std::sin(ph));
      x(0, k) = embedding_.value[static_cast<std::size_t>(token) * d + k] * emb_scale + pe;
    }
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      const auto& l = layers_[li];
      RowMat<T> h = l.ln1.apply(x);
      RowMat<T> q = l.self_attn.q.apply(h);
      auto append = [](RowMat<T>& m, const RowMat<T>& row) {
        m.conservativeResize(m.rows() + 1, Eigen::NoChange);
        m.row(m.rows() - 1) = row.row(0);
      };
      append(c.self_k[li], l.self_attn.k.apply(h));
      append(c.self_v[li], l.self_attn.v.apply(h));
      x += l.self_attn.o.apply(attend(q, c.self_k[li], c.self_v[li], scale));
      q = l.cross_attn.q.apply(l.ln2.apply(x));
      x += l.cross_attn.o.apply(attend(q, c.cross_k[li], c.cross_v[li], scale));
      x += l.ff.apply(l.ln3.apply(x));
    }
    ++c.position;
    return projection_.apply(final_ln_.apply(x)).row(0);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&embedding_);
    for (auto& l : layers_) l.collect(out);
    final_ln_.collect(out);
    projection_.collect(out);
  }
  Parameter<T>& embedding_table() { return embedding_; }
  LinearLayer<T>& projection() { return projection_; }

 private:
  RowMat<T> attend(const RowMat<T>& q, const RowMat<T>& k, const RowMat<T>& v, T scale) const {
    const int d = cfg_.hidden, heads = cfg_.heads, dh = d / heads;
    RowMat<T> out(1, d);
    for (int h = 0; h < heads; ++h) {
      Eigen::Matrix<T, 1, Eigen::Dynamic> s = (q.block(0, h * dh, 1, dh) * k.block(0, h * dh, k.rows(), dh).transpose()) * scale;
      const T mx = s.maxCoeff();
      s = (s.array() - mx).exp().matrix();
      s /= s.sum();
      out.block(0, h * dh, 1, dh) = s * v.block(0, h * dh, v.rows(), dh);
    }
    return out;
  }

  ModelConfig cfg_;
  Parameter<T> embedding_;
  std::vector<DecoderLayer<T>> layers_;
  LayerNormLayer<T> final_ln_;
  LinearLayer<T> projection_;
};

}  // namespace htrner
