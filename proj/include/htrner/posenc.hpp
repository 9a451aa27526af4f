#pragma once

// Sinusoidal tables, adaptive 2D positional encoding, 1D encoding and the
// feature-map flattening that produces the encoder sequence.
//
// A2DPE for a feature map E (H' x W' x D):
//   g      = mean over (h, w) of E[h, w]
//   alpha  = sigmoid(relu(g W1_h) W2_h),  beta = sigmoid(relu(g W1_w) W2_w)
//   out    = E[h, w] + alpha * P[h] + beta * P[w]
// with P[p, 2i] = sin(p / 10000^(2i/D)), P[p, 2i+1] = cos(same phase).

#include "htrner/ops.hpp"

#include <cmath>
#include <string>

namespace htrner {

inline double sinusoid_phase(int position, int pair_index, int d) {
  return static_cast<double>(position) / std::pow(10000.0, 2.0 * pair_index / static_cast<double>(d));
}

template <class T>
Tensor<T> sinusoid_table(int length, int d) {
  if (d % 2) throw ShapeError("sinusoid_table: width " + std::to_string(d) + " must be even");
  Tensor<T> t({length, d});
  for (int p = 0; p < length; ++p)
    for (int i = 0; i < d / 2; ++i) {
      const double ph = sinusoid_phase(p, i, d);
      t[static_cast<std::size_t>(p) * d + 2 * i] = static_cast<T>(std::sin(ph));
      t[static_cast<std::size_t>(p) * d + 2 * i + 1] = static_cast<T>(std::cos(ph));
    }
  return t;
}

// seq [len, D] + table [len, D].
template <class T>
Tensor<T> pe_1d(const Tensor<T>& seq) {
  require(seq.rank() == 2, "pe_1d: expected [len, D]");
  Tensor<T> out = seq;
  const auto tab = sinusoid_table<T>(seq.dim(0), seq.dim(1));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += tab[i];
  return out;
}

// Row-major flatten of an H' x W' x D map: row h * W' + w holds map[h][w].
template <class T>
Tensor<T> flatten(const Tensor<T>& map) {
  require(map.rank() == 3, "flatten: expected [H', W', D]");
  return map.reshaped({map.dim(0) * map.dim(1), map.dim(2)});
}

template <class T>
Tensor<T> unflatten(const Tensor<T>& seq, int h, int w) {
  require(seq.rank() == 2 && seq.dim(0) == h * w, "unflatten: row count does not match " + std::to_string(h) + "x" + std::to_string(w));
  return seq.reshaped({h, w, seq.dim(1)});
}

template <class T>
struct A2dpeParams {
  Parameter<T> w1_h, w2_h, w1_w, w2_w;

  A2dpeParams() = default;
  A2dpeParams(int d, Rng& rng)
      : w1_h("a2dpe.w1_h", {d, d}), w2_h("a2dpe.w2_h", {d, 1}), w1_w("a2dpe.w1_w", {d, d}), w2_w("a2dpe.w2_w", {d, 1}) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto* p : {&w1_h, &w2_h, &w1_w, &w2_w})
      for (auto& x : p->value.data) x = static_cast<T>(rng.uniform(-bound, bound));
  }

  int width() const { return w1_h.value.dim(0); }
  void collect(std::vector<Parameter<T>*>& out) { out.insert(out.end(), {&w1_h, &w2_h, &w1_w, &w2_w}); }
};

// e: [N, H', W', D] -> same shape.
template <class T>
Var a2dpe(Tape<T>& tp, Var e, A2dpeParams<T>& p, T sign = T(1)) {
  const auto& shape = tp.shape(e);
  require(shape.size() == 4 && shape[3] == p.width(),
          "a2dpe: feature map " + shape_str(shape) + " does not match encoding width " + std::to_string(p.width()));
  Var g = ops::mean_spatial(tp, e);
  Var alpha = ops::sigmoid(tp, ops::linear(tp, ops::relu(tp, ops::linear(tp, g, tp.param(p.w1_h))), tp.param(p.w2_h)));
  Var beta = ops::sigmoid(tp, ops::linear(tp, ops::relu(tp, ops::linear(tp, g, tp.param(p.w1_w))), tp.param(p.w2_w)));
  const auto ph = sinusoid_table<T>(shape[1], shape[3]);
  const auto pw = sinusoid_table<T>(shape[2], shape[3]);
  return ops::add_scaled_2d_position(tp, e, alpha, beta, ph, pw, sign);
}

// Single-map convenience form: f [H', W', D] -> [H', W', D].
template <class T>
Tensor<T> a2dpe(const Tensor<T>& f, A2dpeParams<T>& p) {
  require(f.rank() == 3, "a2dpe: expected [H', W', D]");
  Tape<T> tp(false);
  Var e = tp.constant(f.reshaped({1, f.dim(0), f.dim(1), f.dim(2)}));
  return tp.value(a2dpe(tp, e, p)).reshaped(f.shape);
}

// Test hook: applies the encoding with given scale factors.
template <class T>
Tensor<T> a2dpe_with_scales(const Tensor<T>& f, T alpha, T beta) {
  require(f.rank() == 3, "a2dpe_with_scales: expected [H', W', D]");
  Tape<T> tp(false);
  Var e = tp.constant(f.reshaped({1, f.dim(0), f.dim(1), f.dim(2)}));
  Var a = tp.constant(Tensor<T>({1, 1}, alpha));
  Var b = tp.constant(Tensor<T>({1, 1}, beta));
  const auto ph = sinusoid_table<T>(f.dim(0), f.dim(2));
  const auto pw = sinusoid_table<T>(f.dim(1), f.dim(2));
  return tp.value(ops::add_scaled_2d_position(tp, e, a, b, ph, pw)).reshaped(f.shape);
}

}  // namespace htrner
