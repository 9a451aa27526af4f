#pragma once

// Differentiable operations recorded on a Tape. Each op computes its value
// eagerly and registers a closure that maps the output gradient to input
// gradients.

#include "htrner/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <vector>

namespace htrner::ops {

template <class T>
Var add(Tape<T>& tp, Var a, Var b) {
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  require(av.shape == bv.shape, "add: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tp.push(std::move(out), {a, b}, [&tp, a, b](const Tensor<T>& g) {
    for (Var v : {a, b}) {
      if (!tp.needs_grad(v)) continue;
      auto& gv = tp.grad(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

// a + c where c is a constant tensor of the same shape.
template <class T>
Var add_const(Tape<T>& tp, Var a, const Tensor<T>& c) {
  const auto& av = tp.value(a);
  require(av.shape == c.shape, "add_const: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(c.shape));
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
  return tp.push(std::move(out), {a}, [&tp, a](const Tensor<T>& g) {
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <class T>
Var scale(Tape<T>& tp, Var a, T s) {
  Tensor<T> out = tp.value(a);
  for (auto& x : out.data) x *= s;
  return tp.push(std::move(out), {a}, [&tp, a, s](const Tensor<T>& g) {
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

template <class T>
Var relu(Tape<T>& tp, Var a) {
  Tensor<T> out = tp.value(a);
  for (auto& x : out.data) x = x > T(0) ? x : T(0);
  return tp.push(std::move(out), {a}, [&tp, a](const Tensor<T>& g) {
    const auto& av = tp.value(a);
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av[i] > T(0)) ga[i] += g[i];
  });
}

template <class T>
Var sigmoid(Tape<T>& tp, Var a) {
  Tensor<T> out = tp.value(a);
  for (auto& x : out.data) x = T(1) / (T(1) + std::exp(-x));
  auto y = std::make_shared<Tensor<T>>(out);
  return tp.push(std::move(out), {a}, [&tp, a, y](const Tensor<T>& g) {
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*y)[i] * (T(1) - (*y)[i]);
  });
}

// Reinterprets the payload with a new shape (row-major order unchanged).
template <class T>
Var reshape(Tape<T>& tp, Var a, std::vector<int> shape) {
  Tensor<T> out = tp.value(a).reshaped(std::move(shape));
  return tp.push(std::move(out), {a}, [&tp, a](const Tensor<T>& g) {
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// x[..., in] * w[in, out] (+ b[out]).
template <class T>
Var linear(Tape<T>& tp, Var x, Var w, std::optional<Var> b = std::nullopt) {
  const auto& xv = tp.value(x);
  const auto& wv = tp.value(w);
  require(wv.rank() == 2 && xv.dim(-1) == wv.dim(0),
          "linear: input " + shape_str(xv.shape) + " incompatible with weight " + shape_str(wv.shape));
  const int in = wv.dim(0), outc = wv.dim(1);
  const int rows = static_cast<int>(xv.size() / in);
  std::vector<int> oshape = xv.shape;
  oshape.back() = outc;
  Tensor<T> out(oshape);
  as_mat(out, rows, outc).noalias() = as_mat(xv, rows, in) * as_mat(wv, in, outc);
  if (b) {
    const auto& bv = tp.value(*b);
    require(static_cast<int>(bv.size()) == outc, "linear: bias size mismatch");
    auto om = as_mat(out, rows, outc);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < outc; ++c) om(r, c) += bv[c];
  }
  Var bb = b.value_or(Var{});
  return tp.push(std::move(out), {x, w, bb}, [&tp, x, w, bb, rows, in, outc](const Tensor<T>& g) {
    auto gm = as_mat(g, rows, outc);
    if (tp.needs_grad(x)) as_mat(tp.grad(x), rows, in).noalias() += gm * as_mat(tp.value(w), in, outc).transpose();
    if (tp.needs_grad(w)) as_mat(tp.grad(w), in, outc).noalias() += as_mat(tp.value(x), rows, in).transpose() * gm;
    if (bb.valid() && tp.needs_grad(bb)) {
      auto& gb = tp.grad(bb);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < outc; ++c) gb[c] += gm(r, c);
    }
  });
}

struct ConvGeometry {
  int n, h, w, c;     // input NHWC
  int kernel, stride, pad;
  int ho, wo, o;      // output
  int patch() const { return kernel * kernel * c; }
};

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const int patch = g.patch();
  for (int n = 0; n < g.n; ++n)
    for (int oh = 0; oh < g.ho; ++oh)
      for (int ow = 0; ow < g.wo; ++ow) {
        T* row = col + (static_cast<std::size_t>((n * g.ho + oh) * g.wo + ow)) * patch;
        for (int kh = 0; kh < g.kernel; ++kh) {
          const int ih = oh * g.stride - g.pad + kh;
          for (int kw = 0; kw < g.kernel; ++kw) {
            const int iw = ow * g.stride - g.pad + kw;
            T* dst = row + (kh * g.kernel + kw) * g.c;
            if (ih < 0 || ih >= g.h || iw < 0 || iw >= g.w) {
              std::fill(dst, dst + g.c, T(0));
            } else {
              const T* src = x + (static_cast<std::size_t>((n * g.h + ih) * g.w + iw)) * g.c;
              std::copy(src, src + g.c, dst);
            }
          }
        }
      }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const int patch = g.patch();
  for (int n = 0; n < g.n; ++n)
    for (int oh = 0; oh < g.ho; ++oh)
      for (int ow = 0; ow < g.wo; ++ow) {
        const T* row = col + (static_cast<std::size_t>((n * g.ho + oh) * g.wo + ow)) * patch;
        for (int kh = 0; kh < g.kernel; ++kh) {
          const int ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.h) continue;
          for (int kw = 0; kw < g.kernel; ++kw) {
            const int iw = ow * g.stride - g.pad + kw;
            if (iw < 0 || iw >= g.w) continue;
            const T* src = row + (kh * g.kernel + kw) * g.c;
            T* dst = dx + (static_cast<std::size_t>((n * g.h + ih) * g.w + iw)) * g.c;
            for (int c = 0; c < g.c; ++c) dst[c] += src[c];
          }
        }
      }
}

// 2D convolution on NHWC input. Weight layout [kernel*kernel*in, out] with
// rows ordered (kh, kw, c).
template <class T>
Var conv2d(Tape<T>& tp, Var x, Var w, std::optional<Var> b, int kernel, int stride, int pad) {
  const auto& xv = tp.value(x);
  const auto& wv = tp.value(w);
  require(xv.rank() == 4, "conv2d: expected NHWC input, got " + shape_str(xv.shape));
  ConvGeometry g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), kernel, stride, pad, 0, 0, wv.dim(1)};
  require(wv.rank() == 2 && wv.dim(0) == g.patch(),
          "conv2d: weight " + shape_str(wv.shape) + " does not match kernel " + std::to_string(kernel) + " and " +
              std::to_string(g.c) + " input channels");
  g.ho = (g.h + 2 * pad - kernel) / stride + 1;
  g.wo = (g.w + 2 * pad - kernel) / stride + 1;
  const int rows = g.n * g.ho * g.wo;
  const bool direct = kernel == 1 && stride == 1 && pad == 0;
  auto col = std::make_shared<std::vector<T>>();
  const T* colp = xv.ptr();
  if (!direct) {
    col->resize(static_cast<std::size_t>(rows) * g.patch());
    im2col(xv.ptr(), g, col->data());
    colp = col->data();
  }
  Tensor<T> out({g.n, g.ho, g.wo, g.o});
  as_mat(out, rows, g.o).noalias() = CMatMap<T>(colp, rows, g.patch()) * as_mat(wv, g.patch(), g.o);
  if (b) {
    const auto& bv = tp.value(*b);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < g.o; ++c) out[static_cast<std::size_t>(r) * g.o + c] += bv[c];
  }
  Var bb = b.value_or(Var{});
  return tp.push(std::move(out), {x, w, bb}, [&tp, x, w, bb, g, rows, col, direct](const Tensor<T>& gout) {
    auto gm = as_mat(gout, rows, g.o);
    const T* colp = direct ? tp.value(x).ptr() : col->data();
    if (tp.needs_grad(w)) as_mat(tp.grad(w), g.patch(), g.o).noalias() += CMatMap<T>(colp, rows, g.patch()).transpose() * gm;
    if (bb.valid() && tp.needs_grad(bb)) {
      auto& gb = tp.grad(bb);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < g.o; ++c) gb[c] += gm(r, c);
    }
    if (tp.needs_grad(x)) {
      if (direct) {
        as_mat(tp.grad(x), rows, g.patch()).noalias() += gm * as_mat(tp.value(w), g.patch(), g.o).transpose();
      } else {
        std::vector<T> dcol(static_cast<std::size_t>(rows) * g.patch());
        MatMap<T>(dcol.data(), rows, g.patch()).noalias() = gm * as_mat(tp.value(w), g.patch(), g.o).transpose();
        col2im_add(dcol.data(), g, tp.grad(x).ptr());
      }
    }
  });
}

namespace detail {

// Normalizes `count` groups; group k owns elements idx(k, j) for j < len.
// Used by both group_norm (strided channel blocks) and layer_norm (rows).
template <class T>
struct NormCache {
  std::vector<T> xhat;
  std::vector<T> rstd;
};

}  // namespace detail

// Group normalization over NHWC input: statistics per sample and per group of
// channels, affine per channel.
template <class T>
Var group_norm(Tape<T>& tp, Var x, Var gamma, Var beta, int groups, T eps = T(1e-5)) {
  const auto& xv = tp.value(x);
  require(xv.rank() == 4, "group_norm: expected NHWC input");
  const int n = xv.dim(0), hw = xv.dim(1) * xv.dim(2), c = xv.dim(3);
  require(c % groups == 0, "group_norm: channels " + std::to_string(c) + " not divisible by groups " + std::to_string(groups));
  const int cg = c / groups;
  const T count = static_cast<T>(hw * cg);
  auto cache = std::make_shared<detail::NormCache<T>>();
  cache->xhat.resize(xv.size());
  cache->rstd.resize(static_cast<std::size_t>(n) * groups);
  Tensor<T> out(xv.shape);
  const auto& gv = tp.value(gamma);
  const auto& bv = tp.value(beta);
  for (int s = 0; s < n; ++s)
    for (int gi = 0; gi < groups; ++gi) {
      T mean = 0;
      for (int p = 0; p < hw; ++p)
        for (int k = 0; k < cg; ++k) mean += xv[(static_cast<std::size_t>(s) * hw + p) * c + gi * cg + k];
      mean /= count;
      T var = 0;
      for (int p = 0; p < hw; ++p)
        for (int k = 0; k < cg; ++k) {
          const T d = xv[(static_cast<std::size_t>(s) * hw + p) * c + gi * cg + k] - mean;
          var += d * d;
        }
      var /= count;
      const T rstd = T(1) / std::sqrt(var + eps);
      cache->rstd[static_cast<std::size_t>(s) * groups + gi] = rstd;
      for (int p = 0; p < hw; ++p)
        for (int k = 0; k < cg; ++k) {
          const std::size_t i = (static_cast<std::size_t>(s) * hw + p) * c + gi * cg + k;
          const T xh = (xv[i] - mean) * rstd;
          cache->xhat[i] = xh;
          out[i] = xh * gv[gi * cg + k] + bv[gi * cg + k];
        }
    }
  return tp.push(std::move(out), {x, gamma, beta}, [&tp, x, gamma, beta, n, hw, c, cg, groups, count, cache](const Tensor<T>& g) {
    const auto& gv = tp.value(gamma);
    if (tp.needs_grad(gamma) || tp.needs_grad(beta)) {
      std::vector<T> dg(c, T(0)), db(c, T(0));
      for (std::size_t i = 0; i < g.size(); ++i) {
        const int ch = static_cast<int>(i % c);
        dg[ch] += g[i] * cache->xhat[i];
        db[ch] += g[i];
      }
      if (tp.needs_grad(gamma)) {
        auto& gg = tp.grad(gamma);
        for (int k = 0; k < c; ++k) gg[k] += dg[k];
      }
      if (tp.needs_grad(beta)) {
        auto& gb = tp.grad(beta);
        for (int k = 0; k < c; ++k) gb[k] += db[k];
      }
    }
    if (!tp.needs_grad(x)) return;
    auto& gx = tp.grad(x);
    for (int s = 0; s < n; ++s)
      for (int gi = 0; gi < groups; ++gi) {
        T m1 = 0, m2 = 0;
        for (int p = 0; p < hw; ++p)
          for (int k = 0; k < cg; ++k) {
            const std::size_t i = (static_cast<std::size_t>(s) * hw + p) * c + gi * cg + k;
            const T dxh = g[i] * gv[gi * cg + k];
            m1 += dxh;
            m2 += dxh * cache->xhat[i];
          }
        m1 /= count;
        m2 /= count;
        const T rstd = cache->rstd[static_cast<std::size_t>(s) * groups + gi];
        for (int p = 0; p < hw; ++p)
          for (int k = 0; k < cg; ++k) {
            const std::size_t i = (static_cast<std::size_t>(s) * hw + p) * c + gi * cg + k;
            const T dxh = g[i] * gv[gi * cg + k];
            gx[i] += rstd * (dxh - m1 - cache->xhat[i] * m2);
          }
      }
  });
}

// Layer normalization over the last dimension.
template <class T>
Var layer_norm(Tape<T>& tp, Var x, Var gamma, Var beta, T eps = T(1e-5)) {
  const auto& xv = tp.value(x);
  const int d = xv.dim(-1);
  const int rows = static_cast<int>(xv.size() / d);
  auto cache = std::make_shared<detail::NormCache<T>>();
  cache->xhat.resize(xv.size());
  cache->rstd.resize(rows);
  const auto& gv = tp.value(gamma);
  const auto& bv = tp.value(beta);
  require(static_cast<int>(gv.size()) == d && static_cast<int>(bv.size()) == d, "layer_norm: affine size mismatch");
  Tensor<T> out(xv.shape);
  for (int r = 0; r < rows; ++r) {
    const T* xr = xv.ptr() + static_cast<std::size_t>(r) * d;
    T mean = 0;
    for (int k = 0; k < d; ++k) mean += xr[k];
    mean /= d;
    T var = 0;
    for (int k = 0; k < d; ++k) var += (xr[k] - mean) * (xr[k] - mean);
    var /= d;
    const T rstd = T(1) / std::sqrt(var + eps);
    cache->rstd[r] = rstd;
    for (int k = 0; k < d; ++k) {
      const std::size_t i = static_cast<std::size_t>(r) * d + k;
      cache->xhat[i] = (xr[k] - mean) * rstd;
      out[i] = cache->xhat[i] * gv[k] + bv[k];
    }
  }
  return tp.push(std::move(out), {x, gamma, beta}, [&tp, x, gamma, beta, rows, d, cache](const Tensor<T>& g) {
    const auto& gv = tp.value(gamma);
    if (tp.needs_grad(gamma) || tp.needs_grad(beta)) {
      auto* gg = tp.needs_grad(gamma) ? &tp.grad(gamma) : nullptr;
      auto* gb = tp.needs_grad(beta) ? &tp.grad(beta) : nullptr;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const int k = static_cast<int>(i % d);
        if (gg) (*gg)[k] += g[i] * cache->xhat[i];
        if (gb) (*gb)[k] += g[i];
      }
    }
    if (!tp.needs_grad(x)) return;
    auto& gx = tp.grad(x);
    for (int r = 0; r < rows; ++r) {
      T m1 = 0, m2 = 0;
      for (int k = 0; k < d; ++k) {
        const std::size_t i = static_cast<std::size_t>(r) * d + k;
        const T dxh = g[i] * gv[k];
        m1 += dxh;
        m2 += dxh * cache->xhat[i];
      }
      m1 /= d;
      m2 /= d;
      for (int k = 0; k < d; ++k) {
        const std::size_t i = static_cast<std::size_t>(r) * d + k;
        gx[i] += cache->rstd[r] * (g[i] * gv[k] - m1 - cache->xhat[i] * m2);
      }
    }
  });
}

// Global average pooling of NHWC input over H and W -> [N, C].
template <class T>
Var mean_spatial(Tape<T>& tp, Var x) {
  const auto& xv = tp.value(x);
  require(xv.rank() == 4, "mean_spatial: expected NHWC input");
  const int n = xv.dim(0), hw = xv.dim(1) * xv.dim(2), c = xv.dim(3);
  Tensor<T> out({n, c});
  for (int s = 0; s < n; ++s)
    for (int p = 0; p < hw; ++p)
      for (int k = 0; k < c; ++k) out[static_cast<std::size_t>(s) * c + k] += xv[(static_cast<std::size_t>(s) * hw + p) * c + k];
  for (auto& v : out.data) v /= static_cast<T>(hw);
  return tp.push(std::move(out), {x}, [&tp, x, n, hw, c](const Tensor<T>& g) {
    auto& gx = tp.grad(x);
    for (int s = 0; s < n; ++s)
      for (int p = 0; p < hw; ++p)
        for (int k = 0; k < c; ++k)
          gx[(static_cast<std::size_t>(s) * hw + p) * c + k] += g[static_cast<std::size_t>(s) * c + k] / static_cast<T>(hw);
  });
}

// out[n,h,w,:] = E[n,h,w,:] + sign * (alpha[n] * ph[h,:] + beta[n] * pw[w,:]).
// sign is +1 in normal use; the selftest mutation fixture flips it.
template <class T>
Var add_scaled_2d_position(Tape<T>& tp, Var e, Var alpha, Var beta, const Tensor<T>& ph, const Tensor<T>& pw, T sign = T(1)) {
  const auto& ev = tp.value(e);
  require(ev.rank() == 4, "add_scaled_2d_position: expected NHWC input");
  const int n = ev.dim(0), h = ev.dim(1), w = ev.dim(2), d = ev.dim(3);
  require(ph.dim(0) >= h && ph.dim(1) == d && pw.dim(0) >= w && pw.dim(1) == d, "add_scaled_2d_position: table shape mismatch");
  const auto& av = tp.value(alpha);
  const auto& bv = tp.value(beta);
  require(static_cast<int>(av.size()) == n && static_cast<int>(bv.size()) == n, "add_scaled_2d_position: one alpha/beta per sample");
  Tensor<T> out = ev;
  for (int s = 0; s < n; ++s)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        T* o = out.ptr() + ((static_cast<std::size_t>(s) * h + y) * w + x) * d;
        for (int k = 0; k < d; ++k) o[k] += sign * (av[s] * ph[static_cast<std::size_t>(y) * d + k] + bv[s] * pw[static_cast<std::size_t>(x) * d + k]);
      }
  auto tabs = std::make_shared<std::pair<Tensor<T>, Tensor<T>>>(ph, pw);
  return tp.push(std::move(out), {e, alpha, beta}, [&tp, e, alpha, beta, n, h, w, d, tabs, sign](const Tensor<T>& g) {
    if (tp.needs_grad(e)) {
      auto& ge = tp.grad(e);
      for (std::size_t i = 0; i < g.size(); ++i) ge[i] += g[i];
    }
    const bool ga = tp.needs_grad(alpha), gb = tp.needs_grad(beta);
    if (!ga && !gb) return;
    for (int s = 0; s < n; ++s) {
      T da = 0, db = 0;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const T* gp = g.ptr() + ((static_cast<std::size_t>(s) * h + y) * w + x) * d;
          for (int k = 0; k < d; ++k) {
            da += gp[k] * tabs->first[static_cast<std::size_t>(y) * d + k];
            db += gp[k] * tabs->second[static_cast<std::size_t>(x) * d + k];
          }
        }
      if (ga) tp.grad(alpha)[s] += sign * da;
      if (gb) tp.grad(beta)[s] += sign * db;
    }
  });
}

// Max pooling on NHWC input with implicit -inf padding.
template <class T>
Var max_pool2d(Tape<T>& tp, Var x, int kernel, int stride, int pad) {
  const auto& xv = tp.value(x);
  require(xv.rank() == 4, "max_pool2d: expected NHWC input");
  const int n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
  const int ho = (h + 2 * pad - kernel) / stride + 1, wo = (w + 2 * pad - kernel) / stride + 1;
  Tensor<T> out({n, ho, wo, c});
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  for (int s = 0; s < n; ++s)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox)
        for (int k = 0; k < c; ++k) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t bi = 0;
          for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx) {
              const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              const std::size_t i = ((static_cast<std::size_t>(s) * h + iy) * w + ix) * c + k;
              if (xv[i] > best) {
                best = xv[i];
                bi = i;
              }
            }
          const std::size_t o = ((static_cast<std::size_t>(s) * ho + oy) * wo + ox) * c + k;
          out[o] = best;
          (*arg)[o] = bi;
        }
  return tp.push(std::move(out), {x}, [&tp, x, arg](const Tensor<T>& g) {
    auto& gx = tp.grad(x);
    for (std::size_t o = 0; o < g.size(); ++o) gx[(*arg)[o]] += g[o];
  });
}

struct AttentionShape {
  int batch = 1;
  int q_len = 0;
  int k_len = 0;
  int heads = 1;
  bool causal = false;
  // Query t may attend keys <= t + causal_shift. 0 is the correct mask; the
  // selftest mutation fixture uses 1.
  int causal_shift = 0;
};

// Computes softmax(scale * Q K^T) V per (batch, head). probs receives
// [batch, heads, q_len, k_len] when non-null.
template <class T>
void attention_forward(const T* q, const T* k, const T* v, int d, const AttentionShape& s, T scale, T* out, T* probs) {
  const int dh = d / s.heads;
  std::vector<T> scores(static_cast<std::size_t>(s.q_len) * s.k_len);
  for (int b = 0; b < s.batch; ++b)
    for (int h = 0; h < s.heads; ++h) {
      Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> qm(q + static_cast<std::size_t>(b) * s.q_len * d + h * dh, s.q_len, dh, Eigen::OuterStride<>(d));
      Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> km(k + static_cast<std::size_t>(b) * s.k_len * d + h * dh, s.k_len, dh, Eigen::OuterStride<>(d));
      Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> vm(v + static_cast<std::size_t>(b) * s.k_len * d + h * dh, s.k_len, dh, Eigen::OuterStride<>(d));
      Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>> om(out + static_cast<std::size_t>(b) * s.q_len * d + h * dh, s.q_len, dh, Eigen::OuterStride<>(d));
      T* p = probs ? probs + (static_cast<std::size_t>(b) * s.heads + h) * s.q_len * s.k_len : scores.data();
      MatMap<T> pm(p, s.q_len, s.k_len);
      pm.noalias() = qm * km.transpose();
      for (int i = 0; i < s.q_len; ++i) {
        const int limit = s.causal ? std::min(s.k_len, i + 1 + s.causal_shift) : s.k_len;
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < limit; ++j) {
          pm(i, j) *= scale;
          mx = std::max(mx, pm(i, j));
        }
        T sum = 0;
        for (int j = 0; j < limit; ++j) {
          pm(i, j) = std::exp(pm(i, j) - mx);
          sum += pm(i, j);
        }
        for (int j = 0; j < limit; ++j) pm(i, j) /= sum;
        for (int j = limit; j < s.k_len; ++j) pm(i, j) = T(0);
      }
      om.noalias() = pm * vm;
    }
}

// Multi-head scaled dot-product attention over batched rows:
// q [batch*q_len, d], k/v [batch*k_len, d] -> [batch*q_len, d].
template <class T>
Var attention(Tape<T>& tp, Var q, Var k, Var v, const AttentionShape& s, T scale, std::vector<T>* probs_out = nullptr) {
  const auto& qv = tp.value(q);
  const auto& kv = tp.value(k);
  const auto& vv = tp.value(v);
  const int d = qv.dim(-1);
  require(d % s.heads == 0, "attention: width not divisible by heads");
  require(static_cast<int>(qv.size()) == s.batch * s.q_len * d && static_cast<int>(kv.size()) == s.batch * s.k_len * d &&
              kv.shape == vv.shape,
          "attention: shape mismatch");
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(s.batch) * s.heads * s.q_len * s.k_len);
  Tensor<T> out({s.batch * s.q_len, d});
  attention_forward(qv.ptr(), kv.ptr(), vv.ptr(), d, s, scale, out.ptr(), probs->data());
  if (probs_out) *probs_out = *probs;
  return tp.push(std::move(out), {q, k, v}, [&tp, q, k, v, s, d, scale, probs](const Tensor<T>& g) {
    const int dh = d / s.heads;
    const auto& qv = tp.value(q);
    const auto& kv = tp.value(k);
    const auto& vv = tp.value(v);
    T* gq = tp.needs_grad(q) ? tp.grad(q).ptr() : nullptr;
    T* gk = tp.needs_grad(k) ? tp.grad(k).ptr() : nullptr;
    T* gv = tp.needs_grad(v) ? tp.grad(v).ptr() : nullptr;
    RowMat<T> dp(s.q_len, s.k_len);
    using Strided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
    using MStrided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
    for (int b = 0; b < s.batch; ++b)
      for (int h = 0; h < s.heads; ++h) {
        const std::size_t qo = static_cast<std::size_t>(b) * s.q_len * d + h * dh;
        const std::size_t ko = static_cast<std::size_t>(b) * s.k_len * d + h * dh;
        Strided qm(qv.ptr() + qo, s.q_len, dh, Eigen::OuterStride<>(d));
        Strided km(kv.ptr() + ko, s.k_len, dh, Eigen::OuterStride<>(d));
        Strided vm(vv.ptr() + ko, s.k_len, dh, Eigen::OuterStride<>(d));
        Strided gm(g.ptr() + qo, s.q_len, dh, Eigen::OuterStride<>(d));
        CMatMap<T> pm(probs->data() + (static_cast<std::size_t>(b) * s.heads + h) * s.q_len * s.k_len, s.q_len, s.k_len);
        if (gv) MStrided(gv + ko, s.k_len, dh, Eigen::OuterStride<>(d)).noalias() += pm.transpose() * gm;
        if (!gq && !gk) continue;
        dp.noalias() = gm * vm.transpose();
        for (int i = 0; i < s.q_len; ++i) {
          T dot = 0;
          for (int j = 0; j < s.k_len; ++j) dot += dp(i, j) * pm(i, j);
          for (int j = 0; j < s.k_len; ++j) dp(i, j) = pm(i, j) * (dp(i, j) - dot) * scale;
        }
        if (gq) MStrided(gq + qo, s.q_len, dh, Eigen::OuterStride<>(d)).noalias() += dp * km;
        if (gk) MStrided(gk + ko, s.k_len, dh, Eigen::OuterStride<>(d)).noalias() += dp.transpose() * qm;
      }
  });
}

// Row lookup: ids -> [ids.size(), d].
template <class T>
Var embedding(Tape<T>& tp, Var table, std::vector<int> ids) {
  const auto& tv = tp.value(table);
  const int rows = tv.dim(0), d = tv.dim(1);
  Tensor<T> out({static_cast<int>(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < rows, "embedding: index " + std::to_string(ids[i]) + " out of range");
    std::copy_n(tv.ptr() + static_cast<std::size_t>(ids[i]) * d, d, out.ptr() + i * d);
  }
  return tp.push(std::move(out), {table}, [&tp, table, ids = std::move(ids), d](const Tensor<T>& g) {
    auto& gt = tp.grad(table);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (int k = 0; k < d; ++k) gt[static_cast<std::size_t>(ids[i]) * d + k] += g[i * d + k];
  });
}

// Inverted dropout; identity when p == 0.
template <class T>
Var dropout(Tape<T>& tp, Var x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  const auto& xv = tp.value(x);
  auto mask = std::make_shared<std::vector<T>>(xv.size());
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*mask)[i] = rng.bernoulli(p) ? T(0) : keep;
    out[i] = xv[i] * (*mask)[i];
  }
  return tp.push(std::move(out), {x}, [&tp, x, mask](const Tensor<T>& g) {
    auto& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
}

// Mean next-token cross-entropy over rows whose target != ignore_index.
template <class T>
Var cross_entropy(Tape<T>& tp, Var logits, const std::vector<int>& targets, int ignore_index) {
  const auto& lv = tp.value(logits);
  const int classes = lv.dim(-1);
  const int rows = static_cast<int>(lv.size() / classes);
  require(static_cast<int>(targets.size()) == rows,
          "cross_entropy: " + std::to_string(rows) + " logit rows vs " + std::to_string(targets.size()) + " targets");
  auto soft = std::make_shared<std::vector<T>>(lv.size());
  T total = 0;
  int counted = 0;
  for (int r = 0; r < rows; ++r) {
    const T* l = lv.ptr() + static_cast<std::size_t>(r) * classes;
    T* sp = soft->data() + static_cast<std::size_t>(r) * classes;
    T mx = *std::max_element(l, l + classes);
    T sum = 0;
    for (int c = 0; c < classes; ++c) {
      sp[c] = std::exp(l[c] - mx);
      sum += sp[c];
    }
    for (int c = 0; c < classes; ++c) sp[c] /= sum;
    if (targets[r] == ignore_index) continue;
    require(targets[r] >= 0 && targets[r] < classes, "cross_entropy: target out of range");
    total += std::log(sum) + mx - l[targets[r]];
    ++counted;
  }
  Tensor<T> out({1});
  out[0] = counted ? total / static_cast<T>(counted) : T(0);
  return tp.push(std::move(out), {logits}, [&tp, logits, targets, ignore_index, rows, classes, counted, soft](const Tensor<T>& g) {
    if (!counted) return;
    auto& gl = tp.grad(logits);
    const T coef = g[0] / static_cast<T>(counted);
    for (int r = 0; r < rows; ++r) {
      if (targets[r] == ignore_index) continue;
      const std::size_t base = static_cast<std::size_t>(r) * classes;
      for (int c = 0; c < classes; ++c) gl[base + c] += coef * (*soft)[base + c];
      gl[base + targets[r]] -= coef;
    }
  });
}

// sum_i x_i * w_i, a scalar probe used by gradient checks.
template <class T>
Var weighted_sum(Tape<T>& tp, Var x, const Tensor<T>& w) {
  const auto& xv = tp.value(x);
  require(xv.size() == w.size(), "weighted_sum: size mismatch");
  Tensor<T> out({1});
  for (std::size_t i = 0; i < xv.size(); ++i) out[0] += xv[i] * w[i];
  auto wc = std::make_shared<Tensor<T>>(w);
  return tp.push(std::move(out), {x}, [&tp, x, wc](const Tensor<T>& g) {
    auto& gx = tp.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * (*wc)[i];
  });
}

}  // namespace htrner::ops
