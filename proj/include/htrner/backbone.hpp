#pragma once

// Image preprocessing and the residual CNN that maps a 3 x H x W image to an
// (H/32) x (W/32) feature map, plus the channel compression to the
// transformer width.

#include "htrner/model_config.hpp"
#include "htrner/ops.hpp"
#include "htrner/render.hpp"

#include <cmath>
#include <memory>
#include <string>
#include <vector>

namespace htrner {

// Three identical planes (CHW), values in [0, 1], ink close to 1.
struct ImageTensor {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

// Aspect-preserving bilinear resize into a target canvas, background padding
// on the right and bottom, inversion to [0, 1], and channel triplication.
inline ImageTensor preprocess(const GrayImage& img, int target_h, int target_w) {
  if (img.width <= 0 || img.height <= 0 || img.pixels.empty()) throw ShapeError("preprocess: empty image");
  if (target_h <= 0 || target_w <= 0 || target_h % 32 || target_w % 32)
    throw ShapeError("preprocess: target size must be a positive multiple of 32");
  const double s = std::min(static_cast<double>(target_h) / img.height, static_cast<double>(target_w) / img.width);
  const int rh = std::clamp(static_cast<int>(std::floor(s * img.height + 1e-9)), 1, target_h);
  const int rw = std::clamp(static_cast<int>(std::floor(s * img.width + 1e-9)), 1, target_w);
  ImageTensor out;
  out.height = target_h;
  out.width = target_w;
  out.data.assign(static_cast<std::size_t>(3) * target_h * target_w, 0.0f);
  const double sy = static_cast<double>(img.height) / rh, sx = static_cast<double>(img.width) / rw;
  for (int y = 0; y < rh; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < rw; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      const double v = (1 - wy) * ((1 - wx) * img.at(x0, y0) + wx * img.at(x1, y0)) + wy * ((1 - wx) * img.at(x0, y1) + wx * img.at(x1, y1));
      const float ink = static_cast<float>(1.0 - v / 255.0);
      for (int c = 0; c < 3; ++c) out.data[(static_cast<std::size_t>(c) * target_h + y) * target_w + x] = ink;
    }
  }
  return out;
}

// Stacks images into an NHWC batch.
template <class T>
Tensor<T> to_batch(const std::vector<const ImageTensor*>& images) {
  require(!images.empty(), "to_batch: empty batch");
  const int h = images[0]->height, w = images[0]->width;
  Tensor<T> out({static_cast<int>(images.size()), h, w, 3});
  for (std::size_t n = 0; n < images.size(); ++n) {
    require(images[n]->height == h && images[n]->width == w, "to_batch: images differ in size");
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) out[((n * h + y) * w + x) * 3 + c] = static_cast<T>(images[n]->at(c, y, x));
  }
  return out;
}

template <class T>
struct ConvLayer {
  Parameter<T> weight, bias;
  int kernel = 1, stride = 1, pad = 0;
  bool has_bias = false;

  ConvLayer() = default;
  // He fan-in initialization, zero bias.
  ConvLayer(const std::string& name, int in, int out, int k, int s, int p, bool with_bias, Rng& rng)
      : weight(name + ".w", {k * k * in, out}), kernel(k), stride(s), pad(p), has_bias(with_bias) {
    const double std_dev = std::sqrt(2.0 / (k * k * in));
    for (auto& x : weight.value.data) x = static_cast<T>(std_dev * rng.normal());
    if (with_bias) bias = Parameter<T>(name + ".b", {out});
  }

  int out_channels() const { return weight.value.dim(1); }
  Var operator()(Tape<T>& tp, Var x) {
    return ops::conv2d(tp, x, tp.param(weight), has_bias ? std::optional<Var>(tp.param(bias)) : std::optional<Var>(), kernel, stride, pad);
  }
  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&weight);
    if (has_bias) out.push_back(&bias);
  }
};

template <class T>
struct GroupNormLayer {
  Parameter<T> gamma, beta;
  int groups = 1;

  GroupNormLayer() = default;
  GroupNormLayer(const std::string& name, int channels, int g) : gamma(name + ".gamma", {channels}), beta(name + ".beta", {channels}), groups(g) {
    gamma.value.fill(T(1));
  }
  Var operator()(Tape<T>& tp, Var x) { return ops::group_norm(tp, x, tp.param(gamma), tp.param(beta), groups); }
  void collect(std::vector<Parameter<T>*>& out) { out.insert(out.end(), {&gamma, &beta}); }
};

// conv3x3(stride) -> GN -> relu -> conv3x3 -> GN, plus projection shortcut
// when the shape changes.
template <class T>
struct BasicBlock {
  ConvLayer<T> conv1, conv2, proj;
  GroupNormLayer<T> norm1, norm2, proj_norm;
  bool has_proj = false;

  BasicBlock(const std::string& name, int in, int out, int stride, int groups, Rng& rng)
      : conv1(name + ".conv1", in, out, 3, stride, 1, false, rng),
        conv2(name + ".conv2", out, out, 3, 1, 1, false, rng),
        norm1(name + ".norm1", out, groups),
        norm2(name + ".norm2", out, groups),
        has_proj(stride != 1 || in != out) {
    if (has_proj) {
      proj = ConvLayer<T>(name + ".proj", in, out, 1, stride, 0, false, rng);
      proj_norm = GroupNormLayer<T>(name + ".proj_norm", out, groups);
    }
  }
  Var operator()(Tape<T>& tp, Var x) {
    Var h = ops::relu(tp, norm1(tp, conv1(tp, x)));
    h = norm2(tp, conv2(tp, h));
    Var s = has_proj ? proj_norm(tp, proj(tp, x)) : x;
    return ops::relu(tp, ops::add(tp, h, s));
  }
  void collect(std::vector<Parameter<T>*>& out) {
    conv1.collect(out);
    norm1.collect(out);
    conv2.collect(out);
    norm2.collect(out);
    if (has_proj) {
      proj.collect(out);
      proj_norm.collect(out);
    }
  }
};

// 1x1 reduce -> 3x3(stride) -> 1x1 expand (x4), as in 50-layer residual nets.
template <class T>
struct BottleneckBlock {
  ConvLayer<T> conv1, conv2, conv3, proj;
  GroupNormLayer<T> norm1, norm2, norm3, proj_norm;
  bool has_proj = false;

  BottleneckBlock(const std::string& name, int in, int width, int stride, int groups, Rng& rng)
      : conv1(name + ".conv1", in, width, 1, 1, 0, false, rng),
        conv2(name + ".conv2", width, width, 3, stride, 1, false, rng),
        conv3(name + ".conv3", width, 4 * width, 1, 1, 0, false, rng),
        norm1(name + ".norm1", width, groups),
        norm2(name + ".norm2", width, groups),
        norm3(name + ".norm3", 4 * width, groups),
        has_proj(stride != 1 || in != 4 * width) {
    if (has_proj) {
      proj = ConvLayer<T>(name + ".proj", in, 4 * width, 1, stride, 0, false, rng);
      proj_norm = GroupNormLayer<T>(name + ".proj_norm", 4 * width, groups);
    }
  }
  Var operator()(Tape<T>& tp, Var x) {
    Var h = ops::relu(tp, norm1(tp, conv1(tp, x)));
    h = ops::relu(tp, norm2(tp, conv2(tp, h)));
    h = norm3(tp, conv3(tp, h));
    Var s = has_proj ? proj_norm(tp, proj(tp, x)) : x;
    return ops::relu(tp, ops::add(tp, h, s));
  }
  void collect(std::vector<Parameter<T>*>& out) {
    for (auto* c : {&conv1, &conv2, &conv3}) c->collect(out);
    for (auto* n : {&norm1, &norm2, &norm3}) n->collect(out);
    if (has_proj) {
      proj.collect(out);
      proj_norm.collect(out);
    }
  }
};

template <class T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.kind == "resnet50") {
      const int groups = 32;
      stem_ = ConvLayer<T>("backbone.stem", 3, 64, 7, 2, 3, false, rng);
      stem_norm_ = GroupNormLayer<T>("backbone.stem_norm", 64, groups);
      const int depth[4] = {3, 4, 6, 3}, width[4] = {64, 128, 256, 512};
      int in = 64;
      for (int s = 0; s < 4; ++s)
        for (int b = 0; b < depth[s]; ++b) {
          bottlenecks_.emplace_back("backbone.stage" + std::to_string(s + 1) + "." + std::to_string(b), in, width[s],
                                    (b == 0 && s > 0) ? 2 : 1, groups, rng);
          in = 4 * width[s];
        }
    } else {
      stem_ = ConvLayer<T>("backbone.stem", 3, cfg.stem_channels, 3, 2, 1, false, rng);
      stem_norm_ = GroupNormLayer<T>("backbone.stem_norm", cfg.stem_channels, cfg.norm_groups);
      int in = cfg.stem_channels;
      for (int s = 0; s < 4; ++s)
        for (int b = 0; b < cfg.blocks_per_stage; ++b) {
          const int out = cfg.stage_channels[static_cast<std::size_t>(s)];
          blocks_.emplace_back("backbone.stage" + std::to_string(s + 1) + "." + std::to_string(b), in, out, b == 0 ? 2 : 1,
                               cfg.norm_groups, rng);
          in = out;
        }
    }
  }

  int output_channels() const { return cfg_.output_channels(); }

  // x: [N, H, W, 3] with H, W divisible by 32 -> [N, H/32, W/32, C_b].
  Var operator()(Tape<T>& tp, Var x) {
    const auto& s = tp.shape(x);
    if (s.size() != 4 || s[3] != 3) throw ShapeError("backbone: expected [N, H, W, 3], got " + shape_str(s));
    if (s[1] % 32 || s[2] % 32)
      throw ShapeError("backbone: input " + std::to_string(s[1]) + "x" + std::to_string(s[2]) + " is not divisible by 32");
    Var h = ops::relu(tp, stem_norm_(tp, stem_(tp, x)));
    if (!bottlenecks_.empty()) h = ops::max_pool2d(tp, h, 3, 2, 1);
    for (auto& b : blocks_) h = b(tp, h);
    for (auto& b : bottlenecks_) h = b(tp, h);
    return h;
  }

  void collect(std::vector<Parameter<T>*>& out) {
    stem_.collect(out);
    stem_norm_.collect(out);
    for (auto& b : blocks_) b.collect(out);
    for (auto& b : bottlenecks_) b.collect(out);
  }

 private:
  BackboneConfig cfg_;
  ConvLayer<T> stem_;
  GroupNormLayer<T> stem_norm_;
  std::vector<BasicBlock<T>> blocks_;
  std::vector<BottleneckBlock<T>> bottlenecks_;
};

// 1x1 convolution from the backbone width to the transformer width.
template <class T>
struct ChannelCompressor {
  ConvLayer<T> conv;

  ChannelCompressor() = default;
  ChannelCompressor(int in, int hidden, Rng& rng) : conv("compress", in, hidden, 1, 1, 0, true, rng) {}
  Var operator()(Tape<T>& tp, Var f) { return conv(tp, f); }
  void collect(std::vector<Parameter<T>*>& out) { conv.collect(out); }
};

// Single-image convenience form: ImageTensor -> [H/32, W/32, C_b].
template <class T>
Tensor<T> extract_features(const ImageTensor& x, Backbone<T>& net) {
  if (x.height % 32 || x.width % 32) throw ShapeError("extract_features: image size not divisible by 32");
  Tape<T> tp(false);
  Var in = tp.constant(to_batch<T>({&x}));
  const auto& out = tp.value(net(tp, in));
  return out.reshaped({out.dim(1), out.dim(2), out.dim(3)});
}

// f: [H', W', C_b] -> [H', W', hidden].
template <class T>
Tensor<T> compress_channels(const Tensor<T>& f, ChannelCompressor<T>& c) {
  require(f.rank() == 3, "compress_channels: expected [H', W', C]");
  Tape<T> tp(false);
  Var in = tp.constant(f.reshaped({1, f.dim(0), f.dim(1), f.dim(2)}));
  const auto& out = tp.value(c(tp, in));
  return out.reshaped({out.dim(1), out.dim(2), out.dim(3)});
}

}  // namespace htrner
