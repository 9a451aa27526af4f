#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace htrner;
using namespace htrner::testing;

namespace {

GrayImage blank(int h, int w, std::uint8_t value = 255) {
  GrayImage g;
  g.height = h;
  g.width = w;
  g.pixels.assign(static_cast<std::size_t>(h) * w, value);
  return g;
}

GrayImage random_image(int h, int w, Rng& rng) {
  GrayImage g = blank(h, w);
  for (auto& p : g.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return g;
}

Tensor<double> random_tensor(std::vector<int> shape, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (auto& x : t.data) x = rng.normal();
  return t;
}

BackboneConfig small_backbone() {
  BackboneConfig b;
  b.stem_channels = 4;
  b.stage_channels = {4, 4, 8, 8};
  b.norm_groups = 2;
  return b;
}

// Checks every sampled entry of the given parameters against central
// differences of sum(out * probe).
template <class Forward>
double worst_gradient_error(const std::vector<Parameter<double>*>& params, Forward forward, const Tensor<double>& probe, int per_param) {
  Rng rng(5);
  auto loss = [&](bool with_backward) {
    Tape<double> tp(with_backward);
    Var l = ops::weighted_sum(tp, forward(tp), probe);
    if (with_backward) tp.backward(l);
    return tp.value(l)[0];
  };
  const auto entries = finite_difference_check(params, loss, rng, per_param);
  EXPECT_FALSE(entries.empty());
  double worst = 0;
  for (const auto& e : entries) worst = std::max(worst, e.rel_error);
  return worst;
}

}  // namespace

TEST(Preprocess, SameSizeIsIdentity) {
  Rng rng(1);
  const GrayImage img = random_image(256, 1024, rng);
  const ImageTensor t = preprocess(img, 256, 1024);
  for (int y = 0; y < 256; y += 7)
    for (int x = 0; x < 1024; x += 13) ASSERT_FLOAT_EQ(t.at(0, y, x), static_cast<float>(1.0 - img.at(x, y) / 255.0));
}

TEST(Preprocess, DoubleScaleFillsCanvas) {
  GrayImage img = blank(128, 512);
  for (int y = 0; y < 128; ++y)
    for (int x = 0; x < 512; ++x) img.pixels[static_cast<std::size_t>(y) * 512 + x] = (x / 4 + y / 4) % 2 ? 0 : 255;
  const ImageTensor t = preprocess(img, 256, 1024);
  EXPECT_EQ(t.height, 256);
  EXPECT_EQ(t.width, 1024);
  // Interior of each 8x8 upsampled cell keeps the source value; no padding rows.
  for (int cy = 0; cy < 32; ++cy)
    for (int cx = 0; cx < 128; ++cx) {
      const float want = (cx + cy) % 2 ? 1.0f : 0.0f;
      ASSERT_FLOAT_EQ(t.at(0, cy * 8 + 4, cx * 8 + 4), want);
    }
  EXPECT_FLOAT_EQ(t.at(0, 255, 1023), (127 / 4 + 511 / 4) % 2 ? 1.0f : 0.0f);
}

TEST(Preprocess, BackgroundIsZeroAndChannelsMatch) {
  const ImageTensor t = preprocess(blank(50, 70), 64, 128);
  for (float v : t.data) ASSERT_EQ(v, 0.0f);
  Rng rng(2);
  const ImageTensor u = preprocess(random_image(40, 90, rng), 64, 256);
  for (int y = 0; y < u.height; ++y)
    for (int x = 0; x < u.width; ++x) {
      ASSERT_GE(u.at(0, y, x), 0.0f);
      ASSERT_LE(u.at(0, y, x), 1.0f);
      ASSERT_EQ(u.at(0, y, x), u.at(1, y, x));
      ASSERT_EQ(u.at(0, y, x), u.at(2, y, x));
    }
}

TEST(Preprocess, AspectPreservedWithPadding) {
  // 32x64 into 64x256: scale 2, content fills 64x128, right half padded.
  const ImageTensor t = preprocess(blank(32, 64, 0), 64, 256);
  EXPECT_EQ(t.at(0, 10, 100), 1.0f);
  EXPECT_EQ(t.at(0, 10, 127), 1.0f);
  EXPECT_EQ(t.at(0, 10, 128), 0.0f);
  EXPECT_EQ(t.at(0, 63, 255), 0.0f);
}

TEST(Preprocess, RejectsBadTarget) {
  EXPECT_THROW(preprocess(blank(10, 10), 60, 64), ShapeError);
  EXPECT_THROW(preprocess(GrayImage{}, 64, 64), ShapeError);
}

TEST(Conv2d, MatchesLoopOracle) {
  Rng rng(3);
  const int n = 2, h = 7, w = 6, c = 3, o = 4, k = 3, stride = 2, pad = 1;
  const auto x = random_tensor({n, h, w, c}, rng);
  const auto wt = random_tensor({k * k * c, o}, rng);
  const auto b = random_tensor({o}, rng);
  Tape<double> tp(false);
  const auto& y = tp.value(ops::conv2d(tp, tp.constant(x), tp.constant(wt), tp.constant(b), k, stride, pad));
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  ASSERT_EQ(y.shape, (std::vector<int>{n, ho, wo, o}));
  double worst = 0;
  for (int s = 0; s < n; ++s)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox)
        for (int oc = 0; oc < o; ++oc) {
          double acc = b[oc];
          for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw)
              for (int ic = 0; ic < c; ++ic) {
                const int iy = oy * stride - pad + kh, ix = ox * stride - pad + kw;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += x[((static_cast<std::size_t>(s) * h + iy) * w + ix) * c + ic] *
                       wt[static_cast<std::size_t>((kh * k + kw) * c + ic) * o + oc];
              }
          worst = std::max(worst, std::abs(acc - y[((static_cast<std::size_t>(s) * ho + oy) * wo + ox) * o + oc]));
        }
  EXPECT_LT(worst, 1e-12);
}

TEST(Backbone, ShapeLaw) {
  Rng rng(4);
  Backbone<float> net(small_backbone(), rng);
  for (auto [h, w] : {std::pair{64, 64}, std::pair{128, 512}, std::pair{256, 1024}, std::pair{32, 96}}) {
    ImageTensor x;
    x.height = h;
    x.width = w;
    x.data.assign(static_cast<std::size_t>(3) * h * w, 0.5f);
    const auto f = extract_features(x, net);
    EXPECT_EQ(f.shape, (std::vector<int>{h / 32, w / 32, 8})) << h << "x" << w;
    for (float v : f.data) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(Backbone, Resnet50Shape) {
  BackboneConfig b;
  b.kind = "resnet50";
  Rng rng(4);
  Backbone<float> net(b, rng);
  ImageTensor x;
  x.height = 64;
  x.width = 64;
  x.data.assign(static_cast<std::size_t>(3) * 64 * 64, 0.25f);
  EXPECT_EQ(extract_features(x, net).shape, (std::vector<int>{2, 2, 2048}));
}

TEST(Backbone, NonDivisibleInputRejected) {
  Rng rng(4);
  Backbone<float> net(small_backbone(), rng);
  ImageTensor x;
  x.height = 48;
  x.width = 64;
  x.data.assign(static_cast<std::size_t>(3) * 48 * 64, 0.0f);
  EXPECT_THROW(extract_features(x, net), ShapeError);
}

TEST(Backbone, GradientMatchesFiniteDifference) {
  Rng rng(6);
  Backbone<double> net(small_backbone(), rng);
  const auto x = random_tensor({2, 32, 64, 3}, rng);
  const auto probe = random_tensor({2, 1, 2, 8}, rng);
  std::vector<Parameter<double>*> params;
  net.collect(params);
  std::vector<Parameter<double>*> convs;
  for (auto* p : params)
    if (p->name.size() > 2 && p->name.substr(p->name.size() - 2) == ".w") convs.push_back(p);
  ASSERT_GE(convs.size(), 5u);
  const double worst = worst_gradient_error(convs, [&](Tape<double>& tp) { return net(tp, tp.constant(x)); }, probe, 3);
  EXPECT_LE(worst, 1e-4);
}

TEST(Compressor, Shape) {
  Rng rng(7);
  ChannelCompressor<float> c(512, 256, rng);
  Tensor<float> f({3, 5, 512}, 0.1f);
  EXPECT_EQ(compress_channels(f, c).shape, (std::vector<int>{3, 5, 256}));
}

TEST(Compressor, IdentityKernel) {
  Rng rng(8);
  ChannelCompressor<double> c(6, 6, rng);
  c.conv.weight.value.fill(0.0);
  for (int i = 0; i < 6; ++i) c.conv.weight.value[static_cast<std::size_t>(i) * 6 + i] = 1.0;
  c.conv.bias.value.fill(0.0);
  const auto f = random_tensor({2, 3, 6}, rng);
  EXPECT_EQ(compress_channels(f, c).data, f.data);
}

TEST(Compressor, GradientMatchesFiniteDifference) {
  Rng rng(9);
  ChannelCompressor<double> c(6, 4, rng);
  for (auto& b : c.conv.bias.value.data) b = rng.normal();
  const auto x = random_tensor({1, 2, 3, 6}, rng);
  const auto probe = random_tensor({1, 2, 3, 4}, rng);
  std::vector<Parameter<double>*> params;
  c.collect(params);
  EXPECT_LE(worst_gradient_error(params, [&](Tape<double>& tp) { return c(tp, tp.constant(x)); }, probe, 8), 1e-4);
}

TEST(Backbone, AllParametersReceiveGradient) {
  Rng rng(10);
  Backbone<double> net(small_backbone(), rng);
  const auto x = random_tensor({1, 64, 64, 3}, rng);
  const auto probe = random_tensor({1, 2, 2, 8}, rng);
  std::vector<Parameter<double>*> params;
  net.collect(params);
  for (auto* p : params) p->zero_grad();
  Tape<double> tp(true);
  tp.backward(ops::weighted_sum(tp, net(tp, tp.constant(x)), probe));
  for (auto* p : params) {
    double s = 0;
    for (double g : p->grad.data) s += std::abs(g);
    EXPECT_GT(s, 0.0) << p->name;
  }
}
