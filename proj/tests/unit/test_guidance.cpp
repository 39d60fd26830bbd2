#include <gtest/gtest.h>

#include <algorithm>

#include "dualsr/guidance.hpp"
#include "test_util.hpp"

using namespace dualsr;
namespace o = dualsr::testing::oracle;
using dualsr::testing::random_tensor;

namespace {

ModelConfig guidance_config(int blocks = 2, int fcas = 2) {
  ModelConfig c = dualsr::testing::tiny_model();
  c.base_channels = 3;
  c.guidance_blocks = blocks;
  c.fca_per_frb = fcas;
  c.guidance_scales = {8, 16, 32};
  c.guidance_proj_channels = {5, 6, 7};
  return c;
}

ParamStore<double> guidance_store(const ModelConfig& cfg) {
  ParamStore<double> s;
  guidance::register_params(s, cfg);
  return s;
}

Tensor<double> fca_oracle(const ParamStore<double>& s, const std::string& p, const Tensor<double>& f) {
  const auto pooled = o::avg_pool(o::map(o::conv(s, p + ".conv1", f), o::gelu));
  const auto gate = o::map(o::conv(s, p + ".attn_conv", pooled), o::sigmoid);
  return o::add(f, o::conv(s, p + ".conv_out", o::scale_channels(f, gate)));
}

Tensor<double> unshuffle_oracle(const Tensor<double>& x, int s) {
  const int C = x.dim(1), H = x.dim(2) / s, W = x.dim(3) / s;
  Tensor<double> out({x.dim(0), C * s * s, H, W});
  for (int n = 0; n < x.dim(0); ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < s; ++j)
          for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) out.at(n, c * s * s + i * s + j, h, w) = x.at(n, c, h * s + i, w * s + j);
  return out;
}

struct OracleGuidance {
  Tensor<double> r2;
  Tensor<double> fr;
  std::vector<Tensor<double>> pyramid;
};

OracleGuidance guidance_oracle(const ParamStore<double>& s, const ModelConfig& cfg, const Tensor<double>& img) {
  Tensor<double> x = o::conv(s, "guidance.transition", o::conv(s, "guidance.shallow", img));
  for (int i = 0; i < cfg.guidance_blocks; ++i) {
    Tensor<double> chain = x;
    for (int j = 0; j < cfg.fca_per_frb; ++j)
      chain = fca_oracle(s, "guidance.frb" + std::to_string(i) + ".fca" + std::to_string(j), chain);
    x = chain;
  }
  const auto attn = o::map(o::conv(s, "guidance.ign.attn2", o::map(o::conv(s, "guidance.ign.attn1", x), o::gelu)),
                           o::sigmoid);
  const auto fr = o::add(x, o::conv(s, "guidance.ign.fuse", o::mul(attn, o::conv(s, "guidance.ign.value", x))));
  auto r2 = o::map(o::add(o::conv(s, "guidance.ign.to_image", fr), img),
                   [](double v) { return std::clamp(v, 0.0, 1.0); });
  OracleGuidance out{r2, fr, {}};
  for (int sc : cfg.guidance_scales)
    out.pyramid.push_back(o::conv(s, "guidance.proj" + std::to_string(sc), unshuffle_oracle(fr, sc)));
  return out;
}

}  // namespace

TEST(Shallow, ShapeLinearityAndReceptiveField) {
  ModelConfig cfg = guidance_config();
  cfg.base_channels = 16;
  auto s = guidance_store(cfg);
  const auto out = guidance::extract_shallow_features(s, Var<double>(random_tensor<double>({1, 3, 64, 64}, 1)));
  EXPECT_EQ(out.shape(), (Shape{1, 16, 64, 64}));

  s.get("guidance.shallow.bias").value.fill(0.0);
  s.release_graph();
  const auto zero = guidance::extract_shallow_features(s, Var<double>(Tensor<double>({1, 3, 8, 8}))).value();
  EXPECT_EQ(*std::max_element(zero.storage().begin(), zero.storage().end()), 0.0);

  Tensor<double> delta({1, 3, 8, 8});
  delta.at(0, 1, 3, 5) = 1.0;
  const auto d = guidance::extract_shallow_features(s, Var<double>(delta)).value();
  for (int c = 0; c < 16; ++c)
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j)
        if (std::abs(i - 3) > 1 || std::abs(j - 5) > 1) EXPECT_EQ(d.at(0, c, i, j), 0.0);
}

TEST(Fca, IdentityAtInit) {
  const auto cfg = guidance_config();
  const auto s = guidance_store(cfg);
  const auto f = random_tensor<double>({2, 6, 8, 8}, 2);
  EXPECT_EQ(guidance::fca_block(s, "guidance.frb0.fca0", Var<double>(f)).value(), f);
}

TEST(Fca, ConstantInputGateIsPerChannelScaling) {
  const auto cfg = guidance_config();
  auto s = guidance_store(cfg);
  dualsr::testing::randomize(s, 3);
  Tensor<double> f({1, 6, 4, 4});
  for (int c = 0; c < 6; ++c)
    for (int i = 0; i < 16; ++i) f[c * 16 + i] = 0.1 * (c + 1);
  EXPECT_EQ(ag::global_avg_pool(Var<double>(f)).value(), o::avg_pool(f));
  EXPECT_DOUBLE_EQ(o::avg_pool(f)[2], 0.3);
  // The gate then reduces to one scalar per channel applied to F.
  const auto inner = o::map(o::conv(s, "guidance.frb0.fca0.conv1", f), o::gelu);
  const auto gate = o::map(o::conv(s, "guidance.frb0.fca0.attn_conv", o::avg_pool(inner)), o::sigmoid);
  Tensor<double> scaled = f;
  for (int c = 0; c < 6; ++c)
    for (int i = 0; i < 16; ++i) scaled[c * 16 + i] = 0.1 * (c + 1) * gate[c];
  const auto want = o::add(f, o::conv(s, "guidance.frb0.fca0.conv_out", scaled));
  const auto got = guidance::fca_block(s, "guidance.frb0.fca0", Var<double>(f)).value();
  EXPECT_LT(max_abs_diff(got, want), 1e-12);
}

TEST(Fca, RandomInputMatchesStraightLineOracle) {
  const auto cfg = guidance_config();
  auto s = guidance_store(cfg);
  dualsr::testing::randomize(s, 4);
  const auto f = random_tensor<double>({1, 6, 8, 8}, 5);
  const auto got = guidance::fca_block(s, "guidance.frb0.fca0", Var<double>(f)).value();
  EXPECT_LT(max_abs_diff(got, fca_oracle(s, "guidance.frb0.fca0", f)), 1e-12);
}

TEST(Frb, IdentityAtInitAndSingleFcaReduction) {
  const auto cfg = guidance_config(1, 1);
  auto s = guidance_store(cfg);
  const auto f = random_tensor<double>({1, 6, 8, 8}, 6);
  EXPECT_EQ(guidance::frb(s, "guidance.frb0", Var<double>(f), 1).value(), f);
  dualsr::testing::randomize(s, 7);
  const auto got = guidance::frb(s, "guidance.frb0", Var<double>(f), 1).value();
  EXPECT_LT(max_abs_diff(got, fca_oracle(s, "guidance.frb0.fca0", f)), 1e-12);
}

TEST(Frb, RandomChainMatchesSequentialOracle) {
  const auto cfg = guidance_config(1, 3);
  auto s = guidance_store(cfg);
  dualsr::testing::randomize(s, 8);
  const auto f = random_tensor<double>({2, 6, 8, 8}, 9);
  Tensor<double> want = f;
  for (int j = 0; j < 3; ++j) want = fca_oracle(s, "guidance.frb0.fca" + std::to_string(j), want);
  EXPECT_LT(max_abs_diff(guidance::frb(s, "guidance.frb0", Var<double>(f), 3).value(), want), 1e-12);
}

TEST(FrgNet, ShapeDegenerateDepthAndIdentityAtInit) {
  ModelConfig cfg = guidance_config();
  cfg.base_channels = 16;
  auto s = guidance_store(cfg);
  const auto f0 = random_tensor<double>({1, 16, 64, 64}, 10);
  const auto out = guidance::frg_net(s, cfg, Var<double>(f0)).value();
  EXPECT_EQ(out.shape(), (Shape{1, 32, 64, 64}));
  EXPECT_EQ(out, o::conv(s, "guidance.transition", f0));

  cfg.guidance_blocks = 0;
  auto s0 = guidance_store(cfg);
  dualsr::testing::randomize(s0, 11);
  EXPECT_LT(max_abs_diff(guidance::frg_net(s0, cfg, Var<double>(f0)).value(), o::conv(s0, "guidance.transition", f0)),
            1e-12);
}

TEST(Ign, IdentityAtInitAndAttentionRange) {
  const auto cfg = guidance_config();
  auto s = guidance_store(cfg);
  const auto deep = random_tensor<double>({1, 6, 8, 8}, 12);
  const auto img = random_tensor<double>({1, 3, 8, 8}, 13, 0.0, 1.0);
  const auto r = guidance::ign(s, Var<double>(deep), Var<double>(img));
  EXPECT_EQ(r.features.value(), deep);
  EXPECT_EQ(r.refined_image.value(), img);
  for (double a : r.attention.value().storage()) {
    EXPECT_GT(a, 0.0);
    EXPECT_LT(a, 1.0);
  }
}

TEST(PixelUnshuffle, ShapesAndIdentity) {
  const auto x = random_tensor<double>({1, 32, 64, 64}, 14);
  EXPECT_EQ(guidance::pixel_unshuffle(Var<double>(x), 8).shape(), (Shape{1, 2048, 8, 8}));
  EXPECT_EQ(guidance::pixel_unshuffle(Var<double>(x), 1).value(), x);
  const auto y = random_tensor<double>({2, 3, 16, 8}, 15);
  EXPECT_EQ(guidance::pixel_unshuffle(Var<double>(y), 4).value(), unshuffle_oracle(y, 4));
}

TEST(Pyramid, ScalesSizesAndChannels) {
  auto cfg = guidance_config();
  const auto s = guidance_store(cfg);
  const auto fr = random_tensor<double>({1, 6, 64, 64}, 16);
  const auto pyr = guidance::build_pyramid(s, cfg, Var<double>(fr));
  ASSERT_EQ(pyr.size(), 3u);
  EXPECT_EQ(pyr.scales, cfg.guidance_scales);
  EXPECT_EQ(pyr.at(8).shape(), (Shape{1, 5, 8, 8}));
  EXPECT_EQ(pyr.at(16).shape(), (Shape{1, 6, 4, 4}));
  EXPECT_EQ(pyr.at(32).shape(), (Shape{1, 7, 2, 2}));

  cfg.guidance_scales = {8};
  cfg.guidance_proj_channels = {5};
  const auto s1 = guidance_store(cfg);
  EXPECT_EQ(guidance::build_pyramid(s1, cfg, Var<double>(fr)).size(), 1u);
}

TEST(GuidanceForward, IdentityAtInit) {
  const auto cfg = guidance_config();
  const auto s = guidance_store(cfg);
  const auto img = random_tensor<double>({1, 3, 32, 32}, 17, 0.0, 1.0);
  const auto out = guidance::guidance_forward(s, cfg, Var<double>(img));
  EXPECT_EQ(out.refined_image.value(), img);
  EXPECT_EQ(out.pyramid.scales, cfg.guidance_scales);
}

TEST(GuidanceForward, MatchesStageWiseOracle) {
  const auto cfg = guidance_config();
  auto s = guidance_store(cfg);
  dualsr::testing::randomize(s, 18, 0.2);
  const auto img = random_tensor<double>({1, 3, 32, 32}, 19, 0.0, 1.0);
  const auto got = guidance::guidance_forward(s, cfg, Var<double>(img));
  const auto want = guidance_oracle(s, cfg, img);
  EXPECT_LT(max_abs_diff(got.refined_image.value(), want.r2), 1e-10);
  EXPECT_LT(max_abs_diff(got.features.value(), want.fr), 1e-10);
  for (std::size_t i = 0; i < want.pyramid.size(); ++i)
    EXPECT_LT(max_abs_diff(got.pyramid.features[i].value(), want.pyramid[i]), 1e-10);
}

TEST(GuidanceForward, WithoutIgnFeaturesPassStraightThrough) {
  auto cfg = guidance_config();
  cfg.ablation = Ablation::guidance;
  auto s = guidance_store(cfg);
  dualsr::testing::randomize(s, 20);
  const auto img = random_tensor<double>({1, 3, 32, 32}, 21, 0.0, 1.0);
  const auto out = guidance::guidance_forward(s, cfg, Var<double>(img));
  EXPECT_EQ(out.refined_image.value(), img);
  EXPECT_FALSE(s.contains("guidance.ign.fuse.weight"));
}
