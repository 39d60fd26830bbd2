#include <gtest/gtest.h>

#include <Eigen/SVD>
#include <algorithm>

#include "dualsr/diffusion.hpp"
#include "dualsr/model.hpp"
#include "test_util.hpp"

using namespace dualsr;
namespace o = dualsr::testing::oracle;
using dualsr::testing::random_tensor;
using dualsr::testing::tiny_model;

namespace {

double silu(double x) { return x / (1.0 + std::exp(-x)); }

Tensor<double> upsample2(const Tensor<double>& x) {
  Tensor<double> out({x.dim(0), x.dim(1), x.dim(2) * 2, x.dim(3) * 2});
  for (int n = 0; n < x.dim(0); ++n)
    for (int c = 0; c < x.dim(1); ++c)
      for (int i = 0; i < out.dim(2); ++i)
        for (int j = 0; j < out.dim(3); ++j) out.at(n, c, i, j) = x.at(n, c, i / 2, j / 2);
  return out;
}

struct OracleEncoded {
  Tensor<double> latent;
  std::vector<Tensor<double>> skips;
};

OracleEncoded encode_oracle(const ParamStore<double>& s, const Tensor<double>& img) {
  OracleEncoded e;
  Tensor<double> h = o::map(img, [](double v) { return 2 * v - 1; });
  for (int i = 0; i < 3; ++i) {
    h = o::map(o::conv(s, "diffusion.vae.enc" + std::to_string(i), h, 2), silu);
    e.skips.push_back(h);
  }
  e.latent = o::conv(s, "diffusion.vae.enc_out", h);
  return e;
}

Tensor<double> decode_oracle(const ParamStore<double>& s, const Tensor<double>& z, const std::vector<Tensor<double>>& k) {
  auto skip = [&](int i) { return o::conv(s, "diffusion.vae.skip" + std::to_string(i), k[i]); };
  Tensor<double> h = o::add(o::map(o::conv(s, "diffusion.vae.dec_in", z), silu), skip(2));
  h = o::add(o::map(o::conv(s, "diffusion.vae.dec2", upsample2(h)), silu), skip(1));
  h = o::add(o::map(o::conv(s, "diffusion.vae.dec1", upsample2(h)), silu), skip(0));
  h = o::map(o::conv(s, "diffusion.vae.dec0", upsample2(h)), silu);
  return o::map(o::conv(s, "diffusion.vae.dec_out", h), [](double v) { return std::clamp(v + 0.5, 0.0, 1.0); });
}

ParamStore<double> vae_store(const ModelConfig& cfg) {
  ParamStore<double> s;
  diffusion::register_vae_params(s, cfg);
  return s;
}

int numeric_rank(const Tensor<double>& m, int rows, double tol) {
  Eigen::MatrixXd a(rows, static_cast<int>(m.size()) / rows);
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) a(i, j) = m[static_cast<std::size_t>(i * a.cols() + j)];
  const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(a).singularValues();
  int r = 0;
  for (int i = 0; i < sv.size(); ++i) r += sv[i] > tol ? 1 : 0;
  return r;
}

}  // namespace

TEST(VaeEncode, ShapesSkipsAndDeterminism) {
  const auto cfg = tiny_model();
  const auto s = vae_store(cfg);
  const auto img = random_tensor<double>({1, 3, 64, 64}, 1, 0.0, 1.0);
  const auto a = diffusion::vae_encode(s, Var<double>(img));
  const auto b = diffusion::vae_encode(s, Var<double>(img));
  EXPECT_EQ(a.latent.shape(), (Shape{1, cfg.latent_channels, 8, 8}));
  ASSERT_EQ(a.skips.size(), 3u);
  EXPECT_EQ(a.skips[0].dim(2), 32);
  EXPECT_EQ(a.skips[2].dim(2), 8);
  EXPECT_EQ(a.latent.value(), b.latent.value());
}

TEST(VaeEncode, MatchesStraightLineOracle) {
  const auto cfg = tiny_model();
  auto s = vae_store(cfg);
  dualsr::testing::randomize(s, 2);
  const auto img = random_tensor<double>({2, 3, 32, 32}, 3, 0.0, 1.0);
  const auto got = diffusion::vae_encode(s, Var<double>(img));
  const auto want = encode_oracle(s, img);
  EXPECT_LT(max_abs_diff(got.latent.value(), want.latent), 1e-12);
  for (int i = 0; i < 3; ++i) EXPECT_LT(max_abs_diff(got.skips[i].value(), want.skips[i]), 1e-12);
}

TEST(VaeDecode, ShapeZeroSkipsAtInitAndOracle) {
  const auto cfg = tiny_model();
  auto s = vae_store(cfg);
  const auto img = random_tensor<double>({1, 3, 64, 64}, 4, 0.0, 1.0);
  const auto enc = diffusion::vae_encode(s, Var<double>(img));
  const auto out = diffusion::vae_decode(s, enc.latent, enc.skips).value();
  EXPECT_EQ(out.shape(), (Shape{1, 3, 64, 64}));
  std::vector<Var<double>> zeros;
  for (const auto& k : enc.skips) zeros.emplace_back(Tensor<double>(k.shape()));
  EXPECT_EQ(diffusion::vae_decode(s, enc.latent, zeros).value(), out);
  EXPECT_EQ(diffusion::vae_decode(s, enc.latent, enc.skips).value(), out);

  dualsr::testing::randomize(s, 5);
  const auto e = encode_oracle(s, img);
  std::vector<Var<double>> skips;
  for (const auto& k : e.skips) skips.emplace_back(k);
  EXPECT_LT(max_abs_diff(diffusion::vae_decode(s, Var<double>(e.latent), skips).value(),
                         decode_oracle(s, e.latent, e.skips)),
            1e-12);
}

TEST(Prompt, ConstantAtInitAndDimension) {
  const auto cfg = tiny_model();
  ParamStore<double> s;
  diffusion::register_prompt_params(s, cfg);
  const auto a = diffusion::prompt_embed(s, Var<double>(random_tensor<double>({1, 3, 16, 16}, 6, 0.0, 1.0)));
  const auto b = diffusion::prompt_embed(s, Var<double>(random_tensor<double>({1, 3, 16, 16}, 7, 0.0, 1.0)));
  EXPECT_EQ(a.shape(), (Shape{1, cfg.d_prompt}));
  EXPECT_EQ(a.value(), s.get("diffusion.prompt.constant").value);
  EXPECT_EQ(a.value(), b.value());
}

TEST(Unet, ZeroResidualAtInitAndPyramidIgnored) {
  const auto cfg = tiny_model();
  const auto s = build_generator<double>(cfg);
  const Var<double> z(random_tensor<double>({1, cfg.latent_channels, 8, 8}, 8));
  const Var<double> prompt(random_tensor<double>({1, cfg.d_prompt}, 9));
  guidance::GuidancePyramid<double> pyr;
  for (std::size_t i = 0; i < cfg.guidance_scales.size(); ++i) {
    const int side = 64 / cfg.guidance_scales[i];
    pyr.scales.push_back(cfg.guidance_scales[i]);
    pyr.features.emplace_back(random_tensor<double>({1, cfg.guidance_proj_channels[i], side, side}, 10 + i));
  }
  const auto fm = diffusion::unet_forward(s, cfg, z, cfg.fixed_timestep, prompt, &pyr).value();
  EXPECT_EQ(fm.shape(), z.shape());
  EXPECT_EQ(*std::max_element(fm.storage().begin(), fm.storage().end()), 0.0);
  EXPECT_EQ(*std::min_element(fm.storage().begin(), fm.storage().end()), 0.0);
}

TEST(Unet, ZeroPyramidMatchesGuidancePyramidAtInit) {
  auto cfg = tiny_model();
  auto s = build_generator<double>(cfg);
  // Leave the output head nonzero so the comparison is not trivially zero.
  auto& head = s.get("diffusion.unet.conv_out.weight").value;
  head = random_tensor<double>(head.shape(), 11);
  const auto img = random_tensor<double>({1, 3, 64, 64}, 12, 0.0, 1.0);
  const auto g = guidance::guidance_forward(s, cfg, Var<double>(img));
  const Var<double> z(random_tensor<double>({1, cfg.latent_channels, 8, 8}, 13));
  const Var<double> prompt(random_tensor<double>({1, cfg.d_prompt}, 14));
  guidance::GuidancePyramid<double> zero;
  for (std::size_t i = 0; i < g.pyramid.size(); ++i) {
    zero.scales.push_back(g.pyramid.scales[i]);
    zero.features.emplace_back(Tensor<double>(g.pyramid.features[i].shape()));
  }
  const auto a = diffusion::unet_forward(s, cfg, z, cfg.fixed_timestep, prompt, &g.pyramid).value();
  const auto b = diffusion::unet_forward(s, cfg, z, cfg.fixed_timestep, prompt, &zero).value();
  EXPECT_EQ(a, b);
  EXPECT_GT(max_abs_diff(a, Tensor<double>(a.shape())), 0.0);
}

TEST(LatentSkip, AdditionOracleAndLinearity) {
  const auto x = random_tensor<double>({1, 4, 8, 8}, 30);
  const auto y = random_tensor<double>({1, 4, 8, 8}, 31);
  EXPECT_EQ(diffusion::latent_skip(Var<double>(Tensor<double>(x.shape())), Var<double>(y)).value(), y);
  EXPECT_EQ(diffusion::latent_skip(Var<double>(x), Var<double>(y)).value(), o::add(x, y));
  const double a = 0.75;
  const auto scaled = diffusion::latent_skip(ag::scale(Var<double>(x), a), ag::scale(Var<double>(y), a)).value();
  EXPECT_LT(max_abs_diff(scaled, o::map(o::add(x, y), [&](double v) { return a * v; })), 1e-15);
}

TEST(Lora, ZeroBAndUnitConstruction) {
  const auto w = random_tensor<double>({4, 3, 3, 3}, 40);
  EXPECT_EQ(diffusion::apply_lora(w, Tensor<double>({4, 2}), random_tensor<double>({2, 27}, 41), 1.0), w);
  Tensor<double> b({4, 1}), a({1, 27});
  b[0] = 1.0;
  a[0] = 1.0;
  const auto eff = diffusion::apply_lora(w, b, a, 1.0);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(eff[i] - w[i], i == 0 ? 1.0 : 0.0) << i;
  EXPECT_THROW(diffusion::apply_lora(w, Tensor<double>({3, 1}), a, 1.0), diffusion::LoraError);
}

TEST(Lora, DeltaRankBoundedBySingularValues) {
  for (int r : {1, 4, 8}) {
    const auto w = random_tensor<double>({32, 16, 3, 3}, 50 + r);
    const auto b = random_tensor<double>({32, r}, 60 + r);
    const auto a = random_tensor<double>({r, 144}, 70 + r);
    const auto eff = diffusion::apply_lora(w, b, a, 0.5);
    Tensor<double> delta = eff;
    for (std::size_t i = 0; i < w.size(); ++i) delta[i] -= w[i];
    EXPECT_EQ(numeric_rank(delta, 32, 1e-6), r);
  }
}

TEST(Lora, AttachContract) {
  ModelConfig cfg = tiny_model();
  cfg.unet_widths = {16, 32, 32};
  auto s = build_generator<double>(cfg);
  const auto before = s.entries();
  const auto adapters = diffusion::attach_lora(s, cfg);
  ASSERT_FALSE(adapters.empty());
  bool saw_unet = false, saw_vae = false;
  for (const auto& ad : adapters) {
    const bool unet = ad.base_name.rfind("diffusion.unet.", 0) == 0;
    EXPECT_EQ(ad.rank, unet ? 8 : 4) << ad.base_name;
    EXPECT_LE(2 * ad.rank, std::min(ad.rows, ad.cols));
    (unet ? saw_unet : saw_vae) = true;
  }
  EXPECT_TRUE(saw_unet);
  EXPECT_TRUE(saw_vae);
  for (const auto& [name, p] : s.entries()) {
    const bool base = p.group == ParamGroup::vae_base || p.group == ParamGroup::unet_base;
    EXPECT_EQ(p.frozen, base) << name;
    if (before.count(name)) EXPECT_EQ(p.value, before.at(name).value) << name;
  }
  EXPECT_THROW(diffusion::attach_lora(s, cfg), diffusion::LoraError);
}

TEST(Lora, ForwardUnchangedByAttachmentAndMatchesMergedWeights) {
  const auto cfg = tiny_model();
  auto s = build_generator<double>(cfg);
  dualsr::testing::randomize(s, 80, 0.2);
  const auto img = random_tensor<double>({1, 3, 32, 32}, 81, 0.0, 1.0);
  const auto plain = generator_forward(s, cfg, Var<double>(img)).r1.value();
  s.release_graph();
  diffusion::attach_lora(s, cfg);
  EXPECT_EQ(generator_forward(s, cfg, Var<double>(img)).r1.value(), plain);

  for (auto& [name, p] : s.entries())
    if (p.group == ParamGroup::lora) p.value = random_tensor<double>(p.value.shape(), name.size() + 90, -0.2, 0.2);
  s.release_graph();
  const auto adapted = generator_forward(s, cfg, Var<double>(img)).r1.value();
  ParamStore<double> merged;
  const auto eff = diffusion::effective_weights(s);
  for (const auto& [name, p] : s.entries()) {
    if (p.group == ParamGroup::lora) continue;
    merged.add(name, eff.count(name) ? eff.at(name) : p.value, p.group, p.frozen);
  }
  EXPECT_LT(max_abs_diff(generator_forward(merged, cfg, Var<double>(img)).r1.value(), adapted), 1e-12);
}

TEST(Generator, IdentityAtInitForEveryAblation) {
  for (auto ab : {Ablation::baseline, Ablation::long_skip, Ablation::guidance, Ablation::full}) {
    const auto cfg = tiny_model(ab);
    const auto s = build_generator<double>(cfg);
    const auto img = random_tensor<double>({1, 3, 32, 32}, 100, 0.0, 1.0);
    const auto out = generator_forward(s, cfg, Var<double>(img));
    s.release_graph();
    const auto enc = diffusion::vae_encode(s, Var<double>(img));
    const auto rec = diffusion::vae_decode(s, enc.latent, enc.skips).value();
    if (ab == Ablation::baseline) {
      // Without the long skip the decoder sees F_m, which is zero at init.
      std::vector<Var<double>> skips = enc.skips;
      EXPECT_EQ(out.r1.value(), diffusion::vae_decode(s, Var<double>(Tensor<double>(enc.latent.shape())), skips).value());
    } else {
      EXPECT_EQ(out.r1.value(), rec) << to_string(ab);
    }
    if (cfg.has_guidance()) EXPECT_EQ(out.r2.value(), img);
    EXPECT_EQ(out.r2.defined(), cfg.has_guidance());
  }
}

TEST(Generator, ComposedOracleAndDeterminism) {
  const auto cfg = tiny_model();
  auto s = build_generator<double>(cfg);
  dualsr::testing::randomize(s, 110, 0.2);
  const auto img = random_tensor<double>({1, 3, 32, 32}, 111, 0.0, 1.0);
  const auto out = generator_forward(s, cfg, Var<double>(img));
  s.release_graph();

  const auto g = guidance::guidance_forward(s, cfg, Var<double>(img));
  const auto enc = encode_oracle(s, img);
  const auto prompt = diffusion::prompt_embed(s, Var<double>(img));
  const auto fm = diffusion::unet_forward(s, cfg, Var<double>(enc.latent), cfg.fixed_timestep, prompt, &g.pyramid);
  const auto r1 = decode_oracle(s, o::add(fm.value(), enc.latent), enc.skips);
  EXPECT_LT(max_abs_diff(out.r1.value(), r1), 1e-10);
  EXPECT_LT(max_abs_diff(out.residual.value(), fm.value()), 1e-12);
  s.release_graph();
  EXPECT_EQ(generator_forward(s, cfg, Var<double>(img)).r1.value(), out.r1.value());
}

TEST(Generator, BaselineHasNoGuidanceParameters) {
  const auto s = build_generator<float>(tiny_model(Ablation::baseline));
  for (const auto& [name, p] : s.entries()) {
    EXPECT_NE(name.rfind("guidance.", 0), 0u) << name;
    EXPECT_EQ(name.find(".fuse"), std::string::npos) << name;
  }
  EXPECT_THROW(generator_forward(s, tiny_model(Ablation::baseline), Var<float>(Tensor<float>({1, 3, 20, 20}))),
               ShapeError);
}
