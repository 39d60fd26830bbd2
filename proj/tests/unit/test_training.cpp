#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "dualsr/checkpoint.hpp"
#include "dualsr/degradation.hpp"
#include "dualsr/training.hpp"
#include "test_util.hpp"

using namespace dualsr;
using namespace dualsr::training;
using dualsr::testing::random_tensor;
using dualsr::testing::tiny_model;

namespace {

Var<double> scores(std::initializer_list<double> v) {
  return Var<double>(Tensor<double>({1, 1, 1, static_cast<int>(v.size())}, std::vector<double>(v)));
}

TrainConfig quick_train(int iters = 4) {
  TrainConfig t;
  t.total_iters = iters;
  t.warmup_iters = 1;
  t.lr = 1e-3;
  t.disc_lr = 1e-3;
  t.crop_size = 32;
  return t;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path tiny_dataset(const std::string& name, int n) {
  const auto dir = dualsr::testing::scratch_dir(name);
  std::filesystem::create_directories(dir / "src");
  for (int i = 0; i < 2; ++i)
    write_png(dir / "src" / ("s" + std::to_string(i) + ".png"), degradation::synth_hr_image(64, 64, 3, i));
  degradation::DegradationConfig cfg;
  cfg.crop_size = 32;
  degradation::synth_dataset(dir / "src", dir / "data", n, 5, cfg);
  return dir;
}

}  // namespace

TEST(Mse, ZeroUniformOffsetAndLoopOracle) {
  const auto y = random_tensor<double>({2, 3, 5, 4}, 1);
  EXPECT_EQ(mse_loss(Var<double>(y), Var<double>(y)).item(), 0.0);
  Tensor<double> r = y;
  for (auto& v : r.values()) v += 0.1;
  EXPECT_NEAR(mse_loss(Var<double>(r), Var<double>(y)).item(), 0.03, 1e-12);

  const auto a = random_tensor<double>({2, 3, 5, 4}, 2);
  double want = 0;
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 4; ++j) {
        double sq = 0;
        for (int c = 0; c < 3; ++c) sq += std::pow(a.at(n, c, i, j) - y.at(n, c, i, j), 2);
        want += sq;
      }
  want /= 2 * 5 * 4;
  EXPECT_NEAR(mse_loss(Var<double>(a), Var<double>(y)).item(), want, 1e-12);
}

TEST(Lpips, ZeroSymmetricNonNegative) {
  const auto net = build_perceptual_net<double>(tiny_model());
  const auto a = random_tensor<double>({1, 3, 16, 16}, 3, 0.0, 1.0);
  const auto b = random_tensor<double>({1, 3, 16, 16}, 4, 0.0, 1.0);
  EXPECT_EQ(lpips_loss(net, Var<double>(a), Var<double>(a)).item(), 0.0);
  const double ab = lpips_loss(net, Var<double>(a), Var<double>(b)).item();
  EXPECT_DOUBLE_EQ(ab, lpips_loss(net, Var<double>(b), Var<double>(a)).item());
  EXPECT_GT(ab, 0.0);
  for (const auto& p : net.entries()) EXPECT_TRUE(p.second.frozen) << p.first;
}

TEST(Gan, GeneratorLossArithmetic) {
  EXPECT_NEAR(gan_loss_g(scores({0.5, 0.5, 0.5})).item(), 0.693147, 1e-6);
  EXPECT_NEAR(gan_loss_g(scores({1.0, 1.0})).item(), 0.0, 1e-15);
  EXPECT_NEAR(gan_loss_g(scores({0.25, 0.5})).item(), 1.039721, 1e-6);
  EXPECT_TRUE(std::isfinite(gan_loss_g(scores({0.0})).item()));
}

TEST(Gan, DiscriminatorLossArithmetic) {
  EXPECT_NEAR(gan_loss_d(scores({1.0}), scores({0.0})).item(), 0.0, 1e-6);
  EXPECT_NEAR(gan_loss_d(scores({0.5}), scores({0.5})).item(), 1.386294, 1e-6);
}

TEST(BranchLoss, ArithmeticReductionAndLinearity) {
  EXPECT_NEAR(branch_loss(0.02, 0.1, 0.693147, 1.0, 5.0, 0.5), 0.866574, 1e-6);
  EXPECT_NEAR(branch_loss(0.02, 0.1, 0.693147, TrainConfig{}), 0.866574, 1e-6);
  EXPECT_EQ(branch_loss(0.3, 0.7, 0.9, 1.0, 0.0, 0.0), 0.3);
  EXPECT_NEAR(branch_loss(0.2, 0.4, 0.6, 1, 5, 0.5) - branch_loss(0.1, 0.4, 0.6, 1, 5, 0.5), 0.1, 1e-15);
  EXPECT_THROW(branch_loss(0.1, 0.1, 0.1, 1.0, -1.0, 0.5), std::exception);
}

TEST(FinalLoss, WeightingAndDegenerateCases) {
  TrainConfig t;
  EXPECT_NEAR(final_loss(2.0, 1.0, t), 1.9, 1e-15);
  EXPECT_EQ(final_loss(2.0, 1.0, t), 0.9 * 2.0 + 0.1 * 1.0);
  EXPECT_NEAR(final_loss(1.3, 1.3, t), 1.3, 1e-15);
  t.lambda_d = 1.0;
  t.lambda_g = 0.0;
  EXPECT_EQ(final_loss(2.0, 123.0, t), final_loss(2.0, -5.0, t));
}

TEST(Schedule, WarmupCosineEndpoints) {
  TrainConfig t;
  t.total_iters = 2500;
  EXPECT_EQ(lr_schedule(0, t), 0.0);
  EXPECT_NEAR(lr_schedule(500, t), 5e-5, 1e-12);
  EXPECT_NEAR(lr_schedule(250, t), 2.5e-5, 1e-12);
  EXPECT_NEAR(lr_schedule(1500, t), 2.5e-5, 1e-12);
  EXPECT_NEAR(lr_schedule(2500, t), 0.0, 1e-15);
  EXPECT_THROW(lr_schedule(2501, t), TrainingError);
}

TEST(Discriminator, SharedGradientEqualsSumOfBranchGradients) {
  const auto cfg = tiny_model();
  const auto d = build_discriminator<double>(cfg);
  const Var<double> y(random_tensor<double>({1, 3, 16, 16}, 10, 0.0, 1.0));
  const Var<double> r1(random_tensor<double>({1, 3, 16, 16}, 11, 0.0, 1.0));
  const Var<double> r2(random_tensor<double>({1, 3, 16, 16}, 12, 0.0, 1.0));

  d.release_graph();
  const auto real = discriminator_scores(d, y);
  ag::backward(ag::add(gan_loss_d(real, discriminator_scores(d, r1)), gan_loss_d(real, discriminator_scores(d, r2))));
  const auto joint = d.gradients();

  std::map<std::string, Tensor<double>> summed;
  for (const auto* r : {&r1, &r2}) {
    d.release_graph();
    ag::backward(gan_loss_d(discriminator_scores(d, y), discriminator_scores(d, *r)));
    for (auto& [name, g] : d.gradients()) {
      auto it = summed.find(name);
      if (it == summed.end()) {
        summed.emplace(name, g);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
      }
    }
  }
  ASSERT_EQ(joint.size(), summed.size());
  for (const auto& [name, g] : joint) EXPECT_LT(max_abs_diff(g, summed.at(name)), 1e-6) << name;
}

TEST(Discriminator, UpdateLeavesGeneratorWithoutGradient) {
  const auto cfg = tiny_model();
  auto gen = build_generator<double>(cfg);
  dualsr::testing::randomize(gen, 13, 0.2);
  const auto d = build_discriminator<double>(cfg);
  const auto img = random_tensor<double>({1, 3, 32, 32}, 14, 0.0, 1.0);
  const auto out = generator_forward(gen, cfg, Var<double>(img));
  const auto real = discriminator_scores(d, Var<double>(img));
  ag::backward(ag::add(gan_loss_d(real, discriminator_scores(d, out.r1.detach())),
                       gan_loss_d(real, discriminator_scores(d, out.r2.detach()))));
  for (const auto& [name, g] : gen.gradients()) EXPECT_EQ(max_abs_diff(g, Tensor<double>(g.shape())), 0.0) << name;
}

TEST(Gradients, FinalLossMatchesFiniteDifferences) {
  ModelConfig cfg = tiny_model();
  cfg.base_channels = 2;
  cfg.latent_channels = 2;
  cfg.unet_widths = {8, 8};
  cfg.guidance_scales = {8, 16};
  cfg.guidance_proj_channels = {2, 2};
  auto gen = build_generator<double>(cfg);
  dualsr::testing::randomize(gen, 15, 0.3);
  diffusion::attach_lora(gen, cfg);
  for (auto& [name, p] : gen.entries())
    if (p.group == ParamGroup::lora) p.value = random_tensor<double>(p.value.shape(), name.size(), -0.2, 0.2);
  const auto disc = build_discriminator<double>(cfg);
  const auto net = build_perceptual_net<double>(cfg);
  const TrainConfig tc;
  // Inputs away from 0/1 keep the output clamps inactive.
  const auto x = random_tensor<double>({1, 3, 16, 16}, 16, 0.3, 0.7);
  const auto y = random_tensor<double>({1, 3, 16, 16}, 17, 0.3, 0.7);

  gen.release_graph();
  ag::backward(dualsr::testing::generator_loss(gen, &disc, net, cfg, tc, x, y));
  const auto grads = gen.gradients();

  int checked = 0;
  double worst = 0;
  CounterRng pick(18);
  for (const auto& [name, g] : grads) {
    auto& value = gen.get(name).value;
    const std::size_t i = static_cast<std::size_t>(pick.uniform_int(0, static_cast<int>(value.size()) - 1));
    const double orig = value[i], h = 1e-5;
    value[i] = orig + h;
    gen.release_graph();
    const double up = dualsr::testing::generator_loss(gen, &disc, net, cfg, tc, x, y).item();
    value[i] = orig - h;
    gen.release_graph();
    const double down = dualsr::testing::generator_loss(gen, &disc, net, cfg, tc, x, y).item();
    value[i] = orig;
    const double fd = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(fd - g[i]) / std::max(1e-8, std::abs(fd) + std::abs(g[i])));
    ++checked;
  }
  EXPECT_GT(checked, 20);
  EXPECT_LT(worst, 1e-4);
}

TEST(TrainStep, FrozenBasesUnchangedAndStateAdvances) {
  auto t = make_trainer(tiny_model(), quick_train());
  std::map<std::string, Tensor<float>> frozen;
  for (const auto& [name, p] : t.generator.entries())
    if (p.frozen) frozen.emplace(name, p.value);
  ASSERT_FALSE(frozen.empty());
  const auto x = random_tensor<float>({1, 3, 32, 32}, 20, 0.0, 1.0);
  const auto y = random_tensor<float>({1, 3, 32, 32}, 21, 0.0, 1.0);
  for (int i = 0; i < 3; ++i) {
    const auto rep = train_step(t, x, y);
    EXPECT_TRUE(std::isfinite(rep.total));
    EXPECT_TRUE(std::isfinite(rep.gan_d));
    ASSERT_TRUE(rep.r2.has_value());
    EXPECT_NEAR(rep.total, 0.9 * rep.r1.total + 0.1 * rep.r2->total, 1e-9);
  }
  for (const auto& [name, v] : frozen) EXPECT_EQ(t.generator.get(name).value, v) << name;
  EXPECT_EQ(t.iteration, 3);
  EXPECT_EQ(t.opt_g.state().step, 3);
  EXPECT_FALSE(t.opt_g.state().m.empty());
  EXPECT_FALSE(t.opt_d.state().m.empty());
  for (const auto& [name, m] : t.opt_g.state().m) EXPECT_FALSE(t.generator.get(name).frozen) << name;
}

TEST(TrainStep, BaselineReportsOnlyFirstBranch) {
  auto t = make_trainer(tiny_model(Ablation::baseline), quick_train());
  const auto x = random_tensor<float>({1, 3, 32, 32}, 22, 0.0, 1.0);
  const auto rep = train_step(t, x, x);
  EXPECT_FALSE(rep.r2.has_value());
  EXPECT_EQ(rep.total, rep.r1.total);
  const auto j = to_json(rep);
  EXPECT_FALSE(j.contains("r2"));
  EXPECT_TRUE(j.at("r1").contains("lpips"));
}

TEST(Sampler, DeterministicAlignedCrops) {
  std::vector<Pair> pairs;
  for (int i = 0; i < 3; ++i) {
    const Image hr = degradation::synth_hr_image(40, 48, 4, i);
    pairs.push_back({hr, hr});
  }
  const auto a = sample_batch(pairs, 5, 2, 24, 8, 99);
  const auto b = sample_batch(pairs, 5, 2, 24, 8, 99);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.first.shape(), (Shape{2, 3, 24, 24}));
  EXPECT_EQ(a.first, a.second);
  EXPECT_NE(sample_batch(pairs, 6, 2, 24, 8, 99).first, a.first);
}

TEST(Fit, ZeroIterationsWritesInitCheckpoint) {
  const auto dir = tiny_dataset("fit0", 4);
  FitOptions o;
  o.data = dir / "data";
  o.out = dir / "run";
  o.model = tiny_model();
  o.train = quick_train(0);
  o.train.holdout = 1;
  const auto r = fit(o);
  EXPECT_TRUE(r.losses.empty());
  const auto ck = load_checkpoint(r.last_checkpoint, &o.model);
  EXPECT_EQ(ck.iteration, 0);
  const auto fresh = make_trainer(o.model, o.train);
  for (const auto& [name, p] : fresh.generator.entries()) EXPECT_EQ(ck.generator.get(name).value, p.value) << name;
}

TEST(Fit, SeededRunsAreIdentical) {
  const auto dir = tiny_dataset("fit_det", 4);
  FitOptions o;
  o.data = dir / "data";
  o.model = tiny_model();
  o.train = quick_train(3);
  o.train.holdout = 1;
  o.out = dir / "a";
  fit(o);
  o.out = dir / "b";
  fit(o);
  EXPECT_EQ(slurp(dir / "a" / "losses.log"), slurp(dir / "b" / "losses.log"));
  EXPECT_EQ(slurp(dir / "a" / "ckpt" / "last.ckpt"), slurp(dir / "b" / "ckpt" / "last.ckpt"));
  std::ifstream log(dir / "a" / "losses.log");
  int lines = 0;
  for (std::string line; std::getline(log, line);) ++lines;
  EXPECT_EQ(lines, 3);
}
