#include "dualsr/training.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>

#include "dualsr/checkpoint.hpp"
#include "dualsr/degradation.hpp"
#include "dualsr/diffusion.hpp"
#include "dualsr/evaluation.hpp"

namespace dualsr::training {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::ConvSpec;
using nn::Init;

namespace {

template <typename T>
Var<T> to_signed(const Var<T>& x) {
  return ag::add_scalar(ag::scale(x, T(2)), T(-1));
}

template <typename T>
Var<T> weighted(const Var<T>& a, double w) {
  return ag::scale(a, static_cast<T>(w));
}

void check_finite(const LossReport& r) {
  bool ok = std::isfinite(r.total) && std::isfinite(r.gan_d) && std::isfinite(r.r1.total);
  if (r.r2) ok = ok && std::isfinite(r.r2->total);
  if (!ok) throw TrainingError("non-finite loss at iteration " + std::to_string(r.iteration) + ": " + to_json(r).dump());
}

BranchTerms read_terms(const BranchLoss<float>& b, const TrainConfig& cfg) {
  BranchTerms t;
  t.mse = b.mse.item();
  t.lpips = b.lpips.item();
  t.gan = b.gan.defined() ? b.gan.item() : 0.0;
  t.total = branch_loss(t.mse, t.lpips, t.gan, cfg);
  return t;
}

json terms_json(const BranchTerms& t) {
  return json{{"mse", t.mse}, {"lpips", t.lpips}, {"gan_g", t.gan}, {"total", t.total}};
}

}  // namespace

// ---- perceptual network ----------------------------------------------------------

template <typename T>
ParamStore<T> build_perceptual_net(const ModelConfig& cfg) {
  const auto& w = cfg.perceptual_widths;
  if (w.size() != 3) throw ConfigError("perceptual_widths must have three stages");
  ParamStore<T> net;
  int in = 3;
  for (int i = 0; i < 3; ++i) {
    nn::register_conv(net, "perceptual.stage" + std::to_string(i),
                      ConvSpec{in, w[i], 3, Init::kaiming, ParamGroup::perceptual, true}, cfg.perceptual_seed);
    in = w[i];
  }
  return net;
}

template <typename T>
std::vector<Var<T>> perceptual_features(const ParamStore<T>& net, const Var<T>& image) {
  std::vector<Var<T>> feats;
  Var<T> h = to_signed(image);
  for (int i = 0; i < 3; ++i) {
    h = ag::gelu(nn::conv(net, "perceptual.stage" + std::to_string(i), h, i == 0 ? 1 : 2));
    feats.push_back(ag::normalize_channels(h, T(1e-10)));
  }
  return feats;
}

Tensor<double> pooled_features(const ParamStore<float>& net, const Tensor<float>& batch) {
  NoGradScope<float> no_grad(net);
  const auto feats = perceptual_features(net, Var<float>(batch));
  const int N = batch.dim(0);
  int D = 0;
  for (const auto& f : feats) D += f.dim(1);
  Tensor<double> out({N, D});
  int col = 0;
  for (const auto& f : feats) {
    const auto pooled = ag::global_avg_pool(f).value();
    const int C = f.dim(1);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(n) * D + col + c] = pooled[n * C + c];
    col += C;
  }
  return out;
}

// ---- discriminator -----------------------------------------------------------------

template <typename T>
ParamStore<T> build_discriminator(const ModelConfig& cfg) {
  const auto& w = cfg.disc_widths;
  if (w.size() != 2) throw ConfigError("disc_widths must have two entries");
  const std::uint64_t seed = derive_key(cfg.init_seed, "discriminator");
  ParamStore<T> disc;
  nn::register_conv(disc, "disc.conv0", ConvSpec{3, w[0], 3, Init::kaiming, ParamGroup::discriminator}, seed);
  nn::register_conv(disc, "disc.conv1", ConvSpec{w[0], w[1], 3, Init::kaiming, ParamGroup::discriminator}, seed);
  nn::register_conv(disc, "disc.head", ConvSpec{w[1], 1, 3, Init::kaiming, ParamGroup::discriminator}, seed);
  return disc;
}

template <typename T>
Var<T> discriminator_scores(const ParamStore<T>& disc, const Var<T>& image) {
  Var<T> h = ag::leaky_relu(nn::conv(disc, "disc.conv0", to_signed(image), 2), T(0.2));
  h = ag::leaky_relu(nn::conv(disc, "disc.conv1", h, 2), T(0.2));
  return ag::sigmoid(nn::conv(disc, "disc.head", h));
}

// ---- losses ----------------------------------------------------------------------------

template <typename T>
Var<T> mse_loss(const Var<T>& r, const Var<T>& y) {
  require_same_shape(r.value(), y.value(), "mse_loss");
  const double locations = static_cast<double>(r.value().size()) / r.dim(1);
  return ag::scale(ag::sum(ag::square(ag::sub(r, y))), static_cast<T>(1.0 / locations));
}

template <typename T>
Var<T> lpips_loss(const ParamStore<T>& net, const Var<T>& r, const Var<T>& y) {
  require_same_shape(r.value(), y.value(), "lpips_loss");
  const auto fr = perceptual_features(net, r);
  const auto fy = perceptual_features(net, y);
  Var<T> total;
  for (std::size_t i = 0; i < fr.size(); ++i) {
    const double locations = static_cast<double>(fr[i].value().size()) / fr[i].dim(1);
    Var<T> d = ag::scale(ag::sum(ag::square(ag::sub(fr[i], fy[i]))), static_cast<T>(1.0 / locations));
    total = total.defined() ? ag::add(total, d) : d;
  }
  return total;
}

template <typename T>
Var<T> gan_loss_g(const Var<T>& fake_scores) {
  return ag::scale(ag::mean(ag::log_guarded(fake_scores, T(kLogEps))), T(-1));
}

template <typename T>
Var<T> gan_loss_d(const Var<T>& real_scores, const Var<T>& fake_scores) {
  const Var<T> real_term = ag::mean(ag::log_guarded(real_scores, T(kLogEps)));
  const Var<T> one_minus_fake = ag::add_scalar(ag::scale(fake_scores, T(-1)), T(1));
  const Var<T> fake_term = ag::mean(ag::log_guarded(one_minus_fake, T(kLogEps)));
  return ag::scale(ag::add(real_term, fake_term), T(-1));
}

double branch_loss(double mse, double lpips, double gan, double lambda1, double lambda2, double lambda3) {
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw ConfigError("loss weights must be non-negative");
  return lambda1 * mse + lambda2 * lpips + lambda3 * gan;
}

double branch_loss(double mse, double lpips, double gan, const TrainConfig& cfg) {
  return branch_loss(mse, lpips, gan, cfg.lambda1, cfg.lambda2, cfg.lambda3);
}

template <typename T>
BranchLoss<T> branch_loss(const Var<T>& r, const Var<T>& y, const ParamStore<T>* disc, const ParamStore<T>& net,
                          const TrainConfig& cfg) {
  if (cfg.lambda1 < 0 || cfg.lambda2 < 0 || cfg.lambda3 < 0) throw ConfigError("loss weights must be non-negative");
  BranchLoss<T> b;
  b.mse = mse_loss(r, y);
  b.lpips = lpips_loss(net, r, y);
  b.total = ag::add(weighted(b.mse, cfg.lambda1), weighted(b.lpips, cfg.lambda2));
  if (disc) {
    b.gan = gan_loss_g(discriminator_scores(*disc, r));
    b.total = ag::add(b.total, weighted(b.gan, cfg.lambda3));
  }
  return b;
}

double final_loss(double lb_r1, double lb_r2, const TrainConfig& cfg) {
  return cfg.lambda_d * lb_r1 + cfg.lambda_g * lb_r2;
}

template <typename T>
Var<T> final_loss(const Var<T>& lb_r1, const Var<T>& lb_r2, const TrainConfig& cfg) {
  return ag::add(weighted(lb_r1, cfg.lambda_d), weighted(lb_r2, cfg.lambda_g));
}

json to_json(const LossReport& r) {
  json j{{"iter", r.iteration}, {"lr", r.lr}, {"r1", terms_json(r.r1)}, {"gan_d", r.gan_d}, {"total", r.total}};
  if (r.r2) j["r2"] = terms_json(*r.r2);
  return j;
}

double lr_schedule(int iter, const TrainConfig& cfg, double peak) {
  if (iter < 0 || iter > cfg.total_iters) {
    throw TrainingError("lr_schedule: iteration " + std::to_string(iter) + " outside [0, " +
                        std::to_string(cfg.total_iters) + "]");
  }
  const int w = cfg.warmup_iters;
  if (iter < w) return peak * static_cast<double>(iter) / w;
  if (cfg.total_iters <= w) return peak;
  const double progress = static_cast<double>(iter - w) / (cfg.total_iters - w);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double lr_schedule(int iter, const TrainConfig& cfg) { return lr_schedule(iter, cfg, cfg.lr); }

// ---- training state --------------------------------------------------------------------

Trainer make_trainer(const ModelConfig& model, const TrainConfig& train, std::optional<ParamStore<float>> generator) {
  model.validate();
  train.validate();
  Trainer t;
  t.model = model;
  t.train = train;
  t.generator = generator ? std::move(*generator) : build_generator<float>(model);
  if (t.generator.lora_entries().empty()) diffusion::attach_lora(t.generator, model);
  t.discriminator = build_discriminator<float>(model);
  t.perceptual = build_perceptual_net<float>(model);
  const AdamW::Options g{train.beta1, train.beta2, train.adam_eps, train.weight_decay};
  t.opt_g = AdamW(g);
  t.opt_d = AdamW(g);
  return t;
}

LossReport train_step(Trainer& t, const Tensor<float>& input, const Tensor<float>& target) {
  const TrainConfig& cfg = t.train;
  LossReport rep;
  rep.iteration = t.iteration;
  rep.lr = lr_schedule(t.iteration, cfg, cfg.lr);
  const double lr_d = lr_schedule(t.iteration, cfg, cfg.disc_lr);
  const bool use_gan = cfg.gan_enabled && t.iteration >= cfg.gan_start_iter;

  t.generator.release_graph();
  t.discriminator.release_graph();
  const Var<float> x(input), y(target);
  const auto out = generator_forward(t.generator, t.model, x);

  if (use_gan) {
    // Generator outputs enter the discriminator update detached.
    t.discriminator.set_grad_enabled(true);
    const Var<float> real = discriminator_scores(t.discriminator, y);
    Var<float> ld = gan_loss_d(real, discriminator_scores(t.discriminator, out.r1.detach()));
    if (out.r2.defined()) ld = ag::add(ld, gan_loss_d(real, discriminator_scores(t.discriminator, out.r2.detach())));
    rep.gan_d = ld.item();
    if (!std::isfinite(rep.gan_d)) check_finite(rep);
    ag::backward(ld);
    t.opt_d.step(t.discriminator, t.discriminator.gradients(), lr_d);
    t.discriminator.release_graph();
  }

  t.discriminator.set_grad_enabled(false);
  const ParamStore<float>* disc = use_gan ? &t.discriminator : nullptr;
  const auto b1 = branch_loss(out.r1, y, disc, t.perceptual, cfg);
  rep.r1 = read_terms(b1, cfg);
  Var<float> total = b1.total;
  rep.total = rep.r1.total;
  if (out.r2.defined()) {
    const auto b2 = branch_loss(out.r2, y, disc, t.perceptual, cfg);
    rep.r2 = read_terms(b2, cfg);
    total = final_loss(b1.total, b2.total, cfg);
    rep.total = final_loss(rep.r1.total, rep.r2->total, cfg);
  }
  check_finite(rep);
  ag::backward(total);
  t.opt_g.step(t.generator, t.generator.gradients(), rep.lr);

  t.generator.release_graph();
  t.discriminator.release_graph();
  t.discriminator.set_grad_enabled(true);
  t.perceptual.release_graph();
  ++t.iteration;
  return rep;
}

void pretrain_vae(ParamStore<float>& generator, const ModelConfig& cfg, const std::vector<Image>& images, int iters,
                  double lr, int crop_size, std::uint64_t seed) {
  cfg.validate();
  if (iters <= 0) return;
  if (images.empty()) throw TrainingError("VAE pretraining needs images");
  if (!generator.lora_entries().empty()) throw TrainingError("VAE pretraining must run before LoRA is attached");
  AdamW opt(AdamW::Options{0.9, 0.999, 1e-8, 0.0});
  for (int it = 0; it < iters; ++it) {
    CounterRng rng(derive_key({seed, static_cast<std::uint64_t>(it), 0x7AEu}));
    const Image& src = images[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(images.size()) - 1))];
    const int H = src.dim(1), W = src.dim(2);
    const int ch = crop_size > 0 ? std::min(crop_size, H) / 8 * 8 : H / 8 * 8;
    const int cw = crop_size > 0 ? std::min(crop_size, W) / 8 * 8 : W / 8 * 8;
    const int top = rng.uniform_int(0, H - ch), left = rng.uniform_int(0, W - cw);
    const Var<float> x(as_batch<float>(crop(src, top, left, ch, cw)));

    generator.release_graph();
    const auto enc = diffusion::vae_encode(generator, x);
    const Var<float> loss = mse_loss(diffusion::vae_decode(generator, enc.latent, enc.skips), x);
    ag::backward(loss);
    std::map<std::string, Tensor<float>> grads;
    for (auto& [name, g] : generator.gradients()) {
      if (name.rfind("diffusion.vae.", 0) == 0) grads.emplace(name, std::move(g));
    }
    const double step_lr = lr * 0.5 * (1.0 + std::cos(std::numbers::pi * it / iters));
    opt.step(generator, grads, step_lr);
  }
  generator.release_graph();
}

// ---- data ----------------------------------------------------------------------------------

std::vector<Pair> load_pairs(const fs::path& data, int scale) {
  const auto manifest = degradation::load_manifest(data);
  if (manifest.scale != scale) {
    throw TrainingError("dataset scale " + std::to_string(manifest.scale) + " does not match model upscale factor " +
                        std::to_string(scale));
  }
  std::vector<Pair> pairs;
  pairs.reserve(manifest.pairs.size());
  for (const auto& e : manifest.pairs) {
    Pair p;
    p.target = read_image(manifest.root / e.hr);
    p.input = upsample_input(read_image(manifest.root / e.lr), scale);
    if (p.input.shape() != p.target.shape()) {
      throw TrainingError("pair " + std::to_string(e.index) + ": upsampled LR " + shape_str(p.input.shape()) +
                          " does not match HR " + shape_str(p.target.shape()));
    }
    pairs.push_back(std::move(p));
  }
  if (pairs.empty()) throw TrainingError("dataset " + data.string() + " has no pairs");
  return pairs;
}

std::pair<Tensor<float>, Tensor<float>> sample_batch(const std::vector<Pair>& pairs, int iter, int batch_size,
                                                     int crop_size, int multiple, std::uint64_t seed) {
  if (pairs.empty()) throw TrainingError("cannot sample from an empty dataset");
  const std::size_t n = pairs.size();
  const int H = pairs.front().target.dim(1), W = pairs.front().target.dim(2);
  const int ch = crop_size > 0 ? crop_size : H, cw = crop_size > 0 ? crop_size : W;
  if (ch % multiple != 0 || cw % multiple != 0) {
    throw TrainingError("training crop " + std::to_string(ch) + "x" + std::to_string(cw) +
                        " must be a multiple of " + std::to_string(multiple));
  }
  Tensor<float> in({batch_size, 3, ch, cw}), tg({batch_size, 3, ch, cw});
  const std::size_t per = static_cast<std::size_t>(3) * ch * cw;
  std::vector<std::size_t> perm;
  std::uint64_t perm_epoch = ~0ull;
  for (int b = 0; b < batch_size; ++b) {
    const std::uint64_t g = static_cast<std::uint64_t>(iter) * batch_size + b;
    const std::uint64_t epoch = g / n;
    if (epoch != perm_epoch) {
      perm.resize(n);
      for (std::size_t i = 0; i < n; ++i) perm[i] = i;
      CounterRng rng(derive_key({seed, epoch, 0xE90Cu}));
      for (std::size_t i = n - 1; i > 0; --i) {
        std::swap(perm[i], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)))]);
      }
      perm_epoch = epoch;
    }
    const Pair& p = pairs[perm[g % n]];
    if (p.target.dim(1) < ch || p.target.dim(2) < cw) throw TrainingError("training crop larger than image");
    CounterRng rng(derive_key({seed, g, 0xC809u}));
    const int top = rng.uniform_int(0, (p.target.dim(1) - ch) / 4) * 4;
    const int left = rng.uniform_int(0, (p.target.dim(2) - cw) / 4) * 4;
    const Image ci = crop(p.input, top, left, ch, cw), ct = crop(p.target, top, left, ch, cw);
    std::copy(ci.data(), ci.data() + per, in.data() + b * per);
    std::copy(ct.data(), ct.data() + per, tg.data() + b * per);
  }
  return {std::move(in), std::move(tg)};
}

double holdout_psnr(const ParamStore<float>& generator, const ModelConfig& cfg, const std::vector<Pair>& pairs) {
  if (pairs.empty()) throw TrainingError("holdout set is empty");
  double total = 0.0;
  for (const auto& p : pairs) total += evaluation::psnr(run_inference(generator, cfg, p.input).r1, p.target);
  return total / static_cast<double>(pairs.size());
}

FitResult fit(const FitOptions& opts) {
  const ModelConfig& mc = opts.model;
  TrainConfig tc = opts.train;
  mc.validate();
  tc.validate();
  fs::create_directories(opts.out / "ckpt");
  fs::create_directories(opts.out / "eval");

  auto pairs = load_pairs(opts.data, mc.upscale_factor);
  if (tc.holdout < 0 || static_cast<std::size_t>(tc.holdout) >= pairs.size()) {
    throw TrainingError("holdout must leave at least one training pair");
  }
  const std::vector<Pair> held(pairs.end() - tc.holdout, pairs.end());
  pairs.resize(pairs.size() - static_cast<std::size_t>(tc.holdout));

  ParamStore<float> generator = build_generator<float>(mc);
  if (opts.vae_init) {
    const Checkpoint init = load_checkpoint(*opts.vae_init);
    for (auto& [name, p] : generator.entries()) {
      if (name.rfind("diffusion.vae.", 0) != 0) continue;
      if (!init.generator.contains(name)) throw TrainingError("VAE init checkpoint lacks " + name);
      const auto& src = init.generator.get(name).value;
      if (src.shape() != p.value.shape()) throw TrainingError("VAE init shape mismatch for " + name);
      p.value = src;
    }
  } else if (tc.vae_pretrain_iters > 0) {
    std::vector<Image> targets;
    for (const auto& p : pairs) targets.push_back(p.target);
    pretrain_vae(generator, mc, targets, tc.vae_pretrain_iters, tc.vae_pretrain_lr, tc.crop_size, tc.seed);
  }
  Trainer t = make_trainer(mc, tc, std::move(generator));
  const ParamStore<float> eval_net = build_perceptual_net<float>(mc);

  FitResult result;
  result.last_checkpoint = opts.out / "ckpt" / "last.ckpt";
  result.best_checkpoint = opts.out / "ckpt" / "best.ckpt";
  auto snapshot = [&]() {
    Checkpoint c;
    c.model = mc;
    c.train = tc;
    c.iteration = t.iteration;
    c.generator = t.generator;
    c.discriminator = t.discriminator;
    c.opt_g = t.opt_g.state();
    c.opt_d = t.opt_d.state();
    return c;
  };
  bool have_best = false;
  auto run_eval = [&]() {
    if (held.empty()) return;
    std::vector<Image> preds, targets;
    for (const auto& p : held) {
      preds.push_back(run_inference(t.generator, mc, p.input).r1);
      targets.push_back(p.target);
    }
    auto report = evaluation::evaluate_images(preds, targets, eval_net, opts.data.filename().string(),
                                              to_string(mc.ablation));
    report.iteration = t.iteration;
    evaluation::write_report(opts.out / "eval" / ("report_" + std::to_string(t.iteration) + ".json"), report);
    const double p = report.aggregate.at("psnr");
    if (t.iteration == 0) result.init_psnr = p;
    result.final_psnr = p;
    if (!have_best || p > result.best_psnr) {
      have_best = true;
      result.best_psnr = p;
      result.best_iteration = t.iteration;
      auto c = snapshot();
      c.extra = json{{"holdout_psnr", p}};
      save_checkpoint(result.best_checkpoint, c);
    }
    if (opts.verbose) std::cerr << "iter " << t.iteration << " holdout PSNR " << p << " dB\n";
  };

  run_eval();
  std::ofstream log(opts.out / "losses.log", std::ios::trunc);
  if (!log) throw TrainingError("cannot write " + (opts.out / "losses.log").string());
  const int multiple = mc.spatial_multiple();
  for (int it = 0; it < tc.total_iters; ++it) {
    auto [in, tg] = sample_batch(pairs, it, tc.batch_size, tc.crop_size, multiple, tc.seed);
    const LossReport rep = train_step(t, in, tg);
    log << to_json(rep).dump() << '\n';
    log.flush();
    result.losses.push_back(rep);
    if (opts.verbose && (it + 1) % 50 == 0) std::cerr << "iter " << it + 1 << " loss " << rep.total << "\n";
    if (tc.eval_every > 0 && t.iteration % tc.eval_every == 0 && t.iteration < tc.total_iters) run_eval();
  }
  if (tc.total_iters > 0) run_eval();
  save_checkpoint(result.last_checkpoint, snapshot());
  if (!have_best) save_checkpoint(result.best_checkpoint, snapshot());
  return result;
}

#define DUALSR_INSTANTIATE_TRAINING(T)                                                                      \
  template ParamStore<T> build_perceptual_net<T>(const ModelConfig&);                                        \
  template std::vector<Var<T>> perceptual_features<T>(const ParamStore<T>&, const Var<T>&);                  \
  template ParamStore<T> build_discriminator<T>(const ModelConfig&);                                         \
  template Var<T> discriminator_scores<T>(const ParamStore<T>&, const Var<T>&);                              \
  template Var<T> mse_loss<T>(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> lpips_loss<T>(const ParamStore<T>&, const Var<T>&, const Var<T>&);                         \
  template Var<T> gan_loss_g<T>(const Var<T>&);                                                              \
  template Var<T> gan_loss_d<T>(const Var<T>&, const Var<T>&);                                               \
  template BranchLoss<T> branch_loss<T>(const Var<T>&, const Var<T>&, const ParamStore<T>*, const ParamStore<T>&, \
                                        const TrainConfig&);                                                 \
  template Var<T> final_loss<T>(const Var<T>&, const Var<T>&, const TrainConfig&);

DUALSR_INSTANTIATE_TRAINING(float)
DUALSR_INSTANTIATE_TRAINING(double)

}  // namespace dualsr::training
