#include "dualsr/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dualsr/rng.hpp"

namespace dualsr {

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::baseline: return "baseline";
    case Ablation::long_skip: return "+longskip";
    case Ablation::guidance: return "+guidance";
    case Ablation::full: return "full";
  }
  return "full";
}

Ablation parse_ablation(const std::string& name) {
  if (name == "baseline") return Ablation::baseline;
  if (name == "+longskip" || name == "longskip") return Ablation::long_skip;
  if (name == "+guidance" || name == "guidance") return Ablation::guidance;
  if (name == "full") return Ablation::full;
  throw ConfigError("unknown ablation '" + name + "' (expected baseline|+longskip|+guidance|full)");
}

int ModelConfig::spatial_multiple() const {
  int m = 8;
  // UNet stage i runs at latent / 2^i.
  m = std::max(m, 8 << (static_cast<int>(unet_widths.size()) - 1));
  if (has_guidance()) {
    for (int s : guidance_scales) m = std::max(m, s);
  }
  return m;
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("model config: " + msg);
  };
  require(base_channels > 0, "base_channels must be positive");
  require(guidance_blocks >= 0, "guidance_blocks must be >= 0");
  require(fca_per_frb >= 1, "fca_per_frb must be >= 1");
  require(latent_channels > 0, "latent_channels must be positive");
  require(!unet_widths.empty(), "unet_widths must not be empty");
  require(vae_widths.size() == 3, "vae_widths must list exactly 3 levels");
  require(guidance_scales.size() == unet_widths.size(),
          "len(guidance_scales) must equal the number of UNet encoder stages");
  require(guidance_proj_channels.size() == guidance_scales.size(),
          "len(guidance_proj_channels) must equal len(guidance_scales)");
  for (std::size_t i = 0; i < guidance_scales.size(); ++i) {
    require(guidance_scales[i] == (8 << i),
            "guidance scale " + std::to_string(i) + " must match UNet stage resolution " +
                std::to_string(8 << i));
  }
  for (int w : unet_widths) require(w > 0, "unet widths must be positive");
  for (int w : vae_widths) require(w > 0, "vae widths must be positive");
  for (int p : guidance_proj_channels) require(p > 0, "projection channels must be positive");
  require(lora_rank_unet >= 1 && lora_rank_vae >= 1, "LoRA ranks must be >= 1");
  require(fixed_timestep >= 0, "fixed_timestep must be >= 0");
  require(time_embed_dim > 0 && time_embed_dim % 2 == 0, "time_embed_dim must be positive and even");
  require(d_prompt > 0, "d_prompt must be positive");
  require(upscale_factor >= 1, "upscale_factor must be >= 1");
  require(disc_widths.size() >= 1, "disc_widths must not be empty");
  require(perceptual_widths.size() == 3, "perceptual_widths must list 3 stages");
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("train config: " + msg);
  };
  require(lambda1 >= 0 && lambda2 >= 0 && lambda3 >= 0 && lambda_d >= 0 && lambda_g >= 0,
          "loss weights must be non-negative");
  require(std::abs(lambda_d + lambda_g - 1.0) <= 1e-12, "lambda_d + lambda_g must equal 1");
  require(lr >= 0 && disc_lr >= 0, "learning rates must be non-negative");
  require(warmup_iters >= 0, "warmup_iters must be >= 0");
  require(total_iters >= 0, "total_iters must be >= 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "Adam betas must lie in [0,1)");
  require(crop_size > 0, "crop_size must be positive");
  require(eval_every >= 0 && holdout >= 0 && vae_pretrain_iters >= 0, "counts must be >= 0");
}

namespace {

template <typename Config>
void reject_unknown_keys(const nlohmann::json& j, const Config& defaults, const char* what) {
  const nlohmann::json known = defaults;
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError(std::string("unknown ") + what + " config key '" + key + "'");
  }
}

}  // namespace

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"base_channels", c.base_channels},
                     {"guidance_blocks", c.guidance_blocks},
                     {"fca_per_frb", c.fca_per_frb},
                     {"latent_channels", c.latent_channels},
                     {"unet_widths", c.unet_widths},
                     {"guidance_scales", c.guidance_scales},
                     {"guidance_proj_channels", c.guidance_proj_channels},
                     {"vae_widths", c.vae_widths},
                     {"lora_rank_unet", c.lora_rank_unet},
                     {"lora_rank_vae", c.lora_rank_vae},
                     {"lora_alpha_unet", c.lora_alpha_unet},
                     {"lora_alpha_vae", c.lora_alpha_vae},
                     {"fixed_timestep", c.fixed_timestep},
                     {"time_embed_dim", c.time_embed_dim},
                     {"d_prompt", c.d_prompt},
                     {"upscale_factor", c.upscale_factor},
                     {"disc_widths", c.disc_widths},
                     {"perceptual_widths", c.perceptual_widths},
                     {"init_seed", c.init_seed},
                     {"perceptual_seed", c.perceptual_seed},
                     {"ablation", to_string(c.ablation)}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  reject_unknown_keys(j, d, "model");
  c.base_channels = j.value("base_channels", d.base_channels);
  c.guidance_blocks = j.value("guidance_blocks", d.guidance_blocks);
  c.fca_per_frb = j.value("fca_per_frb", d.fca_per_frb);
  c.latent_channels = j.value("latent_channels", d.latent_channels);
  c.unet_widths = j.value("unet_widths", d.unet_widths);
  c.guidance_scales = j.value("guidance_scales", d.guidance_scales);
  c.guidance_proj_channels = j.value("guidance_proj_channels", d.guidance_proj_channels);
  c.vae_widths = j.value("vae_widths", d.vae_widths);
  c.lora_rank_unet = j.value("lora_rank_unet", d.lora_rank_unet);
  c.lora_rank_vae = j.value("lora_rank_vae", d.lora_rank_vae);
  c.lora_alpha_unet = j.value("lora_alpha_unet", d.lora_alpha_unet);
  c.lora_alpha_vae = j.value("lora_alpha_vae", d.lora_alpha_vae);
  c.fixed_timestep = j.value("fixed_timestep", d.fixed_timestep);
  c.time_embed_dim = j.value("time_embed_dim", d.time_embed_dim);
  c.d_prompt = j.value("d_prompt", d.d_prompt);
  c.upscale_factor = j.value("upscale_factor", d.upscale_factor);
  c.disc_widths = j.value("disc_widths", d.disc_widths);
  c.perceptual_widths = j.value("perceptual_widths", d.perceptual_widths);
  c.init_seed = j.value("init_seed", d.init_seed);
  c.perceptual_seed = j.value("perceptual_seed", d.perceptual_seed);
  c.ablation = parse_ablation(j.value("ablation", to_string(d.ablation)));
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lambda1", c.lambda1},
                     {"lambda2", c.lambda2},
                     {"lambda3", c.lambda3},
                     {"lambda_d", c.lambda_d},
                     {"lambda_g", c.lambda_g},
                     {"lr", c.lr},
                     {"disc_lr", c.disc_lr},
                     {"warmup_iters", c.warmup_iters},
                     {"total_iters", c.total_iters},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"weight_decay", c.weight_decay},
                     {"gan_enabled", c.gan_enabled},
                     {"gan_start_iter", c.gan_start_iter},
                     {"crop_size", c.crop_size},
                     {"eval_every", c.eval_every},
                     {"holdout", c.holdout},
                     {"vae_pretrain_iters", c.vae_pretrain_iters},
                     {"vae_pretrain_lr", c.vae_pretrain_lr}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  reject_unknown_keys(j, d, "train");
  c.lambda1 = j.value("lambda1", d.lambda1);
  c.lambda2 = j.value("lambda2", d.lambda2);
  c.lambda3 = j.value("lambda3", d.lambda3);
  c.lambda_d = j.value("lambda_d", d.lambda_d);
  c.lambda_g = j.value("lambda_g", d.lambda_g);
  c.lr = j.value("lr", d.lr);
  c.disc_lr = j.value("disc_lr", d.disc_lr);
  c.warmup_iters = j.value("warmup_iters", d.warmup_iters);
  c.total_iters = j.value("total_iters", d.total_iters);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.gan_enabled = j.value("gan_enabled", d.gan_enabled);
  c.gan_start_iter = j.value("gan_start_iter", d.gan_start_iter);
  c.crop_size = j.value("crop_size", d.crop_size);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.holdout = j.value("holdout", d.holdout);
  c.vae_pretrain_iters = j.value("vae_pretrain_iters", d.vae_pretrain_iters);
  c.vae_pretrain_lr = j.value("vae_pretrain_lr", d.vae_pretrain_lr);
}

std::string config_hash(const nlohmann::json& j) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

}  // namespace dualsr
