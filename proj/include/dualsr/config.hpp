#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace dualsr {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Which parts of the dual-branch model are wired in. Mirrors the ablation
// ladder: each step adds to the previous one.
enum class Ablation {
  baseline,   // diffusion branch only, no long-skip, no guidance
  long_skip,  // + latent long-skip F_n = F_m + F_l
  guidance,   // + guidance pyramid injection, IGN replaced by pass-through
  full,       // + image guidance network
};

std::string to_string(Ablation a);
// Accepts "baseline", "+longskip", "+guidance", "full".
Ablation parse_ablation(const std::string& name);

struct ModelConfig {
  int base_channels = 16;
  int guidance_blocks = 4;
  int fca_per_frb = 2;
  int latent_channels = 4;
  std::vector<int> unet_widths{32, 64, 64};
  std::vector<int> guidance_scales{8, 16, 32};
  std::vector<int> guidance_proj_channels{16, 16, 16};
  std::vector<int> vae_widths{16, 32, 64};
  int lora_rank_unet = 8;
  int lora_rank_vae = 4;
  // LoRA alpha; the update is scaled by alpha / rank. Zero means alpha = rank.
  double lora_alpha_unet = 0.0;
  double lora_alpha_vae = 0.0;
  int fixed_timestep = 999;
  int time_embed_dim = 32;
  int d_prompt = 32;
  int upscale_factor = 4;
  std::vector<int> disc_widths{16, 32};
  std::vector<int> perceptual_widths{8, 16, 32};
  std::uint64_t init_seed = 0;
  std::uint64_t perceptual_seed = 20240501;
  Ablation ablation = Ablation::full;

  bool has_guidance() const { return ablation == Ablation::guidance || ablation == Ablation::full; }
  bool has_ign() const { return ablation == Ablation::full; }
  bool has_long_skip() const { return ablation != Ablation::baseline; }
  // Spatial dims at model entry must be multiples of this.
  int spatial_multiple() const;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  double lambda1 = 1.0;  // MSE
  double lambda2 = 5.0;  // perceptual
  double lambda3 = 0.5;  // adversarial
  double lambda_d = 0.9;
  double lambda_g = 0.1;
  double lr = 5e-5;
  double disc_lr = 5e-5;
  int warmup_iters = 500;
  int total_iters = 1000;
  int batch_size = 1;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  bool gan_enabled = true;
  int gan_start_iter = 0;
  int crop_size = 64;
  int eval_every = 0;  // 0: evaluate only at the end
  int holdout = 0;     // trailing pairs of the dataset held out for evaluation
  int vae_pretrain_iters = 0;
  double vae_pretrain_lr = 1e-3;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// 64-bit FNV-1a of the canonical JSON dump, hex encoded.
std::string config_hash(const nlohmann::json& j);

}  // namespace dualsr
