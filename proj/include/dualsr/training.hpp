#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualsr/config.hpp"
#include "dualsr/model.hpp"
#include "dualsr/optim.hpp"
#include "dualsr/params.hpp"
#include "json.hpp"

namespace dualsr::training {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr double kLogEps = 1e-7;

// ---- perceptual network ----------------------------------------------------------
// Three frozen conv stages (GELU, strides 1/2/2) with fixed-seed random
// weights. Names: perceptual.stage{i}.

template <typename T>
ParamStore<T> build_perceptual_net(const ModelConfig& cfg);

// Unit-normalised feature maps of each stage.
template <typename T>
std::vector<Var<T>> perceptual_features(const ParamStore<T>& net, const Var<T>& image);

// Per-image global-pooled features of all stages, concatenated. [N, sum(widths)]
Tensor<double> pooled_features(const ParamStore<float>& net, const Tensor<float>& batch);

// ---- discriminator -----------------------------------------------------------------
// Patch classifier: two stride-2 convs with leaky ReLU(0.2), a 3x3 head and a
// sigmoid. Names: disc.conv{i}, disc.head.

template <typename T>
ParamStore<T> build_discriminator(const ModelConfig& cfg);

// Per-patch scores in (0,1), [N,1,H/4,W/4].
template <typename T>
Var<T> discriminator_scores(const ParamStore<T>& disc, const Var<T>& image);

// ---- losses ----------------------------------------------------------------------------

// Mean over N*H*W of the squared channel-vector norm.
template <typename T>
Var<T> mse_loss(const Var<T>& r, const Var<T>& y);

// Sum over stages of the mean over feature locations of ||phi(R) - phi(Y)||^2.
template <typename T>
Var<T> lpips_loss(const ParamStore<T>& net, const Var<T>& r, const Var<T>& y);

// -mean log(max(s, eps))
template <typename T>
Var<T> gan_loss_g(const Var<T>& fake_scores);

// -mean log D(Y) - mean log(1 - D(R))
template <typename T>
Var<T> gan_loss_d(const Var<T>& real_scores, const Var<T>& fake_scores);

struct BranchTerms {
  double mse = 0.0;
  double lpips = 0.0;
  double gan = 0.0;
  double total = 0.0;
};

// lambda1 * mse + lambda2 * lpips + lambda3 * gan; negative weights rejected.
double branch_loss(double mse, double lpips, double gan, double lambda1, double lambda2, double lambda3);
double branch_loss(double mse, double lpips, double gan, const TrainConfig& cfg);

template <typename T>
struct BranchLoss {
  Var<T> mse;
  Var<T> lpips;
  Var<T> gan;  // undefined when the adversarial term is off
  Var<T> total;
};

template <typename T>
BranchLoss<T> branch_loss(const Var<T>& r, const Var<T>& y, const ParamStore<T>* disc, const ParamStore<T>& net,
                          const TrainConfig& cfg);

double final_loss(double lb_r1, double lb_r2, const TrainConfig& cfg);

template <typename T>
Var<T> final_loss(const Var<T>& lb_r1, const Var<T>& lb_r2, const TrainConfig& cfg);

struct LossReport {
  int iteration = 0;
  double lr = 0.0;
  BranchTerms r1;
  std::optional<BranchTerms> r2;  // absent without the guidance branch
  double gan_d = 0.0;
  double total = 0.0;
};

nlohmann::json to_json(const LossReport& r);

// Linear warm-up from 0 to peak, then cosine annealing to 0 at total_iters.
double lr_schedule(int iter, const TrainConfig& cfg, double peak);
double lr_schedule(int iter, const TrainConfig& cfg);

// ---- training state --------------------------------------------------------------------

struct Trainer {
  ModelConfig model;
  TrainConfig train;
  ParamStore<float> generator;
  ParamStore<float> discriminator;
  ParamStore<float> perceptual;
  AdamW opt_g;
  AdamW opt_d;
  int iteration = 0;
};

// Builds all networks and attaches LoRA. If `generator` is given its values
// are used instead of a fresh initialisation (adapters are attached on top
// when it has none).
Trainer make_trainer(const ModelConfig& model, const TrainConfig& train,
                     std::optional<ParamStore<float>> generator = std::nullopt);

// One discriminator update then one generator update on a batch
// (input [N,3,H,W] at model resolution, target of the same shape).
LossReport train_step(Trainer& t, const Tensor<float>& input, const Tensor<float>& target);

// Reconstruction-only training of all VAE weights (skip convs included) on HR crops, before
// adapters are attached.
void pretrain_vae(ParamStore<float>& generator, const ModelConfig& cfg, const std::vector<Image>& images, int iters,
                  double lr, int crop_size, std::uint64_t seed);

// ---- data ----------------------------------------------------------------------------------

struct Pair {
  Image input;   // LR bicubic-upsampled to HR size
  Image target;  // HR
};

// Loads a synthesized dataset and pre-upsamples every LR image.
std::vector<Pair> load_pairs(const std::filesystem::path& data, int scale);

// Deterministic batch `iter` from a cyclic, per-epoch shuffled sampler over
// `pairs`, with aligned random crops (crop_size 0 keeps the full images).
std::pair<Tensor<float>, Tensor<float>> sample_batch(const std::vector<Pair>& pairs, int iter, int batch_size,
                                                     int crop_size, int multiple, std::uint64_t seed);

struct FitOptions {
  std::filesystem::path data;
  std::filesystem::path out;
  ModelConfig model;
  TrainConfig train;
  // Checkpoint whose VAE weights replace the fresh ones (skips VAE pretraining).
  std::optional<std::filesystem::path> vae_init;
  bool verbose = false;
};

struct FitResult {
  std::vector<LossReport> losses;
  double best_psnr = 0.0;
  int best_iteration = 0;
  double final_psnr = 0.0;
  double init_psnr = 0.0;
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
};

// Writes {out}/losses.log (one JSON record per iteration), {out}/eval/report_{iter}.json
// and {out}/ckpt/{best,last}.ckpt.
FitResult fit(const FitOptions& opts);

// Mean PSNR of the generator's R1 over pairs.
double holdout_psnr(const ParamStore<float>& generator, const ModelConfig& cfg, const std::vector<Pair>& pairs);

}  // namespace dualsr::training
