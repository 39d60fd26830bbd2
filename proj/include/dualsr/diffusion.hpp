#pragma once

#include <string>
#include <vector>

#include "dualsr/config.hpp"
#include "dualsr/guidance.hpp"
#include "dualsr/params.hpp"

// Latent pathway: a small deterministic autoencoder standing in for the
// pretrained VAE, a one-step UNet evaluated at a fixed timestep, and LoRA
// adapters over the frozen bases.
//
// Parameter names: diffusion.vae.{enc0..2,enc_out,dec_in,dec2,dec1,dec0,dec_out,skip0..2},
// diffusion.unet.{time.*,conv_in,stage{i}.*,mid.*,dec{i}.*,conv_out},
// diffusion.prompt.*, lora.<base>.A / lora.<base>.B.
namespace dualsr::diffusion {

template <typename T>
struct Encoded {
  Var<T> latent;              // F_l, [N,c_lat,H/8,W/8]
  std::vector<Var<T>> skips;  // encoder outputs at H/2, H/4, H/8
};

template <typename T>
void register_vae_params(ParamStore<T>& store, const ModelConfig& cfg);
template <typename T>
void register_unet_params(ParamStore<T>& store, const ModelConfig& cfg);
template <typename T>
void register_prompt_params(ParamStore<T>& store, const ModelConfig& cfg);

template <typename T>
Encoded<T> vae_encode(const ParamStore<T>& store, const Var<T>& image);
// Decoder stage inputs receive + skip{i}(enc_skip{i}); output clamped to [0,1].
template <typename T>
Var<T> vae_decode(const ParamStore<T>& store, const Var<T>& latent, const std::vector<Var<T>>& skips);

// Learnable constant plus a linear map of the pooled image, [N,d_prompt].
template <typename T>
Var<T> prompt_embed(const ParamStore<T>& store, const Var<T>& image);

// Sinusoidal embedding of an integer timestep, [1,dim].
template <typename T>
Tensor<T> timestep_embedding(int timestep, int dim);

// F_m = UNet(F_l, t_f, F_p, {F'_r}). pyramid may be null when the guidance
// branch is not wired in.
template <typename T>
Var<T> unet_forward(const ParamStore<T>& store, const ModelConfig& cfg, const Var<T>& latent, int timestep,
                    const Var<T>& prompt, const guidance::GuidancePyramid<T>* pyramid);

// F_n = F_m + F_l
template <typename T>
Var<T> latent_skip(const Var<T>& residual, const Var<T>& latent);

template <typename T>
struct DiffusionOutput {
  Var<T> image;     // R1
  Var<T> latent;    // F_l
  Var<T> residual;  // F_m
};

template <typename T>
DiffusionOutput<T> diffusion_forward(const ParamStore<T>& store, const ModelConfig& cfg, const Var<T>& image,
                                     const guidance::GuidancePyramid<T>* pyramid);

// ---- LoRA --------------------------------------------------------------------

struct LoraAdapter {
  std::string base_name;
  int rank = 0;
  int rows = 0;  // d
  int cols = 0;  // k
  double scale = 1.0;
};

class LoraError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// W + scale * B A with the weight viewed as a d x k matrix (d = out
// channels). The base tensor is not modified.
template <typename T>
Tensor<T> apply_lora(const Tensor<T>& base, const Tensor<T>& b, const Tensor<T>& a, double scale);

// Effective weights for every adapted base in the store.
template <typename T>
std::map<std::string, Tensor<T>> effective_weights(const ParamStore<T>& store);

// Adds rank-r_u adapters to every UNet base weight and rank-r_v adapters to
// every VAE base weight whose d x k view admits r <= min(d,k)/2, then freezes
// all VAE/UNet base parameters. Throws when adapters are already attached.
template <typename T>
std::vector<LoraAdapter> attach_lora(ParamStore<T>& store, const ModelConfig& cfg);

}  // namespace dualsr::diffusion
