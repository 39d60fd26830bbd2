#pragma once

#include "dualsr/config.hpp"
#include "dualsr/diffusion.hpp"
#include "dualsr/guidance.hpp"
#include "dualsr/image.hpp"
#include "dualsr/params.hpp"

namespace dualsr {

template <typename T>
struct GeneratorOutput {
  Var<T> r1;        // diffusion branch output, the model's prediction
  Var<T> r2;        // guidance branch refined image; undefined without guidance
  Var<T> latent;    // F_l
  Var<T> residual;  // F_m
};

// Registers the generator parameters the ablation calls for. No adapters are
// attached; see diffusion::attach_lora.
template <typename T>
ParamStore<T> build_generator(const ModelConfig& cfg);

// I -> (R1, R2). I must be [N,3,H,W] with H, W multiples of cfg.spatial_multiple().
template <typename T>
GeneratorOutput<T> generator_forward(const ParamStore<T>& store, const ModelConfig& cfg, const Var<T>& image);

// Bicubic pre-upsampling of a low-resolution input to model resolution.
Image upsample_input(const Image& lr, int scale);

// Runs the generator on a single image without building a gradient graph.
struct InferenceResult {
  Image r1;
  Image r2;  // empty without guidance
};
InferenceResult run_inference(const ParamStore<float>& store, const ModelConfig& cfg, const Image& input);

}  // namespace dualsr
