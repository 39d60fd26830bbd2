#include "dualsr/model.hpp"

namespace dualsr {

template <typename T>
ParamStore<T> build_generator(const ModelConfig& cfg) {
  cfg.validate();
  ParamStore<T> store;
  if (cfg.has_guidance()) guidance::register_params(store, cfg);
  diffusion::register_vae_params(store, cfg);
  diffusion::register_unet_params(store, cfg);
  diffusion::register_prompt_params(store, cfg);
  return store;
}

template <typename T>
GeneratorOutput<T> generator_forward(const ParamStore<T>& store, const ModelConfig& cfg, const Var<T>& image) {
  const int multiple = cfg.spatial_multiple();
  if (image.value().rank() != 4 || image.dim(1) != 3 || image.dim(2) % multiple != 0 ||
      image.dim(3) % multiple != 0) {
    throw ShapeError("model input " + shape_str(image.shape()) + " must be [N,3,H,W] with H, W divisible by " +
                     std::to_string(multiple));
  }
  GeneratorOutput<T> out;
  if (cfg.has_guidance()) {
    auto g = guidance::guidance_forward(store, cfg, image);
    auto d = diffusion::diffusion_forward(store, cfg, image, &g.pyramid);
    out.r1 = d.image;
    out.r2 = g.refined_image;
    out.latent = d.latent;
    out.residual = d.residual;
  } else {
    auto d = diffusion::diffusion_forward<T>(store, cfg, image, nullptr);
    out.r1 = d.image;
    out.latent = d.latent;
    out.residual = d.residual;
  }
  return out;
}

Image upsample_input(const Image& lr, int scale) {
  if (scale == 1) return lr;
  return clamp01(resize(lr, lr.dim(1) * scale, lr.dim(2) * scale, ResizeMode::bicubic));
}

InferenceResult run_inference(const ParamStore<float>& store, const ModelConfig& cfg, const Image& input) {
  validate_image(input, cfg.spatial_multiple());
  NoGradScope<float> no_grad(store);
  auto out = generator_forward(store, cfg, Var<float>(as_batch<float>(input)));
  InferenceResult r;
  r.r1 = from_batch(out.r1.value());
  if (out.r2.defined()) r.r2 = from_batch(out.r2.value());
  return r;
}

template ParamStore<float> build_generator<float>(const ModelConfig&);
template ParamStore<double> build_generator<double>(const ModelConfig&);
template GeneratorOutput<float> generator_forward<float>(const ParamStore<float>&, const ModelConfig&, const Var<float>&);
template GeneratorOutput<double> generator_forward<double>(const ParamStore<double>&, const ModelConfig&,
                                                           const Var<double>&);

}  // namespace dualsr
