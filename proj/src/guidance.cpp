#include "dualsr/guidance.hpp"

#include <stdexcept>

namespace dualsr::guidance {

using nn::ConvSpec;
using nn::Init;

template <typename T>
const Var<T>& GuidancePyramid<T>::at(int scale) const {
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (scales[i] == scale) return features[i];
  }
  throw std::out_of_range("guidance pyramid has no scale " + std::to_string(scale));
}

template <typename T>
void register_params(ParamStore<T>& store, const ModelConfig& cfg) {
  const int C = cfg.base_channels, W = 2 * C;
  const auto seed = cfg.init_seed;
  const auto g = ParamGroup::guidance;
  nn::register_conv(store, "guidance.shallow", ConvSpec{3, C, 3, Init::kaiming, g}, seed);
  nn::register_conv(store, "guidance.transition", ConvSpec{C, W, 1, Init::identity, g}, seed);
  for (int i = 0; i < cfg.guidance_blocks; ++i) {
    for (int j = 0; j < cfg.fca_per_frb; ++j) {
      const std::string p = "guidance.frb" + std::to_string(i) + ".fca" + std::to_string(j);
      nn::register_conv(store, p + ".conv1", ConvSpec{W, W, 3, Init::kaiming, g}, seed);
      nn::register_conv(store, p + ".attn_conv", ConvSpec{W, W, 1, Init::kaiming, g}, seed);
      nn::register_conv(store, p + ".conv_out", ConvSpec{W, W, 3, Init::zero, g}, seed);
    }
  }
  if (cfg.has_ign()) {
    nn::register_conv(store, "guidance.ign.attn1", ConvSpec{W, W, 3, Init::kaiming, g}, seed);
    nn::register_conv(store, "guidance.ign.attn2", ConvSpec{W, W, 3, Init::kaiming, g}, seed);
    nn::register_conv(store, "guidance.ign.value", ConvSpec{W, W, 3, Init::kaiming, g}, seed);
    nn::register_conv(store, "guidance.ign.fuse", ConvSpec{W, W, 3, Init::zero, g}, seed);
    nn::register_conv(store, "guidance.ign.to_image", ConvSpec{W, 3, 3, Init::zero, g}, seed);
  }
  for (std::size_t i = 0; i < cfg.guidance_scales.size(); ++i) {
    const int s = cfg.guidance_scales[i];
    nn::register_conv(store, "guidance.proj" + std::to_string(s),
                      ConvSpec{s * s * W, cfg.guidance_proj_channels[i], 1, Init::zero, g}, seed);
  }
}

template <typename T>
Var<T> extract_shallow_features(const ParamStore<T>& store, const Var<T>& image) {
  if (image.value().rank() != 4 || image.dim(1) != 3) {
    throw ShapeError("guidance: expected [N,3,H,W] image, got " + shape_str(image.shape()));
  }
  return nn::conv(store, "guidance.shallow", image);
}

template <typename T>
Var<T> fca_block(const ParamStore<T>& store, const std::string& prefix, const Var<T>& features) {
  const int width = store.get(prefix + ".conv1.weight").value.dim(1);
  if (features.value().rank() != 4 || features.dim(1) != width) {
    throw ShapeError(prefix + ": expected " + std::to_string(width) + " channels, got " +
                     shape_str(features.shape()));
  }
  auto pooled = ag::global_avg_pool(ag::gelu(nn::conv(store, prefix + ".conv1", features)));
  auto gate = ag::sigmoid(nn::conv(store, prefix + ".attn_conv", pooled));
  auto recalibrated = ag::mul_channel(features, gate);
  return ag::add(features, nn::conv(store, prefix + ".conv_out", recalibrated));
}

template <typename T>
Var<T> frb(const ParamStore<T>& store, const std::string& prefix, const Var<T>& features, int fca_count) {
  if (fca_count < 1) throw std::invalid_argument(prefix + ": needs at least one FCA block");
  Var<T> chain = features;
  for (int j = 0; j < fca_count; ++j) chain = fca_block(store, prefix + ".fca" + std::to_string(j), chain);
  return ag::add(features, ag::sub(chain, features));
}

template <typename T>
Var<T> frg_net(const ParamStore<T>& store, const ModelConfig& cfg, const Var<T>& shallow) {
  if (shallow.value().rank() != 4 || shallow.dim(1) != cfg.base_channels) {
    throw ShapeError("frg_net: expected " + std::to_string(cfg.base_channels) + " channels, got " +
                     shape_str(shallow.shape()));
  }
  Var<T> x = nn::conv(store, "guidance.transition", shallow);
  for (int i = 0; i < cfg.guidance_blocks; ++i) {
    x = frb(store, "guidance.frb" + std::to_string(i), x, cfg.fca_per_frb);
  }
  return x;
}

template <typename T>
IgnOutput<T> ign(const ParamStore<T>& store, const Var<T>& deep, const Var<T>& image) {
  if (deep.value().rank() != 4 || image.value().rank() != 4 || deep.dim(0) != image.dim(0) ||
      deep.dim(2) != image.dim(2) || deep.dim(3) != image.dim(3)) {
    throw ShapeError("ign: features " + shape_str(deep.shape()) + " do not match image " +
                     shape_str(image.shape()));
  }
  auto attention = ag::sigmoid(
      nn::conv(store, "guidance.ign.attn2", ag::gelu(nn::conv(store, "guidance.ign.attn1", deep))));
  auto value = nn::conv(store, "guidance.ign.value", deep);
  auto refined = ag::add(deep, nn::conv(store, "guidance.ign.fuse", ag::mul(attention, value)));
  auto r2 = ag::clamp(ag::add(nn::conv(store, "guidance.ign.to_image", refined), image), T(0), T(1));
  return {refined, r2, attention};
}

template <typename T>
Var<T> pixel_unshuffle(const Var<T>& features, int factor) {
  return ag::pixel_unshuffle(features, factor);
}

template <typename T>
GuidancePyramid<T> build_pyramid(const ParamStore<T>& store, const ModelConfig& cfg, const Var<T>& refined) {
  if (refined.value().rank() != 4 || refined.dim(1) != 2 * cfg.base_channels) {
    throw ShapeError("build_pyramid: expected " + std::to_string(2 * cfg.base_channels) +
                     " channels, got " + shape_str(refined.shape()));
  }
  GuidancePyramid<T> pyr;
  for (int s : cfg.guidance_scales) {
    pyr.scales.push_back(s);
    pyr.features.push_back(nn::conv(store, "guidance.proj" + std::to_string(s), guidance::pixel_unshuffle(refined, s)));
  }
  return pyr;
}

template <typename T>
GuidanceOutput<T> guidance_forward(const ParamStore<T>& store, const ModelConfig& cfg, const Var<T>& image) {
  auto deep = frg_net(store, cfg, extract_shallow_features(store, image));
  GuidanceOutput<T> out;
  if (cfg.has_ign()) {
    auto r = ign(store, deep, image);
    out.features = r.features;
    out.refined_image = r.refined_image;
  } else {
    out.features = deep;
    out.refined_image = image;
  }
  out.pyramid = build_pyramid(store, cfg, out.features);
  return out;
}

#define DUALSR_INSTANTIATE_GUIDANCE(T)                                                              \
  template struct GuidancePyramid<T>;                                                                \
  template void register_params<T>(ParamStore<T>&, const ModelConfig&);                             \
  template Var<T> extract_shallow_features<T>(const ParamStore<T>&, const Var<T>&);                 \
  template Var<T> fca_block<T>(const ParamStore<T>&, const std::string&, const Var<T>&);            \
  template Var<T> frb<T>(const ParamStore<T>&, const std::string&, const Var<T>&, int);             \
  template Var<T> frg_net<T>(const ParamStore<T>&, const ModelConfig&, const Var<T>&);              \
  template IgnOutput<T> ign<T>(const ParamStore<T>&, const Var<T>&, const Var<T>&);                 \
  template Var<T> pixel_unshuffle<T>(const Var<T>&, int);                                           \
  template GuidancePyramid<T> build_pyramid<T>(const ParamStore<T>&, const ModelConfig&, const Var<T>&); \
  template GuidanceOutput<T> guidance_forward<T>(const ParamStore<T>&, const ModelConfig&, const Var<T>&);

DUALSR_INSTANTIATE_GUIDANCE(float)
DUALSR_INSTANTIATE_GUIDANCE(double)

}  // namespace dualsr::guidance
