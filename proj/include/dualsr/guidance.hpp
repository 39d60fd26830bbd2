#pragma once

#include <string>
#include <vector>

#include "dualsr/config.hpp"
#include "dualsr/params.hpp"

// Full-resolution pathway: shallow conv, a chain of Full Resolution Blocks
// built from channel-attention (FCA) blocks, and the image guidance network
// that emits the refined image R2 plus the features F_r that feed the UNet
// through a pixel-unshuffled pyramid.
//
// Parameter names: guidance.shallow, guidance.transition,
// guidance.frb{i}.fca{j}.{conv1,attn_conv,conv_out}, guidance.ign.*,
// guidance.proj{s}.
namespace dualsr::guidance {

template <typename T>
struct GuidancePyramid {
  std::vector<int> scales;
  std::vector<Var<T>> features;

  const Var<T>& at(int scale) const;
  std::size_t size() const { return scales.size(); }
};

template <typename T>
struct GuidanceOutput {
  Var<T> refined_image;  // R2, [N,3,H,W]
  Var<T> features;       // F_r, [N,2C,H,W]
  GuidancePyramid<T> pyramid;
};

template <typename T>
void register_params(ParamStore<T>& store, const ModelConfig& cfg);

// F0 = Conv3x3(I): [N,3,H,W] -> [N,C,H,W]
template <typename T>
Var<T> extract_shallow_features(const ParamStore<T>& store, const Var<T>& image);

// out = F + conv_out(sigmoid(attn_conv(avgpool(gelu(conv1(F))))) * F)
template <typename T>
Var<T> fca_block(const ParamStore<T>& store, const std::string& prefix, const Var<T>& features);

// Residual-in-residual block: the FCA chain runs from F and its delta is
// added back, out = F + (chain(F) - F).
template <typename T>
Var<T> frb(const ParamStore<T>& store, const std::string& prefix, const Var<T>& features, int fca_count);

// 1x1 transition C -> 2C followed by n FRBs.
template <typename T>
Var<T> frg_net(const ParamStore<T>& store, const ModelConfig& cfg, const Var<T>& shallow);

template <typename T>
struct IgnOutput {
  Var<T> features;       // F_r
  Var<T> refined_image;  // R2
  Var<T> attention;      // sigmoid gate, [N,2C,H,W]
};

template <typename T>
IgnOutput<T> ign(const ParamStore<T>& store, const Var<T>& deep, const Var<T>& image);

// [N,C,H,W] -> [N,C*s*s,H/s,W/s]; out[c*s*s + i*s + j] = in[c](h*s+i, w*s+j).
template <typename T>
Var<T> pixel_unshuffle(const Var<T>& features, int factor);

// proj_s(pixel_unshuffle(F_r, s)) for every configured scale.
template <typename T>
GuidancePyramid<T> build_pyramid(const ParamStore<T>& store, const ModelConfig& cfg, const Var<T>& refined);

// Full branch. Without the IGN (ablation "+guidance") F_r = F_d and R2 = I.
template <typename T>
GuidanceOutput<T> guidance_forward(const ParamStore<T>& store, const ModelConfig& cfg, const Var<T>& image);

}  // namespace dualsr::guidance
