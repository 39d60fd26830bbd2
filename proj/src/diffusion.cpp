#include "dualsr/diffusion.hpp"

#include <cmath>
#include <Eigen/Core>

namespace dualsr::diffusion {

using nn::ConvSpec;
using nn::Init;

namespace {

const char* kVae = "diffusion.vae";
const char* kUnet = "diffusion.unet";

std::string vae(const std::string& leaf) { return std::string(kVae) + "." + leaf; }
std::string unet(const std::string& leaf) { return std::string(kUnet) + "." + leaf; }

template <typename T>
void require_image(const Var<T>& image, const char* what) {
  if (image.value().rank() != 4 || image.dim(1) != 3) {
    throw ShapeError(std::string(what) + ": expected [N,3,H,W], got " + shape_str(image.shape()));
  }
  if (image.dim(2) % 8 != 0 || image.dim(3) % 8 != 0) {
    throw ShapeError(std::string(what) + ": spatial dims must be divisible by 8, got " +
                     shape_str(image.shape()));
  }
}

// [N,D] -> [N,D,1,1]
template <typename T>
Var<T> as_channels(const Var<T>& v) {
  return ag::reshape(v, Shape{v.dim(0), v.dim(1), 1, 1});
}

}  // namespace

template <typename T>
void register_vae_params(ParamStore<T>& store, const ModelConfig& cfg) {
  const auto& w = cfg.vae_widths;
  const auto seed = cfg.init_seed;
  const auto base = ParamGroup::vae_base;
  nn::register_conv(store, vae("enc0"), ConvSpec{3, w[0], 3, Init::kaiming, base}, seed);
  nn::register_conv(store, vae("enc1"), ConvSpec{w[0], w[1], 3, Init::kaiming, base}, seed);
  nn::register_conv(store, vae("enc2"), ConvSpec{w[1], w[2], 3, Init::kaiming, base}, seed);
  nn::register_conv(store, vae("enc_out"), ConvSpec{w[2], cfg.latent_channels, 3, Init::kaiming, base}, seed);
  nn::register_conv(store, vae("dec_in"), ConvSpec{cfg.latent_channels, w[2], 3, Init::kaiming, base}, seed);
  nn::register_conv(store, vae("dec2"), ConvSpec{w[2], w[1], 3, Init::kaiming, base}, seed);
  nn::register_conv(store, vae("dec1"), ConvSpec{w[1], w[0], 3, Init::kaiming, base}, seed);
  nn::register_conv(store, vae("dec0"), ConvSpec{w[0], w[0], 3, Init::kaiming, base}, seed);
  nn::register_conv(store, vae("dec_out"), ConvSpec{w[0], 3, 3, Init::kaiming, base}, seed);
  for (int i = 0; i < 3; ++i) {
    nn::register_conv(store, vae("skip" + std::to_string(i)),
                      ConvSpec{w[i], w[i], 1, Init::zero, ParamGroup::fusion}, seed);
  }
}

template <typename T>
void register_unet_params(ParamStore<T>& store, const ModelConfig& cfg) {
  const auto& w = cfg.unet_widths;
  const int S = static_cast<int>(w.size());
  const auto seed = cfg.init_seed;
  const auto base = ParamGroup::unet_base;
  const int dt = cfg.time_embed_dim;
  nn::register_linear(store, unet("time.fc1"), dt, dt, Init::kaiming, base, false, seed);
  nn::register_linear(store, unet("time.fc2"), dt, dt, Init::kaiming, base, false, seed);
  nn::register_conv(store, unet("conv_in"), ConvSpec{cfg.latent_channels, w[0], 3, Init::kaiming, base}, seed);
  for (int i = 0; i < S; ++i) {
    const std::string p = "stage" + std::to_string(i);
    if (i > 0) nn::register_conv(store, unet(p + ".down"), ConvSpec{w[i - 1], w[i], 3, Init::kaiming, base}, seed);
    nn::register_linear(store, unet(p + ".temb"), dt, w[i], Init::kaiming, base, false, seed);
    nn::register_conv(store, unet(p + ".conv1"), ConvSpec{w[i], w[i], 3, Init::kaiming, base}, seed);
    nn::register_conv(store, unet(p + ".conv2"), ConvSpec{w[i], w[i], 3, Init::kaiming, base}, seed);
    if (cfg.has_guidance()) {
      // [identity | random]: passes the stage output through while the
      // (zero-initialized) projection is still silent, and lets gradient
      // reach the projection from the first step.
      const int p_ch = cfg.guidance_proj_channels[i];
      const int in = w[i] + p_ch;
      Tensor<T> fw(Shape{w[i], in, 1, 1});
      CounterRng rng(derive_key(seed, unet(p + ".fuse.weight")));
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      for (int o = 0; o < w[i]; ++o) {
        fw.at(o, o, 0, 0) = T(1);
        for (int c = 0; c < p_ch; ++c) fw.at(o, w[i] + c, 0, 0) = static_cast<T>(rng.uniform(-bound, bound));
      }
      store.add(unet(p + ".fuse.weight"), std::move(fw), ParamGroup::fusion);
      store.add(unet(p + ".fuse.bias"), Tensor<T>(Shape{w[i]}), ParamGroup::fusion);
    }
  }
  nn::register_linear(store, unet("mid.film_scale"), cfg.d_prompt, w[S - 1], Init::kaiming, base, false, seed);
  nn::register_linear(store, unet("mid.film_shift"), cfg.d_prompt, w[S - 1], Init::kaiming, base, false, seed);
  nn::register_conv(store, unet("mid.conv"), ConvSpec{w[S - 1], w[S - 1], 3, Init::kaiming, base}, seed);
  for (int i = S - 2; i >= 0; --i) {
    const std::string p = "dec" + std::to_string(i);
    nn::register_conv(store, unet(p + ".up"), ConvSpec{w[i + 1], w[i], 3, Init::kaiming, base}, seed);
    nn::register_conv(store, unet(p + ".conv1"), ConvSpec{2 * w[i], w[i], 3, Init::kaiming, base}, seed);
    nn::register_conv(store, unet(p + ".conv2"), ConvSpec{w[i], w[i], 3, Init::kaiming, base}, seed);
  }
  nn::register_conv(store, unet("conv_out"), ConvSpec{w[0], cfg.latent_channels, 3, Init::zero, ParamGroup::fusion},
                    seed);
}

template <typename T>
void register_prompt_params(ParamStore<T>& store, const ModelConfig& cfg) {
  CounterRng rng(derive_key(cfg.init_seed, "diffusion.prompt.constant"));
  store.add("diffusion.prompt.constant", nn::uniform_tensor<T>(Shape{1, cfg.d_prompt}, 1.0, rng), ParamGroup::prompt);
  nn::register_linear(store, "diffusion.prompt.from_image", 3, cfg.d_prompt, Init::zero, ParamGroup::prompt, false,
                      cfg.init_seed);
}

template <typename T>
Encoded<T> vae_encode(const ParamStore<T>& store, const Var<T>& image) {
  require_image(image, "vae_encode");
  Encoded<T> out;
  Var<T> h = ag::add_scalar(ag::scale(image, T(2)), T(-1));
  for (int i = 0; i < 3; ++i) {
    h = ag::silu(nn::conv(store, vae("enc" + std::to_string(i)), h, 2));
    out.skips.push_back(h);
  }
  out.latent = nn::conv(store, vae("enc_out"), h);
  return out;
}

template <typename T>
Var<T> vae_decode(const ParamStore<T>& store, const Var<T>& latent, const std::vector<Var<T>>& skips) {
  if (skips.size() != 3) {
    throw ShapeError("vae_decode: expected 3 encoder skips, got " + std::to_string(skips.size()));
  }
  auto inject = [&](const Var<T>& h, int level) {
    return ag::add(h, nn::conv(store, vae("skip" + std::to_string(level)), skips[level]));
  };
  Var<T> h = inject(ag::silu(nn::conv(store, vae("dec_in"), latent)), 2);
  h = inject(ag::silu(nn::conv(store, vae("dec2"), ag::upsample_nearest(h, 2))), 1);
  h = inject(ag::silu(nn::conv(store, vae("dec1"), ag::upsample_nearest(h, 2))), 0);
  h = ag::silu(nn::conv(store, vae("dec0"), ag::upsample_nearest(h, 2)));
  return ag::clamp(ag::add_scalar(nn::conv(store, vae("dec_out"), h), T(0.5)), T(0), T(1));
}

template <typename T>
Var<T> prompt_embed(const ParamStore<T>& store, const Var<T>& image) {
  const int N = image.dim(0);
  auto pooled = ag::reshape(ag::global_avg_pool(image), Shape{N, 3});
  auto from_image = nn::linear(store, "diffusion.prompt.from_image", pooled);
  // Broadcast the [1,d] constant over the batch through a ones column.
  auto ones = Var<T>(Tensor<T>(Shape{N, 1}, T(1)));
  return ag::add(ag::matmul(ones, store.var("diffusion.prompt.constant")), from_image);
}

template <typename T>
Tensor<T> timestep_embedding(int timestep, int dim) {
  const int half = dim / 2;
  Tensor<T> out(Shape{1, dim});
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    out[i] = static_cast<T>(std::sin(timestep * freq));
    out[half + i] = static_cast<T>(std::cos(timestep * freq));
  }
  return out;
}

template <typename T>
Var<T> unet_forward(const ParamStore<T>& store, const ModelConfig& cfg, const Var<T>& latent, int timestep,
                    const Var<T>& prompt, const guidance::GuidancePyramid<T>* pyramid) {
  const auto& w = cfg.unet_widths;
  const int S = static_cast<int>(w.size());
  if (latent.value().rank() != 4 || latent.dim(1) != cfg.latent_channels) {
    throw ShapeError("unet_forward: latent " + shape_str(latent.shape()));
  }
  if (prompt.value().rank() != 2 || prompt.dim(1) != cfg.d_prompt) {
    throw ShapeError("unet_forward: prompt " + shape_str(prompt.shape()));
  }
  if (cfg.has_guidance()) {
    if (pyramid == nullptr || pyramid->size() != static_cast<std::size_t>(S)) {
      throw ShapeError("unet_forward: guidance pyramid does not match " + std::to_string(S) + " encoder stages");
    }
  }

  Var<T> t_emb(timestep_embedding<T>(timestep, cfg.time_embed_dim));
  t_emb = ag::silu(nn::linear(store, unet("time.fc1"), t_emb));
  t_emb = ag::silu(nn::linear(store, unet("time.fc2"), t_emb));

  std::vector<Var<T>> skips;
  Var<T> h = nn::conv(store, unet("conv_in"), latent);
  for (int i = 0; i < S; ++i) {
    const std::string p = "stage" + std::to_string(i);
    if (i > 0) h = nn::conv(store, unet(p + ".down"), h, 2);
    auto temb = as_channels(nn::linear(store, unet(p + ".temb"), t_emb));
    auto r = ag::add_channel(nn::conv(store, unet(p + ".conv1"), ag::silu(h)), temb);
    h = ag::add(h, nn::conv(store, unet(p + ".conv2"), ag::silu(r)));
    if (cfg.has_guidance()) {
      const auto& g = pyramid->at(cfg.guidance_scales[i]);
      if (g.dim(0) != h.dim(0) || g.dim(2) != h.dim(2) || g.dim(3) != h.dim(3)) {
        throw ShapeError("unet_forward: guidance " + shape_str(g.shape()) + " vs stage " + shape_str(h.shape()));
      }
      h = nn::conv(store, unet(p + ".fuse"), ag::concat_channels<T>({h, g}));
    }
    skips.push_back(h);
  }

  // Prompt conditioning at the bottleneck: h * (1 + scale(F_p)) + shift(F_p).
  auto film_scale = as_channels(ag::add_scalar(nn::linear(store, unet("mid.film_scale"), prompt), T(1)));
  auto film_shift = as_channels(nn::linear(store, unet("mid.film_shift"), prompt));
  h = ag::add_channel(ag::mul_channel(h, film_scale), film_shift);
  h = ag::add(h, nn::conv(store, unet("mid.conv"), ag::silu(h)));

  for (int i = S - 2; i >= 0; --i) {
    const std::string p = "dec" + std::to_string(i);
    h = nn::conv(store, unet(p + ".up"), ag::upsample_nearest(h, 2));
    auto r = ag::silu(nn::conv(store, unet(p + ".conv1"), ag::concat_channels<T>({h, skips[i]})));
    h = ag::add(h, nn::conv(store, unet(p + ".conv2"), r));
  }
  return nn::conv(store, unet("conv_out"), ag::silu(h));
}

template <typename T>
Var<T> latent_skip(const Var<T>& residual, const Var<T>& latent) {
  return ag::add(residual, latent);
}

template <typename T>
DiffusionOutput<T> diffusion_forward(const ParamStore<T>& store, const ModelConfig& cfg, const Var<T>& image,
                                     const guidance::GuidancePyramid<T>* pyramid) {
  auto enc = vae_encode(store, image);
  auto prompt = prompt_embed(store, image);
  auto residual = unet_forward(store, cfg, enc.latent, cfg.fixed_timestep, prompt, pyramid);
  auto fused = cfg.has_long_skip() ? latent_skip(residual, enc.latent) : residual;
  return {vae_decode(store, fused, enc.skips), enc.latent, residual};
}

template <typename T>
Tensor<T> apply_lora(const Tensor<T>& base, const Tensor<T>& b, const Tensor<T>& a, double scale) {
  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const int d = base.dim(0);
  const int k = static_cast<int>(base.size() / d);
  if (b.rank() != 2 || a.rank() != 2 || b.dim(0) != d || a.dim(1) != k || b.dim(1) != a.dim(0)) {
    throw LoraError("LoRA factors " + shape_str(b.shape()) + " x " + shape_str(a.shape()) +
                    " do not match base " + shape_str(base.shape()));
  }
  Tensor<T> out = base;
  Eigen::Map<const RowMat> bm(b.data(), d, b.dim(1));
  Eigen::Map<const RowMat> am(a.data(), a.dim(0), k);
  Eigen::Map<RowMat> om(out.data(), d, k);
  const RowMat delta = bm * am;
  if (scale == 1.0) {
    om += delta;
  } else {
    om += static_cast<T>(scale) * delta;
  }
  return out;
}

template <typename T>
std::map<std::string, Tensor<T>> effective_weights(const ParamStore<T>& store) {
  std::map<std::string, Tensor<T>> out;
  for (const auto& [name, info] : store.lora_entries()) {
    out.emplace(name, apply_lora(store.get(name).value, store.get(lora_b_name(name)).value,
                                 store.get(lora_a_name(name)).value, info.scale));
  }
  return out;
}

template <typename T>
std::vector<LoraAdapter> attach_lora(ParamStore<T>& store, const ModelConfig& cfg) {
  if (!store.lora_entries().empty()) throw LoraError("LoRA adapters are already attached");
  std::vector<LoraAdapter> adapters;
  std::vector<std::pair<std::string, Tensor<T>>> factors;
  for (auto& [name, p] : store.entries()) {
    const bool is_unet = p.group == ParamGroup::unet_base;
    const bool is_vae = p.group == ParamGroup::vae_base;
    if (!is_unet && !is_vae) continue;
    p.frozen = true;
    const bool is_weight = name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
    if (!is_weight || p.value.rank() < 2) continue;
    const int rank = is_unet ? cfg.lora_rank_unet : cfg.lora_rank_vae;
    const double alpha = is_unet ? cfg.lora_alpha_unet : cfg.lora_alpha_vae;
    const int d = p.value.dim(0);
    const int k = static_cast<int>(p.value.size() / d);
    if (2 * rank > std::min(d, k)) continue;  // too narrow for a low-rank update
    LoraAdapter ad{name, rank, d, k, (alpha > 0.0 ? alpha : rank) / rank};
    CounterRng rng(derive_key(cfg.init_seed, lora_a_name(name)));
    factors.emplace_back(lora_a_name(name),
                         nn::uniform_tensor<T>(Shape{rank, k}, 1.0 / std::sqrt(static_cast<double>(k)), rng));
    factors.emplace_back(lora_b_name(name), Tensor<T>(Shape{d, rank}));
    adapters.push_back(ad);
  }
  for (auto& [name, t] : factors) store.add(name, std::move(t), ParamGroup::lora);
  for (const auto& ad : adapters) store.set_lora(ad.base_name, LoraInfo{ad.rank, ad.scale});
  return adapters;
}

#define DUALSR_INSTANTIATE_DIFFUSION(T)                                                                        \
  template void register_vae_params<T>(ParamStore<T>&, const ModelConfig&);                                    \
  template void register_unet_params<T>(ParamStore<T>&, const ModelConfig&);                                   \
  template void register_prompt_params<T>(ParamStore<T>&, const ModelConfig&);                                 \
  template Encoded<T> vae_encode<T>(const ParamStore<T>&, const Var<T>&);                                      \
  template Var<T> vae_decode<T>(const ParamStore<T>&, const Var<T>&, const std::vector<Var<T>>&);              \
  template Var<T> prompt_embed<T>(const ParamStore<T>&, const Var<T>&);                                        \
  template Tensor<T> timestep_embedding<T>(int, int);                                                          \
  template Var<T> unet_forward<T>(const ParamStore<T>&, const ModelConfig&, const Var<T>&, int, const Var<T>&, \
                                  const guidance::GuidancePyramid<T>*);                                        \
  template Var<T> latent_skip<T>(const Var<T>&, const Var<T>&);                                                \
  template DiffusionOutput<T> diffusion_forward<T>(const ParamStore<T>&, const ModelConfig&, const Var<T>&,    \
                                                   const guidance::GuidancePyramid<T>*);                       \
  template Tensor<T> apply_lora<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);              \
  template std::map<std::string, Tensor<T>> effective_weights<T>(const ParamStore<T>&);                        \
  template std::vector<LoraAdapter> attach_lora<T>(ParamStore<T>&, const ModelConfig&);

DUALSR_INSTANTIATE_DIFFUSION(float)
DUALSR_INSTANTIATE_DIFFUSION(double)

}  // namespace dualsr::diffusion
