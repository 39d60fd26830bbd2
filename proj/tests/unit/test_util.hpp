#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "dualsr/autograd.hpp"
#include "dualsr/config.hpp"
#include "dualsr/params.hpp"
#include "dualsr/rng.hpp"
#include "dualsr/training.hpp"

namespace dualsr::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  CounterRng rng(derive_key({seed, 0x7E57u}));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Central-difference check of d f / d x for a scalar function built from a
// single leaf. Returns the worst relative error over all entries.
inline double gradient_error(const Tensor<double>& x0, const std::function<Var<double>(const Var<double>&)>& f,
                             double h = 1e-6) {
  Var<double> leaf(x0, true);
  const Var<double> y = f(leaf);
  ag::backward(y);
  const Tensor<double> analytic = leaf.grad();
  double worst = 0.0;
  Tensor<double> x = x0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f(Var<double>(x)).item();
    x[i] = orig - h;
    const double down = f(Var<double>(x)).item();
    x[i] = orig;
    const double fd = (up - down) / (2 * h);
    const double a = analytic.empty() ? 0.0 : analytic[i];
    const double err = std::abs(fd - a) / std::max(1e-6, std::abs(fd) + std::abs(a));
    worst = std::max(worst, err);
  }
  return worst;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dualsr_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Replaces every parameter with small random values so that zero-initialised
// layers take part in oracle comparisons.
template <typename T>
void randomize(ParamStore<T>& store, std::uint64_t seed, double bound = 0.3) {
  std::uint64_t i = 0;
  for (auto& [name, p] : store.entries()) p.value = random_tensor<T>(p.value.shape(), seed * 1000 + i++, -bound, bound);
  store.release_graph();
}

namespace oracle {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Direct loop convolution with zero padding k/2.
inline Tensor<double> conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, int stride = 1) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), K = w.dim(2), pad = K / 2;
  const int oh = (H + 2 * pad - K) / stride + 1, ow = (W + 2 * pad - K) / stride + 1;
  Tensor<double> out({N, O, oh, ow});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = b.empty() ? 0.0 : b[o];
          for (int c = 0; c < C; ++c)
            for (int i = 0; i < K; ++i)
              for (int j = 0; j < K; ++j) {
                const int sy = y * stride + i - pad, sx = xx * stride + j - pad;
                if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                acc += w.at(o, c, i, j) * x.at(n, c, sy, sx);
              }
          out.at(n, o, y, xx) = acc;
        }
  return out;
}

inline Tensor<double> conv(const ParamStore<double>& s, const std::string& prefix, const Tensor<double>& x,
                           int stride = 1) {
  const Tensor<double> none;
  return conv(x, s.get(prefix + ".weight").value, s.contains(prefix + ".bias") ? s.get(prefix + ".bias").value : none,
              stride);
}

template <typename F>
Tensor<double> map(Tensor<double> t, F f) {
  for (auto& v : t.values()) v = f(v);
  return t;
}

inline Tensor<double> add(Tensor<double> a, const Tensor<double>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

inline Tensor<double> mul(Tensor<double> a, const Tensor<double>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] *= b[i];
  return a;
}

inline Tensor<double> avg_pool(const Tensor<double>& x) {
  Tensor<double> out({x.dim(0), x.dim(1), 1, 1});
  for (int n = 0; n < x.dim(0); ++n)
    for (int c = 0; c < x.dim(1); ++c) {
      double s = 0;
      for (int i = 0; i < x.dim(2); ++i)
        for (int j = 0; j < x.dim(3); ++j) s += x.at(n, c, i, j);
      out.at(n, c, 0, 0) = s / (x.dim(2) * x.dim(3));
    }
  return out;
}

inline Tensor<double> scale_channels(Tensor<double> x, const Tensor<double>& g) {
  for (int n = 0; n < x.dim(0); ++n)
    for (int c = 0; c < x.dim(1); ++c)
      for (int i = 0; i < x.dim(2); ++i)
        for (int j = 0; j < x.dim(3); ++j) x.at(n, c, i, j) *= g.at(n, c, 0, 0);
  return x;
}

}  // namespace oracle

// Small model used across tests to keep runtimes short.
inline ModelConfig tiny_model(Ablation ablation = Ablation::full) {
  ModelConfig c;
  c.base_channels = 4;
  c.guidance_blocks = 1;
  c.fca_per_frb = 1;
  c.latent_channels = 4;
  c.unet_widths = {16, 16, 16};
  c.guidance_proj_channels = {4, 4, 4};
  c.vae_widths = {8, 8, 16};
  c.time_embed_dim = 8;
  c.d_prompt = 8;
  c.disc_widths = {4, 8};
  c.perceptual_widths = {4, 4, 8};
  c.ablation = ablation;
  return c;
}

// L_final of the generator on one batch, with the adversarial term scored by
// `disc` (null drops it).
template <typename T>
Var<T> generator_loss(const ParamStore<T>& gen, const ParamStore<T>* disc, const ParamStore<T>& net,
                      const ModelConfig& model, const TrainConfig& train, const Tensor<T>& input,
                      const Tensor<T>& target) {
  const Var<T> y(target);
  const auto out = generator_forward(gen, model, Var<T>(input));
  const auto b1 = training::branch_loss(out.r1, y, disc, net, train);
  if (!out.r2.defined()) return b1.total;
  return training::final_loss(b1.total, training::branch_loss(out.r2, y, disc, net, train).total, train);
}

}  // namespace dualsr::testing
