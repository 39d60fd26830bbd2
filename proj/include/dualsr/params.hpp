#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dualsr/autograd.hpp"
#include "dualsr/rng.hpp"
#include "dualsr/tensor.hpp"

namespace dualsr {

enum class ParamGroup {
  guidance,
  vae_base,
  unet_base,
  lora,
  fusion,  // zero-convs, guidance fuse convs, the UNet output head
  prompt,
  discriminator,
  perceptual,
};

std::string to_string(ParamGroup g);
ParamGroup parse_param_group(const std::string& s);

template <typename T>
struct Parameter {
  Tensor<T> value;
  ParamGroup group = ParamGroup::guidance;
  bool frozen = false;
};

struct LoraInfo {
  int rank = 0;
  double scale = 1.0;  // alpha / rank
};

// Parameters keyed by dot-separated hierarchical names. During a forward
// pass var() hands out one leaf per name, so a parameter used several times
// (shared discriminator) accumulates a single gradient.
template <typename T>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<T> value, ParamGroup group, bool frozen = false);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Parameter<T>& get(const std::string& name) const;
  Parameter<T>& get(const std::string& name);
  const std::map<std::string, Parameter<T>>& entries() const { return params_; }
  std::map<std::string, Parameter<T>>& entries() { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  void set_lora(const std::string& base_name, LoraInfo info) { lora_[base_name] = info; }
  std::optional<LoraInfo> lora(const std::string& base_name) const;
  const std::map<std::string, LoraInfo>& lora_entries() const { return lora_; }

  // When disabled, new leaves never require grad (used to keep the
  // discriminator out of the generator update).
  void set_grad_enabled(bool on) const { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  Var<T> var(const std::string& name) const;
  void release_graph() const { leaves_.clear(); }
  // Gradient of every trainable leaf created since the last release_graph();
  // untouched trainables report zeros.
  std::map<std::string, Tensor<T>> gradients() const;

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, p] : params_) out.add(name, p.value.template cast<U>(), p.group, p.frozen);
    for (const auto& [name, info] : lora_) out.set_lora(name, info);
    out.set_grad_enabled(grad_enabled_);
    return out;
  }

 private:
  std::map<std::string, Parameter<T>> params_;
  std::map<std::string, LoraInfo> lora_;
  mutable std::map<std::string, ag::Var<T>> leaves_;
  mutable bool grad_enabled_ = true;
};

// Forward passes inside the scope build no backward closures for this
// store. Drops cached leaves on entry and exit.
template <typename T>
class NoGradScope {
 public:
  explicit NoGradScope(const ParamStore<T>& store) : store_(store), previous_(store.grad_enabled()) {
    store_.release_graph();
    store_.set_grad_enabled(false);
  }
  ~NoGradScope() {
    store_.release_graph();
    store_.set_grad_enabled(previous_);
  }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  const ParamStore<T>& store_;
  bool previous_;
};

std::string lora_a_name(const std::string& base_name);
std::string lora_b_name(const std::string& base_name);

namespace nn {

enum class Init {
  kaiming,   // weights U(+-sqrt(6/fan_in)), bias U(+-1/sqrt(fan_in))
  zero,      // weights and bias exactly 0
  identity,  // 1x1 conv: out channel o copies input channel o % in
};

struct ConvSpec {
  int in = 0;
  int out = 0;
  int kernel = 3;
  Init init = Init::kaiming;
  ParamGroup group = ParamGroup::guidance;
  bool frozen = false;
  bool bias = true;
};

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, CounterRng& rng);

// Registers "<prefix>.weight" [out,in,k,k] and "<prefix>.bias" [out].
template <typename T>
void register_conv(ParamStore<T>& store, const std::string& prefix, const ConvSpec& spec,
                   std::uint64_t seed);
// Registers "<prefix>.weight" [out,in] and "<prefix>.bias" [out].
template <typename T>
void register_linear(ParamStore<T>& store, const std::string& prefix, int in, int out, Init init,
                     ParamGroup group, bool frozen, std::uint64_t seed);

// W, or W + scale * reshape(B A) when an adapter is attached to `name`.
template <typename T>
Var<T> effective_weight(const ParamStore<T>& store, const std::string& name);

// Same-padding convolution through the (possibly adapted) weight.
template <typename T>
Var<T> conv(const ParamStore<T>& store, const std::string& prefix, const Var<T>& x, int stride = 1);

template <typename T>
Var<T> linear(const ParamStore<T>& store, const std::string& prefix, const Var<T>& x);

}  // namespace nn
}  // namespace dualsr
