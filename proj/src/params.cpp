#include "dualsr/params.hpp"

#include <cmath>
#include <stdexcept>

namespace dualsr {

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::guidance: return "guidance";
    case ParamGroup::vae_base: return "vae_base";
    case ParamGroup::unet_base: return "unet_base";
    case ParamGroup::lora: return "lora";
    case ParamGroup::fusion: return "fusion";
    case ParamGroup::prompt: return "prompt";
    case ParamGroup::discriminator: return "discriminator";
    case ParamGroup::perceptual: return "perceptual";
  }
  return "guidance";
}

ParamGroup parse_param_group(const std::string& s) {
  for (auto g : {ParamGroup::guidance, ParamGroup::vae_base, ParamGroup::unet_base, ParamGroup::lora,
                 ParamGroup::fusion, ParamGroup::prompt, ParamGroup::discriminator, ParamGroup::perceptual}) {
    if (to_string(g) == s) return g;
  }
  throw std::invalid_argument("unknown parameter group '" + s + "'");
}

std::string lora_a_name(const std::string& base_name) { return "lora." + base_name + ".A"; }
std::string lora_b_name(const std::string& base_name) { return "lora." + base_name + ".B"; }

template <typename T>
void ParamStore<T>::add(const std::string& name, Tensor<T> value, ParamGroup group, bool frozen) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  params_.emplace(name, Parameter<T>{std::move(value), group, frozen});
}

template <typename T>
const Parameter<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return it->second;
}

template <typename T>
Parameter<T>& ParamStore<T>::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return it->second;
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

template <typename T>
std::optional<LoraInfo> ParamStore<T>::lora(const std::string& base_name) const {
  auto it = lora_.find(base_name);
  if (it == lora_.end()) return std::nullopt;
  return it->second;
}

template <typename T>
Var<T> ParamStore<T>::var(const std::string& name) const {
  auto it = leaves_.find(name);
  if (it != leaves_.end()) return it->second;
  const auto& p = get(name);
  Var<T> leaf(p.value, grad_enabled_ && !p.frozen);
  leaves_.emplace(name, leaf);
  return leaf;
}

template <typename T>
std::map<std::string, Tensor<T>> ParamStore<T>::gradients() const {
  std::map<std::string, Tensor<T>> out;
  for (const auto& [name, p] : params_) {
    if (p.frozen) continue;
    auto it = leaves_.find(name);
    if (it != leaves_.end() && !it->second.grad().empty()) {
      out.emplace(name, it->second.grad());
    } else {
      out.emplace(name, Tensor<T>(p.value.shape()));
    }
  }
  return out;
}

template class ParamStore<float>;
template class ParamStore<double>;

namespace nn {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, CounterRng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
void register_conv(ParamStore<T>& store, const std::string& prefix, const ConvSpec& spec,
                   std::uint64_t seed) {
  const Shape wshape{spec.out, spec.in, spec.kernel, spec.kernel};
  Tensor<T> w(wshape);
  Tensor<T> b(Shape{spec.out});
  switch (spec.init) {
    case Init::kaiming: {
      const double fan_in = static_cast<double>(spec.in * spec.kernel * spec.kernel);
      CounterRng wr(derive_key(seed, prefix + ".weight"));
      w = uniform_tensor<T>(wshape, std::sqrt(6.0 / fan_in), wr);
      CounterRng br(derive_key(seed, prefix + ".bias"));
      b = uniform_tensor<T>(Shape{spec.out}, 1.0 / std::sqrt(fan_in), br);
      break;
    }
    case Init::zero:
      break;
    case Init::identity: {
      if (spec.kernel != 1) throw std::invalid_argument("identity init needs a 1x1 conv: " + prefix);
      for (int o = 0; o < spec.out; ++o) w.at(o, o % spec.in, 0, 0) = T(1);
      break;
    }
  }
  store.add(prefix + ".weight", std::move(w), spec.group, spec.frozen);
  if (spec.bias) store.add(prefix + ".bias", std::move(b), spec.group, spec.frozen);
}

template <typename T>
void register_linear(ParamStore<T>& store, const std::string& prefix, int in, int out, Init init,
                     ParamGroup group, bool frozen, std::uint64_t seed) {
  Tensor<T> w(Shape{out, in});
  Tensor<T> b(Shape{out});
  if (init == Init::kaiming) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    const double wbound = std::sqrt(6.0 / in);
    CounterRng wr(derive_key(seed, prefix + ".weight"));
    w = uniform_tensor<T>(Shape{out, in}, wbound, wr);
    CounterRng br(derive_key(seed, prefix + ".bias"));
    b = uniform_tensor<T>(Shape{out}, bound, br);
  } else if (init == Init::identity) {
    throw std::invalid_argument("identity init is only defined for 1x1 convs: " + prefix);
  }
  store.add(prefix + ".weight", std::move(w), group, frozen);
  store.add(prefix + ".bias", std::move(b), group, frozen);
}

template <typename T>
Var<T> effective_weight(const ParamStore<T>& store, const std::string& name) {
  Var<T> w = store.var(name);
  auto info = store.lora(name);
  if (!info) return w;
  Var<T> delta = ag::matmul(store.var(lora_b_name(name)), store.var(lora_a_name(name)));
  if (info->scale != 1.0) delta = ag::scale(delta, static_cast<T>(info->scale));
  return ag::add(w, ag::reshape(delta, w.shape()));
}

template <typename T>
Var<T> conv(const ParamStore<T>& store, const std::string& prefix, const Var<T>& x, int stride) {
  Var<T> w = effective_weight(store, prefix + ".weight");
  Var<T> b = store.contains(prefix + ".bias") ? store.var(prefix + ".bias") : Var<T>();
  return ag::conv2d(x, w, b, stride, w.dim(2) / 2);
}

template <typename T>
Var<T> linear(const ParamStore<T>& store, const std::string& prefix, const Var<T>& x) {
  Var<T> w = effective_weight(store, prefix + ".weight");
  return ag::linear(x, w, store.var(prefix + ".bias"));
}

#define DUALSR_INSTANTIATE_NN(T)                                                              \
  template Tensor<T> uniform_tensor<T>(Shape, double, CounterRng&);                           \
  template void register_conv<T>(ParamStore<T>&, const std::string&, const ConvSpec&,          \
                                 std::uint64_t);                                              \
  template void register_linear<T>(ParamStore<T>&, const std::string&, int, int, Init,         \
                                   ParamGroup, bool, std::uint64_t);                          \
  template Var<T> effective_weight<T>(const ParamStore<T>&, const std::string&);              \
  template Var<T> conv<T>(const ParamStore<T>&, const std::string&, const Var<T>&, int);      \
  template Var<T> linear<T>(const ParamStore<T>&, const std::string&, const Var<T>&);

DUALSR_INSTANTIATE_NN(float)
DUALSR_INSTANTIATE_NN(double)

}  // namespace nn
}  // namespace dualsr
