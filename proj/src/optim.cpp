#include "dualsr/optim.hpp"

#include <cmath>

namespace dualsr {

void AdamW::step(ParamStore<float>& store, const std::map<std::string, Tensor<float>>& grads, double lr) {
  ++state_.step;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(state_.step));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(state_.step));
  for (const auto& [name, g] : grads) {
    auto& p = store.get(name);
    if (p.frozen) continue;
    require_same_shape(p.value, g, name.c_str());
    auto [mit, m_new] = state_.m.try_emplace(name, p.value.shape());
    auto [vit, v_new] = state_.v.try_emplace(name, p.value.shape());
    auto& m = mit->second;
    auto& v = vit->second;
    const double decay = p.group == ParamGroup::lora ? 0.0 : opts_.weight_decay;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i];
      const double mi = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * gi;
      const double vi = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      double w = p.value[i];
      w -= lr * decay * w;
      w -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + opts_.eps);
      p.value[i] = static_cast<float>(w);
    }
  }
}

}  // namespace dualsr
