#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "dualsr/params.hpp"

namespace dualsr {

struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, Tensor<float>> m;
  std::map<std::string, Tensor<float>> v;

  bool operator==(const AdamState&) const = default;
};

// Adam with decoupled weight decay. Decay is skipped for LoRA factors.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW() = default;
  explicit AdamW(Options opts) : opts_(opts) {}

  // Updates every non-frozen parameter that has an entry in `grads`.
  void step(ParamStore<float>& store, const std::map<std::string, Tensor<float>>& grads, double lr);

  const AdamState& state() const { return state_; }
  AdamState& state() { return state_; }
  const Options& options() const { return opts_; }

 private:
  Options opts_;
  AdamState state_;
};

}  // namespace dualsr
