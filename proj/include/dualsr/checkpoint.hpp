#pragma once

#include <filesystem>
#include <stdexcept>

#include "dualsr/config.hpp"
#include "dualsr/optim.hpp"
#include "dualsr/params.hpp"
#include "json.hpp"

namespace dualsr {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  int iteration = 0;
  ParamStore<float> generator;
  ParamStore<float> discriminator;
  AdamState opt_g;
  AdamState opt_d;
  nlohmann::json extra = nlohmann::json::object();
};

// Layout: 8-byte magic, little-endian u64 manifest length, JSON manifest
// (configs, tensor table, adapters, optimizer steps), then the float32 payload.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

// Throws on missing files, bad magic/version, truncation and, when `expected`
// is given, on any parameter name or shape that disagrees with a generator
// built from it.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

}  // namespace dualsr
