#include "dualsr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "dualsr/diffusion.hpp"
#include "dualsr/model.hpp"

namespace dualsr {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint payload is written in host byte order");

namespace {

constexpr char kMagic[8] = {'D', 'S', 'R', 'C', 'K', 'P', 'T', '\0'};
constexpr int kVersion = 1;

void append_store(const ParamStore<float>& store, const char* which, json& table, std::vector<float>& payload) {
  for (const auto& [name, p] : store.entries()) {
    table.push_back(json{{"store", which},
                         {"name", name},
                         {"group", to_string(p.group)},
                         {"frozen", p.frozen},
                         {"shape", p.value.shape()},
                         {"offset", payload.size()}});
    payload.insert(payload.end(), p.value.storage().begin(), p.value.storage().end());
  }
}

void append_moments(const AdamState& st, const std::string& which, json& table, std::vector<float>& payload) {
  for (const auto* part : {"m", "v"}) {
    const auto& moments = std::string(part) == "m" ? st.m : st.v;
    for (const auto& [name, t] : moments) {
      table.push_back(json{{"store", which + "." + part}, {"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
      payload.insert(payload.end(), t.storage().begin(), t.storage().end());
    }
  }
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  json table = json::array();
  std::vector<float> payload;
  append_store(ckpt.generator, "generator", table, payload);
  append_store(ckpt.discriminator, "discriminator", table, payload);
  append_moments(ckpt.opt_g, "opt_g", table, payload);
  append_moments(ckpt.opt_d, "opt_d", table, payload);
  json lora = json::object();
  for (const auto& [name, info] : ckpt.generator.lora_entries()) {
    lora[name] = json{{"rank", info.rank}, {"scale", info.scale}};
  }
  const json manifest{{"version", kVersion},
                      {"model_config", ckpt.model},
                      {"train_config", ckpt.train},
                      {"model_hash", config_hash(json(ckpt.model))},
                      {"iteration", ckpt.iteration},
                      {"optimizer_steps", {ckpt.opt_g.step, ckpt.opt_d.step}},
                      {"tensors", table},
                      {"lora", lora},
                      {"payload_floats", payload.size()},
                      {"extra", ckpt.extra}};
  const std::string text = manifest.dump();
  const std::uint64_t len = text.size();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!out) throw CheckpointError("short write to " + path.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path, const ModelConfig* expected) {
  if (!fs::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const std::size_t header = sizeof(kMagic) + sizeof(std::uint64_t);
  if (bytes.size() < header) throw CheckpointError("truncated checkpoint " + path.string());
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint (bad magic): " + path.string());
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof(kMagic), sizeof(len));
  if (len > bytes.size() - header) throw CheckpointError("truncated checkpoint manifest in " + path.string());

  json manifest;
  try {
    manifest = json::parse(bytes.begin() + header, bytes.begin() + header + static_cast<std::ptrdiff_t>(len));
  } catch (const json::exception& e) {
    throw CheckpointError("corrupt checkpoint manifest in " + path.string() + ": " + e.what());
  }
  const int version = manifest.value("version", -1);
  if (version != kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }

  const std::size_t floats = manifest.at("payload_floats").get<std::size_t>();
  const std::size_t data_at = header + len;
  if (bytes.size() - data_at != floats * sizeof(float)) {
    throw CheckpointError("truncated checkpoint payload in " + path.string());
  }
  const char* data = bytes.data() + data_at;

  Checkpoint ckpt;
  try {
    ckpt.model = manifest.at("model_config").get<ModelConfig>();
    ckpt.train = manifest.at("train_config").get<TrainConfig>();
    ckpt.iteration = manifest.at("iteration").get<int>();
    ckpt.extra = manifest.value("extra", json::object());
    const json steps = manifest.value("optimizer_steps", json::array({0, 0}));
    ckpt.opt_g.step = steps.at(0).get<std::int64_t>();
    ckpt.opt_d.step = steps.at(1).get<std::int64_t>();
    for (const auto& t : manifest.at("tensors")) {
      const Shape shape = t.at("shape").get<Shape>();
      const std::size_t offset = t.at("offset").get<std::size_t>();
      Tensor<float> value(shape);
      if (offset + value.size() > floats) throw CheckpointError("tensor out of payload range in " + path.string());
      std::memcpy(value.data(), data + offset * sizeof(float), value.size() * sizeof(float));
      const std::string which = t.at("store").get<std::string>();
      const std::string name = t.at("name").get<std::string>();
      if (which.rfind("opt_", 0) == 0) {
        AdamState& st = which.substr(0, 5) == "opt_g" ? ckpt.opt_g : ckpt.opt_d;
        (which.back() == 'm' ? st.m : st.v).emplace(name, std::move(value));
        continue;
      }
      if (which != "generator" && which != "discriminator") throw CheckpointError("unknown tensor store " + which);
      auto& store = which == "generator" ? ckpt.generator : ckpt.discriminator;
      store.add(name, std::move(value), parse_param_group(t.at("group").get<std::string>()),
                t.at("frozen").get<bool>());
    }
    for (const auto& [name, info] : manifest.at("lora").items()) {
      ckpt.generator.set_lora(name, LoraInfo{info.at("rank").get<int>(), info.at("scale").get<double>()});
    }
  } catch (const json::exception& e) {
    throw CheckpointError("corrupt checkpoint manifest in " + path.string() + ": " + e.what());
  }

  if (expected) {
    if (!(ckpt.model == *expected)) {
      throw CheckpointError("checkpoint " + path.string() + " was written for a different model config (hash " +
                            config_hash(json(ckpt.model)) + ", expected " + config_hash(json(*expected)) + ")");
    }
    ParamStore<float> ref = build_generator<float>(*expected);
    if (!ckpt.generator.lora_entries().empty()) diffusion::attach_lora(ref, *expected);
    for (const auto& [name, p] : ref.entries()) {
      if (!ckpt.generator.contains(name)) throw CheckpointError("checkpoint is missing parameter " + name);
      const auto& got = ckpt.generator.get(name).value.shape();
      if (got != p.value.shape()) {
        throw CheckpointError("shape mismatch for " + name + ": checkpoint " + shape_str(got) + ", model " +
                              shape_str(p.value.shape()));
      }
    }
    if (ref.size() != ckpt.generator.size()) throw CheckpointError("checkpoint has unexpected extra parameters");
  }
  return ckpt;
}

}  // namespace dualsr
