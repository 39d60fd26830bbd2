#include "dualsr/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "dualsr/checkpoint.hpp"
#include "dualsr/degradation.hpp"
#include "dualsr/evaluation.hpp"
#include "dualsr/model.hpp"
#include "dualsr/training.hpp"

namespace dualsr::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// CLI11 consumes arguments from the back.
int parse(CLI::App& app, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? -1 : kUsageError;
  }
  return kOk;
}

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

// --seed, then GUIDESR_SEED, then the fallback.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
  if (flag) return *flag;
  if (const char* env = std::getenv("GUIDESR_SEED")) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
      return v;
    } catch (const std::exception&) {
      throw UsageError(std::string("GUIDESR_SEED is not an unsigned integer: ") + env);
    }
  }
  return fallback;
}

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string join(const std::vector<std::string>& args) {
  std::string s;
  for (const auto& a : args) s += (s.empty() ? "" : " ") + a;
  return s;
}

}  // namespace

int cmd_gen_hr(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("Write procedural HR source images", "dualsr gen-hr");
  std::string dir;
  int n = 0, size = 256;
  std::optional<std::uint64_t> seed;
  app.add_option("--out", dir, "output directory")->required();
  app.add_option("--n", n, "number of images")->required()->check(CLI::PositiveNumber);
  app.add_option("--size", size, "side length in pixels")->check(CLI::PositiveNumber);
  app.add_option("--seed", seed, "random seed");
  if (int code = parse(app, args, out, err); code != kOk) return code < 0 ? kOk : code;
  return guarded(err, [&] {
    const std::uint64_t s = resolve_seed(seed, 0);
    for (int i = 0; i < n; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "src_%04d.png", i);
      write_png(fs::path(dir) / name, degradation::synth_hr_image(size, size, s, static_cast<std::uint64_t>(i)));
    }
    out << dir << "\n";
    return kOk;
  });
}

int cmd_synth(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("Synthesize degraded LR/HR training pairs", "dualsr synth");
  std::string hr_dir, out_dir, config;
  int n = 0;
  std::optional<std::uint64_t> seed;
  app.add_option("--hr-dir", hr_dir, "directory of HR source images")->required();
  app.add_option("--out", out_dir, "dataset output directory")->required();
  app.add_option("--n", n, "number of pairs")->required()->check(CLI::PositiveNumber);
  app.add_option("--seed", seed, "random seed (falls back to GUIDESR_SEED, then 0)");
  app.add_option("--config", config, "JSON config; degradation settings under \"degradation\"");
  if (int code = parse(app, args, out, err); code != kOk) return code < 0 ? kOk : code;
  return guarded(err, [&] {
    degradation::DegradationConfig cfg;
    if (!config.empty()) {
      const json j = read_json_file(config);
      try {
        cfg = (j.contains("degradation") ? j.at("degradation") : j).get<degradation::DegradationConfig>();
      } catch (const std::exception& e) {
        throw UsageError(std::string("bad degradation config: ") + e.what());
      }
    }
    degradation::synth_dataset(hr_dir, out_dir, n, resolve_seed(seed, 0), cfg);
    out << (fs::path(out_dir) / "manifest.json").string() << "\n";
    return kOk;
  });
}

int cmd_train(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("Train the super-resolution model", "dualsr train");
  std::string data, out_dir, config, ablation, vae_init;
  int iters = 0;
  bool verbose = false;
  std::optional<std::uint64_t> seed;
  app.add_option("--data", data, "dataset directory written by synth")->required();
  app.add_option("--out", out_dir, "run directory")->required();
  app.add_option("--iters", iters, "training iterations")->required()->check(CLI::NonNegativeNumber);
  app.add_option("--seed", seed, "random seed (falls back to GUIDESR_SEED, then the config)");
  app.add_option("--config", config, "JSON config with \"model\" and \"train\" sections");
  app.add_option("--ablation", ablation, "baseline | +longskip | +guidance | full")
      ->check(CLI::IsMember({"baseline", "+longskip", "+guidance", "full"}));
  app.add_option("--vae-init", vae_init, "checkpoint providing pretrained VAE base weights");
  app.add_flag("--verbose", verbose, "progress on stderr");
  if (int code = parse(app, args, out, err); code != kOk) return code < 0 ? kOk : code;
  return guarded(err, [&] {
    training::FitOptions opts;
    if (!config.empty()) {
      const json j = read_json_file(config);
      try {
        if (j.contains("model")) opts.model = j.at("model").get<ModelConfig>();
        if (j.contains("train")) opts.train = j.at("train").get<TrainConfig>();
      } catch (const std::exception& e) {
        throw UsageError(std::string("bad config: ") + e.what());
      }
    }
    if (!ablation.empty()) opts.model.ablation = parse_ablation(ablation);
    const std::uint64_t s = resolve_seed(seed, opts.train.seed);
    opts.train.seed = s;
    opts.model.init_seed = s;
    opts.train.total_iters = iters;
    opts.data = data;
    opts.out = out_dir;
    opts.verbose = verbose;
    if (!vae_init.empty()) opts.vae_init = fs::path(vae_init);

    const json cfg_json{{"model", opts.model}, {"train", opts.train}};
    json manifest{{"command", "train"},
                  {"args", join(args)},
                  {"seed", s},
                  {"config_hash", config_hash(cfg_json)},
                  {"config", cfg_json},
                  {"started_at", utc_now()}};
    fs::create_directories(out_dir);
    write_json(fs::path(out_dir) / "manifest.json", manifest);

    const auto result = training::fit(opts);
    manifest["finished_at"] = utc_now();
    manifest["artifacts"] = json{{"losses", "losses.log"},
                                 {"last_checkpoint", "ckpt/last.ckpt"},
                                 {"best_checkpoint", "ckpt/best.ckpt"},
                                 {"eval", "eval/"}};
    manifest["best_holdout_psnr"] = result.best_psnr;
    manifest["best_iteration"] = result.best_iteration;
    write_json(fs::path(out_dir) / "manifest.json", manifest);
    out << result.last_checkpoint.string() << "\n";
    return kOk;
  });
}

int cmd_infer(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("Super-resolve one image", "dualsr infer");
  std::string ckpt_path, input, output;
  int scale = 4;
  bool emit_guidance = false;
  app.add_option("--ckpt", ckpt_path, "checkpoint")->required();
  app.add_option("--input", input, "low-resolution image")->required();
  app.add_option("--output", output, "output PNG for R1")->required();
  app.add_option("--scale", scale, "bicubic pre-upsampling factor")->check(CLI::PositiveNumber);
  app.add_flag("--emit-guidance", emit_guidance, "also write the guidance image R2 as <output>_r2.png");
  if (int code = parse(app, args, out, err); code != kOk) return code < 0 ? kOk : code;
  return guarded(err, [&] {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const Image up = upsample_input(read_image(input), scale);
    const int multiple = ckpt.model.spatial_multiple();
    const int H = up.dim(1), W = up.dim(2);
    InferenceResult r;
    if (H % multiple != 0 || W % multiple != 0) {
      err << "warning: upsampled size " << H << "x" << W << " is not a multiple of " << multiple
          << "; reflect-padding and cropping back\n";
      r = run_inference(ckpt.generator, ckpt.model, pad_reflect_to_multiple(up, multiple));
      r.r1 = crop(r.r1, 0, 0, H, W);
      if (!r.r2.empty()) r.r2 = crop(r.r2, 0, 0, H, W);
    } else {
      r = run_inference(ckpt.generator, ckpt.model, up);
    }
    write_png(output, r.r1);
    out << output << "\n";
    if (emit_guidance) {
      if (r.r2.empty()) {
        err << "warning: this model has no guidance branch; nothing to emit\n";
      } else {
        const fs::path p(output);
        const fs::path r2 = p.parent_path() / (p.stem().string() + "_r2.png");
        write_png(r2, r.r2);
        out << r2.string() << "\n";
      }
    }
    return kOk;
  });
}

int cmd_eval(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("Score a checkpoint on a paired dataset", "dualsr eval");
  std::string ckpt_path, data, out_path;
  bool hr_sanity = false;
  app.add_option("--ckpt", ckpt_path, "checkpoint")->required();
  app.add_option("--data", data, "dataset directory")->required();
  app.add_option("--out", out_path, "report file (JSON)")->required();
  app.add_flag("--hr-sanity", hr_sanity, "score HR against itself");
  if (int code = parse(app, args, out, err); code != kOk) return code < 0 ? kOk : code;
  return guarded(err, [&] {
    const auto rep = evaluation::evaluate(ckpt_path, data, hr_sanity);
    evaluation::write_report(out_path, rep);
    out << "psnr " << rep.aggregate.at("psnr") << " ssim " << rep.aggregate.at("ssim") << " lpips "
        << rep.aggregate.at("lpips");
    if (rep.fid) out << " fid " << *rep.fid;
    out << " n " << rep.per_image.size() << "\n";
    return kOk;
  });
}

int cmd_report(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("Combine metric reports into radar and aggregate tables", "dualsr report");
  std::vector<std::string> reports;
  std::string out_dir;
  app.add_option("--reports", reports, "metric report files")->required()->expected(1, -1);
  app.add_option("--out", out_dir, "output directory")->required();
  if (int code = parse(app, args, out, err); code != kOk) return code < 0 ? kOk : code;
  return guarded(err, [&] {
    std::vector<evaluation::MetricReport> loaded;
    for (const auto& r : reports) loaded.push_back(evaluation::read_report(r));
    const auto table = evaluation::export_radar(loaded);
    fs::create_directories(out_dir);
    std::ofstream(fs::path(out_dir) / "radar.tsv") << evaluation::radar_to_tsv(table);
    std::ofstream(fs::path(out_dir) / "aggregate.tsv") << evaluation::aggregate_to_tsv(table);
    out << evaluation::aggregate_to_tsv(table);
    return kOk;
  });
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  static const char* usage = "usage: dualsr <gen-hr|synth|train|infer|eval|report> [options]\n";
  if (args.empty()) {
    err << usage;
    return kUsageError;
  }
  const std::string cmd = args.front();
  const std::vector<std::string> rest(args.begin() + 1, args.end());
  if (cmd == "gen-hr") return cmd_gen_hr(rest, out, err);
  if (cmd == "synth") return cmd_synth(rest, out, err);
  if (cmd == "train") return cmd_train(rest, out, err);
  if (cmd == "infer") return cmd_infer(rest, out, err);
  if (cmd == "eval") return cmd_eval(rest, out, err);
  if (cmd == "report") return cmd_report(rest, out, err);
  if (cmd == "-h" || cmd == "--help") {
    out << usage;
    return kOk;
  }
  err << "unknown command '" << cmd << "'\n" << usage;
  return kUsageError;
}

}  // namespace dualsr::cli
