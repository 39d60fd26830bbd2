#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualsr/image.hpp"
#include "dualsr/rng.hpp"
#include "json.hpp"

namespace dualsr::degradation {

class DegradationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DegradationConfig {
  std::vector<int> blur_kernel_sizes{7, 9, 11, 13, 15, 17, 19, 21};
  double blur_prob = 1.0;
  std::array<double, 2> blur_sigma_range{0.2, 3.0};
  double aniso_prob = 0.5;
  std::array<double, 2> resize_range{0.5, 1.5};
  // nearest, bilinear, bicubic
  std::array<double, 3> resize_mode_probs{1.0 / 3, 1.0 / 3, 1.0 / 3};
  double noise_prob = 1.0;
  double gaussian_noise_prob = 0.5;  // otherwise Poisson
  double gray_noise_prob = 0.4;
  std::array<double, 2> noise_sigma_range{1.0 / 255, 25.0 / 255};
  std::array<double, 2> poisson_scale_range{0.05, 2.0};
  double jpeg_prob = 1.0;
  std::array<int, 2> jpeg_quality_range{30, 95};
  double second_order_prob = 0.5;
  int final_scale = 4;
  std::array<double, 3> final_mode_probs{1.0 / 3, 1.0 / 3, 1.0 / 3};
  double flip_prob = 0.5;
  int crop_size = 0;  // HR crop taken from each source image; 0 keeps the whole image

  void validate() const;
  bool operator==(const DegradationConfig&) const = default;
};

void to_json(nlohmann::json& j, const DegradationConfig& c);
void from_json(const nlohmann::json& j, DegradationConfig& c);

enum class NoiseKind { gaussian, poisson };

struct TraceOp {
  std::string op;       // "blur", "resize", "noise", "jpeg"
  nlohmann::json args;  // sampled parameters, enough to replay the op
};

struct DegradationTrace {
  std::uint64_t seed = 0;
  std::uint64_t index = 0;
  std::vector<TraceOp> ops;
};

nlohmann::json trace_to_json(const DegradationTrace& t);
DegradationTrace trace_from_json(const nlohmann::json& j);

// Normalised k x k anisotropic Gaussian; sigmas along the axes rotated by theta.
std::vector<double> gaussian_kernel(int kernel_size, double sigma_x, double sigma_y, double theta);
// Per-channel convolution with reflect padding (edge pixel not repeated).
Image gaussian_blur(const Image& img, int kernel_size, double sigma_x, double sigma_y, double theta);

Image resize(const Image& img, double scale, ResizeMode mode);

// Gaussian: img + N(0, level^2); Poisson: img + level * (P(255 img)/255 - img).
// With gray set, one noise field is shared by all channels. Clamped to [0,1].
Image add_noise(const Image& img, NoiseKind kind, double level, bool gray, CounterRng& rng);

// 8x8 block DCT codec on YCbCr (no chroma subsampling) with the standard
// quantisation tables scaled by quality. Values stay floating point.
Image jpeg_compress(const Image& img, int quality);

struct Degraded {
  Image lr;
  DegradationTrace trace;
};

// blur -> resize -> noise -> jpeg, repeated with second_order_prob, then a
// final resize to H/final_scale x W/final_scale.
Degraded degrade(const Image& hr, std::uint64_t seed, std::uint64_t index, const DegradationConfig& cfg);
Image replay(const Image& hr, const DegradationTrace& trace);

bool flip_decision(std::uint64_t seed, std::uint64_t index, double prob);

struct DatasetEntry {
  int index = 0;
  std::string hr;     // paths relative to the dataset root
  std::string lr;
  std::string trace;
  std::string source;
  bool flipped = false;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::uint64_t seed = 0;
  int scale = 4;
  std::string config_hash;
  DegradationConfig config;
  std::vector<DatasetEntry> pairs;
};

// Writes {out}/hr/NNNNNN.png, {out}/lr/NNNNNN.png, {out}/traces/NNNNNN.json and
// {out}/manifest.json. Sources are the image files of hr_dir in name order,
// used cyclically.
DatasetManifest synth_dataset(const std::filesystem::path& hr_dir, const std::filesystem::path& out_dir, int n,
                              std::uint64_t seed, const DegradationConfig& cfg);

// Accepts the dataset directory or its manifest.json.
DatasetManifest load_manifest(const std::filesystem::path& path);

// Procedural "natural-ish" test imagery: smooth gradients, shapes with hard
// edges, stripes and fine texture.
Image synth_hr_image(int height, int width, std::uint64_t seed, std::uint64_t index);

}  // namespace dualsr::degradation
