#include "dualsr/degradation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>

#include "dualsr/config.hpp"

namespace dualsr::degradation {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_range(const std::array<double, 2>& r, const char* what) {
  if (!(r[0] <= r[1])) throw DegradationError(std::string(what) + ": range must satisfy lo <= hi");
}

void check_prob(double p, const char* what) {
  if (!(p >= 0.0 && p <= 1.0)) throw DegradationError(std::string(what) + " must lie in [0,1]");
}

void check_mode_probs(const std::array<double, 3>& p, const char* what) {
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw DegradationError(std::string(what) + " must be non-negative");
    total += v;
  }
  if (!(total > 0.0)) throw DegradationError(std::string(what) + " must not all be zero");
}

ResizeMode pick_mode(CounterRng& rng, const std::array<double, 3>& probs) {
  const double total = probs[0] + probs[1] + probs[2];
  const double u = rng.uniform() * total;
  if (u < probs[0]) return ResizeMode::nearest;
  if (u < probs[0] + probs[1]) return ResizeMode::bilinear;
  return ResizeMode::bicubic;
}

int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

std::string index_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", i);
  return buf;
}

// ---- JPEG -------------------------------------------------------------------

constexpr int kLumaTable[64] = {16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
                                14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
                                18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
                                49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
constexpr int kChromaTable[64] = {17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
                                  24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
                                  99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
                                  99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

std::array<int, 64> scaled_table(const int* base, int quality) {
  const int s = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::array<int, 64> t{};
  for (int i = 0; i < 64; ++i) t[i] = std::clamp((base[i] * s + 50) / 100, 1, 255);
  return t;
}

struct DctBasis {
  double m[8][8];
  DctBasis() {
    for (int u = 0; u < 8; ++u)
      for (int x = 0; x < 8; ++x) {
        const double c = u == 0 ? 1.0 / std::sqrt(2.0) : 1.0;
        m[u][x] = 0.5 * c * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
      }
  }
};

const DctBasis& dct_basis() {
  static const DctBasis basis;
  return basis;
}

void code_block(double blk[8][8], const std::array<int, 64>& table) {
  const auto& M = dct_basis().m;
  double tmp[8][8], coef[8][8];
  for (int u = 0; u < 8; ++u)
    for (int x = 0; x < 8; ++x) {
      double acc = 0.0;
      for (int y = 0; y < 8; ++y) acc += M[u][y] * blk[y][x];
      tmp[u][x] = acc;
    }
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 8; ++v) {
      double acc = 0.0;
      for (int x = 0; x < 8; ++x) acc += tmp[u][x] * M[v][x];
      const double q = table[u * 8 + v];
      coef[u][v] = std::round(acc / q) * q;
    }
  for (int y = 0; y < 8; ++y)
    for (int v = 0; v < 8; ++v) {
      double acc = 0.0;
      for (int u = 0; u < 8; ++u) acc += M[u][y] * coef[u][v];
      tmp[y][v] = acc;
    }
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      double acc = 0.0;
      for (int v = 0; v < 8; ++v) acc += tmp[y][v] * M[v][x];
      blk[y][x] = acc;
    }
}

// ---- op application -----------------------------------------------------------

Image apply_op(const TraceOp& op, const Image& img) {
  const auto& a = op.args;
  if (op.op == "blur") {
    return gaussian_blur(img, a.at("kernel").get<int>(), a.at("sigma_x").get<double>(),
                         a.at("sigma_y").get<double>(), a.at("theta").get<double>());
  }
  if (op.op == "resize") {
    return clamp01(dualsr::resize(img, a.at("out_h").get<int>(), a.at("out_w").get<int>(),
                                   parse_resize_mode(a.at("mode").get<std::string>())));
  }
  if (op.op == "noise") {
    CounterRng rng(a.at("key").get<std::uint64_t>());
    const auto kind = a.at("kind").get<std::string>() == "gaussian" ? NoiseKind::gaussian : NoiseKind::poisson;
    return add_noise(img, kind, a.at("level").get<double>(), a.at("gray").get<bool>(), rng);
  }
  if (op.op == "jpeg") return jpeg_compress(img, a.at("quality").get<int>());
  throw DegradationError("unknown degradation op '" + op.op + "'");
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DegradationError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DegradationError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DegradationError("cannot write " + path.string());
  out << text;
}

}  // namespace

void DegradationConfig::validate() const {
  if (blur_kernel_sizes.empty()) throw DegradationError("blur_kernel_sizes must not be empty");
  for (int k : blur_kernel_sizes) {
    if (k < 1 || k % 2 == 0) throw DegradationError("blur kernel sizes must be odd and positive");
  }
  check_range(blur_sigma_range, "blur_sigma_range");
  if (!(blur_sigma_range[0] > 0.0)) throw DegradationError("blur sigma must be positive");
  check_range(resize_range, "resize_range");
  if (!(resize_range[0] > 0.0)) throw DegradationError("resize scale must be positive");
  check_range(noise_sigma_range, "noise_sigma_range");
  check_range(poisson_scale_range, "poisson_scale_range");
  if (noise_sigma_range[0] < 0.0 || poisson_scale_range[0] < 0.0) throw DegradationError("noise levels must be >= 0");
  if (jpeg_quality_range[0] > jpeg_quality_range[1] || jpeg_quality_range[0] < 1 || jpeg_quality_range[1] > 100) {
    throw DegradationError("jpeg_quality_range must be ordered within [1,100]");
  }
  check_prob(blur_prob, "blur_prob");
  check_prob(aniso_prob, "aniso_prob");
  check_prob(noise_prob, "noise_prob");
  check_prob(gaussian_noise_prob, "gaussian_noise_prob");
  check_prob(gray_noise_prob, "gray_noise_prob");
  check_prob(jpeg_prob, "jpeg_prob");
  check_prob(second_order_prob, "second_order_prob");
  check_prob(flip_prob, "flip_prob");
  check_mode_probs(resize_mode_probs, "resize_mode_probs");
  check_mode_probs(final_mode_probs, "final_mode_probs");
  if (final_scale < 1) throw DegradationError("final_scale must be >= 1");
  if (crop_size < 0) throw DegradationError("crop_size must be >= 0");
}

void to_json(json& j, const DegradationConfig& c) {
  j = json{{"blur_kernel_sizes", c.blur_kernel_sizes},
           {"blur_prob", c.blur_prob},
           {"blur_sigma_range", c.blur_sigma_range},
           {"aniso_prob", c.aniso_prob},
           {"resize_range", c.resize_range},
           {"resize_mode_probs", c.resize_mode_probs},
           {"noise_prob", c.noise_prob},
           {"gaussian_noise_prob", c.gaussian_noise_prob},
           {"gray_noise_prob", c.gray_noise_prob},
           {"noise_sigma_range", c.noise_sigma_range},
           {"poisson_scale_range", c.poisson_scale_range},
           {"jpeg_prob", c.jpeg_prob},
           {"jpeg_quality_range", c.jpeg_quality_range},
           {"second_order_prob", c.second_order_prob},
           {"final_scale", c.final_scale},
           {"final_mode_probs", c.final_mode_probs},
           {"flip_prob", c.flip_prob},
           {"crop_size", c.crop_size}};
}

void from_json(const json& j, DegradationConfig& c) {
  DegradationConfig d;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("blur_kernel_sizes", d.blur_kernel_sizes);
  get("blur_prob", d.blur_prob);
  get("blur_sigma_range", d.blur_sigma_range);
  get("aniso_prob", d.aniso_prob);
  get("resize_range", d.resize_range);
  get("resize_mode_probs", d.resize_mode_probs);
  get("noise_prob", d.noise_prob);
  get("gaussian_noise_prob", d.gaussian_noise_prob);
  get("gray_noise_prob", d.gray_noise_prob);
  get("noise_sigma_range", d.noise_sigma_range);
  get("poisson_scale_range", d.poisson_scale_range);
  get("jpeg_prob", d.jpeg_prob);
  get("jpeg_quality_range", d.jpeg_quality_range);
  get("second_order_prob", d.second_order_prob);
  get("final_scale", d.final_scale);
  get("final_mode_probs", d.final_mode_probs);
  get("flip_prob", d.flip_prob);
  get("crop_size", d.crop_size);
  for (const auto& [key, _] : j.items()) {
    if (!json(d).contains(key)) throw ConfigError("unknown degradation config key '" + key + "'");
  }
  c = d;
}

json trace_to_json(const DegradationTrace& t) {
  json ops = json::array();
  for (const auto& op : t.ops) ops.push_back(json{{"op", op.op}, {"args", op.args}});
  return json{{"seed", t.seed}, {"index", t.index}, {"ops", ops}};
}

DegradationTrace trace_from_json(const json& j) {
  DegradationTrace t;
  t.seed = j.at("seed").get<std::uint64_t>();
  t.index = j.at("index").get<std::uint64_t>();
  for (const auto& op : j.at("ops")) t.ops.push_back({op.at("op").get<std::string>(), op.at("args")});
  return t;
}

std::vector<double> gaussian_kernel(int kernel_size, double sigma_x, double sigma_y, double theta) {
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw DegradationError("blur kernel size must be odd, got " + std::to_string(kernel_size));
  }
  if (!(sigma_x > 0.0) || !(sigma_y > 0.0)) throw DegradationError("blur sigma must be positive");
  const int r = kernel_size / 2;
  const double c = std::cos(theta), s = std::sin(theta);
  std::vector<double> k(static_cast<std::size_t>(kernel_size) * kernel_size);
  double total = 0.0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      const double u = c * dx + s * dy;
      const double v = -s * dx + c * dy;
      const double w = std::exp(-0.5 * (u * u / (sigma_x * sigma_x) + v * v / (sigma_y * sigma_y)));
      k[static_cast<std::size_t>(dy + r) * kernel_size + (dx + r)] = w;
      total += w;
    }
  for (auto& w : k) w /= total;
  return k;
}

Image gaussian_blur(const Image& img, int kernel_size, double sigma_x, double sigma_y, double theta) {
  const auto k = gaussian_kernel(kernel_size, sigma_x, sigma_y, theta);
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2), r = kernel_size / 2;
  std::vector<int> ry(H + 2 * r), rx(W + 2 * r);
  for (int i = 0; i < H + 2 * r; ++i) ry[i] = reflect(i - r, H);
  for (int i = 0; i < W + 2 * r; ++i) rx[i] = reflect(i - r, W);
  Image out({C, H, W});
  for (int c = 0; c < C; ++c) {
    const float* src = img.data() + static_cast<std::size_t>(c) * H * W;
    float* dst = out.data() + static_cast<std::size_t>(c) * H * W;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int i = 0; i < kernel_size; ++i) {
          const float* row = src + static_cast<std::size_t>(ry[y + i]) * W;
          const double* krow = k.data() + static_cast<std::size_t>(i) * kernel_size;
          for (int j = 0; j < kernel_size; ++j) acc += krow[j] * row[rx[x + j]];
        }
        dst[static_cast<std::size_t>(y) * W + x] = static_cast<float>(acc);
      }
  }
  return out;
}

Image resize(const Image& img, double scale, ResizeMode mode) { return clamp01(resize_by(img, scale, mode)); }

Image add_noise(const Image& img, NoiseKind kind, double level, bool gray, CounterRng& rng) {
  if (!(level >= 0.0)) throw DegradationError("noise level must be >= 0");
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Image out = img;
  if (level == 0.0) return out;
  auto sample = [&](double base) {
    if (kind == NoiseKind::gaussian) return level * rng.normal();
    const double lam = std::max(base, 0.0) * 255.0;
    return level * (static_cast<double>(rng.poisson(lam)) / 255.0 - base);
  };
  if (gray) {
    for (std::size_t p = 0; p < plane; ++p) {
      double luma = 0.0;
      if (kind == NoiseKind::poisson) {
        luma = 0.299 * img[p] + 0.587 * img[plane + p] + 0.114 * img[2 * plane + p];
      }
      const double n = sample(luma);
      for (int c = 0; c < C; ++c) out[c * plane + p] = static_cast<float>(img[c * plane + p] + n);
    }
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(img[i] + sample(img[i]));
  }
  return clamp01(std::move(out));
}

Image jpeg_compress(const Image& img, int quality) {
  if (quality < 1 || quality > 100) throw DegradationError("jpeg quality must lie in [1,100]");
  if (img.rank() != 3 || img.dim(0) != 3) throw DegradationError("jpeg expects an RGB image");
  const int H = img.dim(1), W = img.dim(2);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const auto luma_t = scaled_table(kLumaTable, quality);
  const auto chroma_t = scaled_table(kChromaTable, quality);

  std::vector<double> ycc(3 * plane);
  for (std::size_t p = 0; p < plane; ++p) {
    const double r = img[p] * 255.0, g = img[plane + p] * 255.0, b = img[2 * plane + p] * 255.0;
    ycc[p] = 0.299 * r + 0.587 * g + 0.114 * b;
    ycc[plane + p] = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
    ycc[2 * plane + p] = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
  }
  double blk[8][8];
  for (int c = 0; c < 3; ++c) {
    double* ch = ycc.data() + c * plane;
    const auto& table = c == 0 ? luma_t : chroma_t;
    for (int by = 0; by < H; by += 8)
      for (int bx = 0; bx < W; bx += 8) {
        // Edge blocks replicate the last row/column.
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x) {
            const int sy = std::min(by + y, H - 1), sx = std::min(bx + x, W - 1);
            blk[y][x] = ch[static_cast<std::size_t>(sy) * W + sx] - 128.0;
          }
        code_block(blk, table);
        for (int y = 0; y < 8 && by + y < H; ++y)
          for (int x = 0; x < 8 && bx + x < W; ++x) ch[static_cast<std::size_t>(by + y) * W + bx + x] = blk[y][x] + 128.0;
      }
  }
  Image out({3, H, W});
  for (std::size_t p = 0; p < plane; ++p) {
    const double y = ycc[p], cb = ycc[plane + p] - 128.0, cr = ycc[2 * plane + p] - 128.0;
    out[p] = static_cast<float>((y + 1.402 * cr) / 255.0);
    out[plane + p] = static_cast<float>((y - 0.344136 * cb - 0.714136 * cr) / 255.0);
    out[2 * plane + p] = static_cast<float>((y + 1.772 * cb) / 255.0);
  }
  return clamp01(std::move(out));
}

Degraded degrade(const Image& hr, std::uint64_t seed, std::uint64_t index, const DegradationConfig& cfg) {
  cfg.validate();
  validate_image(hr);
  const int H = hr.dim(1), W = hr.dim(2), unit = cfg.final_scale * 8;
  if (H % unit != 0 || W % unit != 0) {
    throw DegradationError("HR size " + std::to_string(H) + "x" + std::to_string(W) + " must be divisible by " +
                           std::to_string(unit));
  }
  Degraded d;
  d.trace.seed = seed;
  d.trace.index = index;
  Image x = hr;
  std::uint64_t op_index = 0;
  auto run = [&](TraceOp op) {
    x = apply_op(op, x);
    d.trace.ops.push_back(std::move(op));
  };

  CounterRng top(derive_key({seed, index, 0xFFFFu}));
  const int orders = top.bernoulli(cfg.second_order_prob) ? 2 : 1;
  for (int order = 0; order < orders; ++order) {
    {
      CounterRng rng(derive_key({seed, index, op_index++}));
      if (rng.bernoulli(cfg.blur_prob)) {
        const int k = cfg.blur_kernel_sizes[rng.uniform_int(0, static_cast<int>(cfg.blur_kernel_sizes.size()) - 1)];
        const auto [lo, hi] = cfg.blur_sigma_range;
        double sx = rng.uniform(lo, hi), sy = sx, theta = 0.0;
        if (rng.bernoulli(cfg.aniso_prob)) {
          sy = rng.uniform(lo, hi);
          theta = rng.uniform(-std::numbers::pi / 2, std::numbers::pi / 2);
        }
        run({"blur", json{{"kernel", k}, {"sigma_x", sx}, {"sigma_y", sy}, {"theta", theta}}});
      }
    }
    {
      CounterRng rng(derive_key({seed, index, op_index++}));
      const double s = rng.uniform(cfg.resize_range[0], cfg.resize_range[1]);
      const ResizeMode mode = pick_mode(rng, cfg.resize_mode_probs);
      const int h = std::max(1, static_cast<int>(std::lround(x.dim(1) * s)));
      const int w = std::max(1, static_cast<int>(std::lround(x.dim(2) * s)));
      if (h != x.dim(1) || w != x.dim(2)) {
        run({"resize", json{{"out_h", h}, {"out_w", w}, {"mode", to_string(mode)}}});
      }
    }
    {
      const std::uint64_t here = op_index++;
      CounterRng rng(derive_key({seed, index, here}));
      if (rng.bernoulli(cfg.noise_prob)) {
        const bool gaussian = rng.bernoulli(cfg.gaussian_noise_prob);
        const auto range = gaussian ? cfg.noise_sigma_range : cfg.poisson_scale_range;
        const double level = rng.uniform(range[0], range[1]);
        const bool gray = rng.bernoulli(cfg.gray_noise_prob);
        run({"noise", json{{"kind", gaussian ? "gaussian" : "poisson"},
                           {"level", level},
                           {"gray", gray},
                           {"key", derive_key({seed, index, here, 0x5EEDu})}}});
      }
    }
    {
      CounterRng rng(derive_key({seed, index, op_index++}));
      if (rng.bernoulli(cfg.jpeg_prob)) {
        run({"jpeg", json{{"quality", rng.uniform_int(cfg.jpeg_quality_range[0], cfg.jpeg_quality_range[1])}}});
      }
    }
  }
  CounterRng rng(derive_key({seed, index, op_index++}));
  const ResizeMode mode = pick_mode(rng, cfg.final_mode_probs);
  run({"resize", json{{"out_h", H / cfg.final_scale}, {"out_w", W / cfg.final_scale}, {"mode", to_string(mode)}}});
  d.lr = std::move(x);
  return d;
}

Image replay(const Image& hr, const DegradationTrace& trace) {
  Image x = hr;
  for (const auto& op : trace.ops) x = apply_op(op, x);
  return x;
}

bool flip_decision(std::uint64_t seed, std::uint64_t index, double prob) {
  CounterRng rng(derive_key({seed, index, 0xF11Fu}));
  return rng.bernoulli(prob);
}

DatasetManifest synth_dataset(const fs::path& hr_dir, const fs::path& out_dir, int n, std::uint64_t seed,
                              const DegradationConfig& cfg) {
  cfg.validate();
  if (n < 1) throw DegradationError("dataset size must be >= 1");
  if (!fs::is_directory(hr_dir)) throw DegradationError("HR source directory not found: " + hr_dir.string());
  static const std::vector<std::string> exts{".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"};
  std::vector<fs::path> sources;
  for (const auto& e : fs::directory_iterator(hr_dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (std::find(exts.begin(), exts.end(), ext) != exts.end()) sources.push_back(e.path());
  }
  if (sources.empty()) throw DegradationError("no HR images in " + hr_dir.string());
  std::sort(sources.begin(), sources.end());

  fs::create_directories(out_dir / "hr");
  fs::create_directories(out_dir / "lr");
  fs::create_directories(out_dir / "traces");

  DatasetManifest m;
  m.root = out_dir;
  m.seed = seed;
  m.scale = cfg.final_scale;
  m.config = cfg;
  m.config_hash = config_hash(json(cfg));
  std::map<fs::path, Image> cache;
  for (int i = 0; i < n; ++i) {
    const fs::path& src = sources[static_cast<std::size_t>(i) % sources.size()];
    auto it = cache.find(src);
    if (it == cache.end()) it = cache.emplace(src, read_image(src)).first;
    Image hr = it->second;
    if (cfg.crop_size > 0) {
      if (hr.dim(1) < cfg.crop_size || hr.dim(2) < cfg.crop_size) {
        throw DegradationError("source " + src.string() + " is smaller than crop_size");
      }
      CounterRng rng(derive_key({seed, static_cast<std::uint64_t>(i), 0xC80Bu}));
      const int top = rng.uniform_int(0, hr.dim(1) - cfg.crop_size);
      const int left = rng.uniform_int(0, hr.dim(2) - cfg.crop_size);
      hr = crop(hr, top, left, cfg.crop_size, cfg.crop_size);
    }
    DatasetEntry e;
    e.index = i;
    e.flipped = flip_decision(seed, static_cast<std::uint64_t>(i), cfg.flip_prob);
    if (e.flipped) hr = flip_horizontal(hr);
    hr = quantize16(std::move(hr));
    Degraded d = degrade(hr, seed, static_cast<std::uint64_t>(i), cfg);

    const std::string name = index_name(i);
    e.hr = "hr/" + name + ".png";
    e.lr = "lr/" + name + ".png";
    e.trace = "traces/" + name + ".json";
    e.source = src.filename().string();
    write_png(out_dir / e.hr, hr);
    write_png(out_dir / e.lr, d.lr);
    write_text(out_dir / e.trace, trace_to_json(d.trace).dump(2) + "\n");
    m.pairs.push_back(e);
  }

  json pairs = json::array();
  for (const auto& e : m.pairs) {
    pairs.push_back(json{{"index", e.index},
                         {"hr", e.hr},
                         {"lr", e.lr},
                         {"trace", e.trace},
                         {"source", e.source},
                         {"flipped", e.flipped}});
  }
  const json manifest{{"seed", seed},           {"scale", m.scale}, {"config_hash", m.config_hash},
                      {"config", json(cfg)},    {"pairs", pairs},   {"count", n}};
  write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return m;
}

DatasetManifest load_manifest(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
  const json j = read_json(file);
  DatasetManifest m;
  m.root = file.parent_path();
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    m.scale = j.at("scale").get<int>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.config = j.at("config").get<DegradationConfig>();
    for (const auto& p : j.at("pairs")) {
      DatasetEntry e;
      e.index = p.at("index").get<int>();
      e.hr = p.at("hr").get<std::string>();
      e.lr = p.at("lr").get<std::string>();
      e.trace = p.value("trace", std::string());
      e.source = p.value("source", std::string());
      e.flipped = p.value("flipped", false);
      m.pairs.push_back(e);
    }
  } catch (const json::exception& e) {
    throw DegradationError("malformed dataset manifest " + file.string() + ": " + e.what());
  }
  if (m.config_hash != config_hash(json(m.config))) {
    throw DegradationError("dataset manifest config hash does not match its config: " + file.string());
  }
  for (const auto& e : m.pairs) {
    if (!fs::exists(m.root / e.hr) || !fs::exists(m.root / e.lr)) {
      throw DegradationError("missing pair " + std::to_string(e.index) + " in " + m.root.string());
    }
  }
  return m;
}

Image synth_hr_image(int height, int width, std::uint64_t seed, std::uint64_t index) {
  CounterRng rng(derive_key({seed, index, 0x1A6Eu}));
  Image img({3, height, width});
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  auto px = [&](int c, int y, int x) -> float& { return img[c * plane + static_cast<std::size_t>(y) * width + x]; };
  auto color = [&] { return std::array<double, 3>{rng.uniform(), rng.uniform(), rng.uniform()}; };

  // Background: two-colour linear gradient plus a low-frequency wave.
  const auto c0 = color(), c1 = color();
  const double ang = rng.uniform(0.0, 2 * std::numbers::pi);
  const double fy = rng.uniform(0.5, 2.0), fx = rng.uniform(0.5, 2.0), ph = rng.uniform(0.0, 6.3);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double u = (std::cos(ang) * x / width + std::sin(ang) * y / height + 1.0) / 2.0;
      const double wave = 0.08 * std::sin(2 * std::numbers::pi * (fy * y / height + fx * x / width) + ph);
      for (int c = 0; c < 3; ++c) px(c, y, x) = static_cast<float>(c0[c] * (1 - u) + c1[c] * u + wave);
    }

  const int shapes = rng.uniform_int(6, 12);
  for (int s = 0; s < shapes; ++s) {
    const int kind = rng.uniform_int(0, 3);
    const auto col = color();
    const double cy = rng.uniform(0, height), cx = rng.uniform(0, width);
    const double ry = rng.uniform(0.05, 0.3) * height, rx = rng.uniform(0.05, 0.3) * width;
    const double rot = rng.uniform(0.0, std::numbers::pi);
    const double freq = rng.uniform(0.08, 0.6), sph = rng.uniform(0.0, 6.3);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double dy = y - cy, dx = x - cx;
        const double u = std::cos(rot) * dx + std::sin(rot) * dy;
        const double v = -std::sin(rot) * dx + std::cos(rot) * dy;
        double alpha = 0.0;
        if (kind == 0) {
          alpha = (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0 ? 1.0 : 0.0;
        } else if (kind == 1) {
          alpha = std::abs(u) <= rx && std::abs(v) <= ry ? 1.0 : 0.0;
        } else if (kind == 2) {
          // Striped patch.
          if (std::abs(u) <= rx && std::abs(v) <= ry) alpha = 0.5 + 0.5 * std::sin(freq * u + sph);
        } else {
          alpha = std::abs(v) <= 1.0 + ry * 0.03 && std::abs(u) <= rx * 2 ? 1.0 : 0.0;
        }
        if (alpha <= 0.0) continue;
        for (int c = 0; c < 3; ++c) px(c, y, x) = static_cast<float>(px(c, y, x) * (1 - alpha) + col[c] * alpha);
      }
  }
  // Fine grain so that not every region is flat.
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(img[i] + 0.015 * rng.normal());
  return quantize16(clamp01(std::move(img)));
}

}  // namespace dualsr::degradation
