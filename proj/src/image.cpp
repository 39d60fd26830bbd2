#include "dualsr/image.hpp"

#include <algorithm>
#include <cmath>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <vector>

namespace dualsr {
namespace {

struct Taps {
  std::vector<int> start;     // per output index, offset into index/weight
  std::vector<int> count;
  std::vector<int> index;
  std::vector<double> weight;
};

double bilinear_kernel(double x) {
  x = std::abs(x);
  return x < 1.0 ? 1.0 - x : 0.0;
}

double cubic_kernel(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

Taps make_taps(int in, int out, ResizeMode mode) {
  Taps t;
  t.start.resize(out);
  t.count.resize(out);
  if (mode == ResizeMode::nearest) {
    for (int i = 0; i < out; ++i) {
      const long long src = (2LL * i + 1) * in / (2LL * out);
      t.start[i] = static_cast<int>(t.index.size());
      t.count[i] = 1;
      t.index.push_back(static_cast<int>(std::min<long long>(src, in - 1)));
      t.weight.push_back(1.0);
    }
    return t;
  }
  const double scale = static_cast<double>(out) / in;
  const double widen = std::max(1.0, 1.0 / scale);
  const double base = mode == ResizeMode::bilinear ? 1.0 : 2.0;
  const double support = base * widen;
  for (int i = 0; i < out; ++i) {
    const double x = (i + 0.5) / scale - 0.5;
    const int lo = static_cast<int>(std::ceil(x - support));
    const int hi = static_cast<int>(std::floor(x + support));
    t.start[i] = static_cast<int>(t.index.size());
    double total = 0.0;
    std::vector<std::pair<int, double>> taps;
    for (int j = lo; j <= hi; ++j) {
      const double d = (j - x) / widen;
      const double w = mode == ResizeMode::bilinear ? bilinear_kernel(d) : cubic_kernel(d);
      if (w == 0.0) continue;
      taps.emplace_back(std::clamp(j, 0, in - 1), w);
      total += w;
    }
    for (auto& [j, w] : taps) {
      t.index.push_back(j);
      t.weight.push_back(w / total);
    }
    t.count[i] = static_cast<int>(taps.size());
  }
  return t;
}

}  // namespace

std::string to_string(ResizeMode m) {
  switch (m) {
    case ResizeMode::nearest: return "nearest";
    case ResizeMode::bilinear: return "bilinear";
    case ResizeMode::bicubic: return "bicubic";
  }
  return "bicubic";
}

ResizeMode parse_resize_mode(const std::string& s) {
  if (s == "nearest") return ResizeMode::nearest;
  if (s == "bilinear") return ResizeMode::bilinear;
  if (s == "bicubic") return ResizeMode::bicubic;
  throw std::invalid_argument("unknown resize mode '" + s + "'");
}

void validate_image(const Image& img, int multiple) {
  if (img.rank() != 3 || img.dim(0) != 3) {
    throw ImageError("expected a [3,H,W] image, got " + shape_str(img.shape()));
  }
  if (multiple > 1 && (img.dim(1) % multiple != 0 || img.dim(2) % multiple != 0)) {
    throw ImageError("image " + std::to_string(img.dim(1)) + "x" + std::to_string(img.dim(2)) +
                     " is not divisible by " + std::to_string(multiple));
  }
  for (float v : img.values()) {
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
      throw ImageError("image values must be finite and within [0,1]");
    }
  }
}

Image resize(const Image& img, int out_h, int out_w, ResizeMode mode) {
  if (img.rank() != 3) throw ImageError("resize expects [C,H,W], got " + shape_str(img.shape()));
  if (out_h < 1 || out_w < 1) {
    throw ImageError("resize to degenerate size " + std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const Taps th = make_taps(H, out_h, mode);
  const Taps tw = make_taps(W, out_w, mode);

  // Rows first into a double buffer, then columns.
  std::vector<double> tmp(static_cast<std::size_t>(C) * H * out_w);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < out_w; ++x) {
        double acc = 0.0;
        for (int k = 0; k < tw.count[x]; ++k) {
          const int j = tw.start[x] + k;
          acc += tw.weight[j] * img[(static_cast<std::size_t>(c) * H + y) * W + tw.index[j]];
        }
        tmp[(static_cast<std::size_t>(c) * H + y) * out_w + x] = acc;
      }
  Image out({C, out_h, out_w});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) {
        double acc = 0.0;
        for (int k = 0; k < th.count[y]; ++k) {
          const int j = th.start[y] + k;
          acc += th.weight[j] * tmp[(static_cast<std::size_t>(c) * H + th.index[j]) * out_w + x];
        }
        out[(static_cast<std::size_t>(c) * out_h + y) * out_w + x] = static_cast<float>(acc);
      }
  return out;
}

Image resize_by(const Image& img, double scale, ResizeMode mode) {
  if (!(scale > 0.0)) throw ImageError("resize scale must be positive");
  const int h = static_cast<int>(std::lround(img.dim(1) * scale));
  const int w = static_cast<int>(std::lround(img.dim(2) * scale));
  return resize(img, h, w, mode);
}

Image clamp01(Image img) {
  for (auto& v : img.values()) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

Image quantize16(Image img) {
  for (auto& v : img.values()) {
    const double q = static_cast<double>(std::lround(std::clamp(v, 0.0f, 1.0f) * 65535.0));
    v = static_cast<float>(q / 65535.0);
  }
  return img;
}

Image crop(const Image& img, int top, int left, int height, int width) {
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > H || left + width > W) {
    throw ImageError("crop window out of bounds");
  }
  Image out({C, height, width});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < height; ++y)
      std::copy_n(img.data() + (static_cast<std::size_t>(c) * H + top + y) * W + left, width,
                  out.data() + (static_cast<std::size_t>(c) * height + y) * width);
  return out;
}

Image flip_horizontal(const Image& img) {
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Image out(img.shape());
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        out[(static_cast<std::size_t>(c) * H + y) * W + x] = img[(static_cast<std::size_t>(c) * H + y) * W + (W - 1 - x)];
  return out;
}

Image pad_reflect_to_multiple(const Image& img, int multiple) {
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const int Hp = (H + multiple - 1) / multiple * multiple;
  const int Wp = (W + multiple - 1) / multiple * multiple;
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  Image out({C, Hp, Wp});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < Hp; ++y)
      for (int x = 0; x < Wp; ++x)
        out[(static_cast<std::size_t>(c) * Hp + y) * Wp + x] =
            img[(static_cast<std::size_t>(c) * H + reflect(y, H)) * W + reflect(x, W)];
  return out;
}

template <typename T>
Image from_batch(const Tensor<T>& batch, int index) {
  if (batch.rank() != 4 || index < 0 || index >= batch.dim(0)) {
    throw ImageError("from_batch: bad batch " + shape_str(batch.shape()));
  }
  const int C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  const std::size_t n = static_cast<std::size_t>(C) * H * W;
  Image out({C, H, W});
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(batch[index * n + i]);
  return out;
}

template Image from_batch<float>(const Tensor<float>&, int);
template Image from_batch<double>(const Tensor<double>&, int);

Image read_image(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw ImageError("cannot read image " + path.string());
  double denom = 255.0;
  if (m.depth() == CV_16U) {
    denom = 65535.0;
  } else if (m.depth() != CV_8U) {
    throw ImageError("unsupported pixel depth in " + path.string());
  }
  const int H = m.rows, W = m.cols, ch = m.channels();
  if (ch != 1 && ch != 3 && ch != 4) throw ImageError("unsupported channel count in " + path.string());
  Image out({3, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        // OpenCV stores BGR(A).
        const int src_c = ch == 1 ? 0 : 2 - c;
        double v;
        if (m.depth() == CV_16U) {
          v = m.ptr<std::uint16_t>(y)[x * ch + src_c];
        } else {
          v = m.ptr<std::uint8_t>(y)[x * ch + src_c];
        }
        out[(static_cast<std::size_t>(c) * H + y) * W + x] = static_cast<float>(v / denom);
      }
  return out;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  validate_image(clamp01(img));
  const int H = img.dim(1), W = img.dim(2);
  cv::Mat m(H, W, CV_16UC3);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(img[(static_cast<std::size_t>(c) * H + y) * W + x], 0.0f, 1.0f);
        m.ptr<std::uint16_t>(y)[x * 3 + (2 - c)] = static_cast<std::uint16_t>(std::lround(v * 65535.0));
      }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw ImageError("cannot write image " + path.string());
}

}  // namespace dualsr
