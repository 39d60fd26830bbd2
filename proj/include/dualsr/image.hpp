#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "dualsr/tensor.hpp"

namespace dualsr {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A single RGB image, [3,H,W], values in [0,1].
using Image = Tensor<float>;

enum class ResizeMode { nearest, bilinear, bicubic };

std::string to_string(ResizeMode m);
ResizeMode parse_resize_mode(const std::string& s);

// Checks finiteness, range and (when multiple > 1) divisibility of H and W.
void validate_image(const Image& img, int multiple = 1);

// Separable resampling with half-pixel centers. Downscaling widens the
// bilinear/bicubic kernels by the scale factor (antialiasing). Edges clamp.
Image resize(const Image& img, int out_h, int out_w, ResizeMode mode);
// Output size is round(dim * scale); throws when it would be < 1.
Image resize_by(const Image& img, double scale, ResizeMode mode);

Image clamp01(Image img);
// Rounds onto the 16-bit grid so that write_png followed by read_image
// returns exactly these values.
Image quantize16(Image img);
Image crop(const Image& img, int top, int left, int height, int width);
Image flip_horizontal(const Image& img);
// Reflect-pads bottom/right so both dims become multiples of `multiple`.
Image pad_reflect_to_multiple(const Image& img, int multiple);

// [3,H,W] <-> [1,3,H,W]
template <typename T>
Tensor<T> as_batch(const Image& img) {
  return img.template cast<T>().reshaped({1, img.dim(0), img.dim(1), img.dim(2)});
}
template <typename T>
Image from_batch(const Tensor<T>& batch, int index = 0);

// Lossless I/O. Writes 16-bit RGB PNG; reads any format OpenCV decodes.
Image read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);

}  // namespace dualsr
