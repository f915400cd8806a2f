#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "zoomsr/errors.hpp"

namespace zoomsr {

// Where pixel values came from; decides the PSNR peak convention.
enum class PixelOrigin : std::uint8_t {
  kSrgb8,      // quantized 8-bit sRGB (peak 255 semantics)
  kSynthetic,  // full-precision float render
};

// H x W x 3 image, float64 in [0,1], planar channel-major storage (c, y, x).
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  PixelOrigin origin = PixelOrigin::kSynthetic;
  std::vector<double> data;  // 3 * height * width

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h, PixelOrigin o = PixelOrigin::kSynthetic)
      : width(w), height(h), origin(o), data(3 * w * h, 0.0) {}

  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data[(c * height + y) * width + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
  std::size_t pixels() const { return width * height; }
  bool same_size(const RgbImage& o) const { return width == o.width && height == o.height; }
};

// Single-plane mosaic-resolution image (float64), used for photometrically
// aligned Bayer data and raw-plane views.
struct MosaicImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;  // height * width

  MosaicImage() = default;
  MosaicImage(std::size_t w, std::size_t h) : width(w), height(h), values(w * h, 0.0) {}

  double& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

inline RgbImage crop(const RgbImage& img, std::size_t x0, std::size_t y0, std::size_t w,
                     std::size_t h) {
  if (x0 + w > img.width || y0 + h > img.height) {
    throw DimensionError("crop window out of bounds");
  }
  RgbImage out(w, h, img.origin);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
  return out;
}

// Catmull-Rom cubic kernel (a = -0.5), support [-2, 2].
inline double catmull_rom_weight(double x) {
  constexpr double a = -0.5;
  x = x < 0.0 ? -x : x;
  if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return a * (((x - 5.0) * x + 8.0) * x - 4.0);
  return 0.0;
}

// Separable Catmull-Rom resample to an arbitrary size; the kernel is
// stretched by the scale factor when minifying (area-consistent) and row
// weights are renormalized at the borders.
RgbImage resize_bicubic(const RgbImage& img, std::size_t out_w, std::size_t out_h);

// Bilinear sample with edge clamp; coordinates in pixel units.
inline double sample_bilinear(const RgbImage& img, std::size_t c, double x, double y) {
  const double xc = x < 0.0 ? 0.0 : (x > double(img.width - 1) ? double(img.width - 1) : x);
  const double yc = y < 0.0 ? 0.0 : (y > double(img.height - 1) ? double(img.height - 1) : y);
  const std::size_t x0 = static_cast<std::size_t>(xc);
  const std::size_t y0 = static_cast<std::size_t>(yc);
  const std::size_t x1 = x0 + 1 < img.width ? x0 + 1 : x0;
  const std::size_t y1 = y0 + 1 < img.height ? y0 + 1 : y0;
  const double fx = xc - double(x0);
  const double fy = yc - double(y0);
  const double top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
  const double bot = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
  return top * (1.0 - fy) + bot * fy;
}

}  // namespace zoomsr
