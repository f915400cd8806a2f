#include "zoomsr/image.hpp"

#include <cmath>
#include <vector>

namespace zoomsr {

namespace {

struct Taps {
  std::vector<std::ptrdiff_t> idx;
  std::vector<double> w;
};

std::vector<Taps> resample_taps(std::size_t in, std::size_t out) {
  const double scale = double(in) / double(out);
  const double support = 2.0 * std::max(1.0, scale);
  std::vector<Taps> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double c = (double(i) + 0.5) * scale - 0.5;
    const auto j0 = static_cast<std::ptrdiff_t>(std::ceil(c - support));
    const auto j1 = static_cast<std::ptrdiff_t>(std::floor(c + support));
    double wsum = 0.0;
    for (std::ptrdiff_t j = j0; j <= j1; ++j) {
      if (j < 0 || j >= std::ptrdiff_t(in)) continue;
      const double w = catmull_rom_weight((double(j) - c) / std::max(1.0, scale));
      if (w == 0.0) continue;
      taps[i].idx.push_back(j);
      taps[i].w.push_back(w);
      wsum += w;
    }
    for (double& w : taps[i].w) w /= wsum;
  }
  return taps;
}

}  // namespace

RgbImage resize_bicubic(const RgbImage& img, std::size_t out_w, std::size_t out_h) {
  if (out_w == 0 || out_h == 0) throw DimensionError("resize_bicubic: zero output size");
  if (out_w == img.width && out_h == img.height) return img;
  const auto tx = resample_taps(img.width, out_w);
  const auto ty = resample_taps(img.height, out_h);

  RgbImage out(out_w, out_h, img.origin);
  std::vector<double> tmp(img.height * out_w);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < out_w; ++x) {
        double v = 0.0;
        const Taps& t = tx[x];
        for (std::size_t k = 0; k < t.idx.size(); ++k) {
          v += t.w[k] * img.at(c, y, std::size_t(t.idx[k]));
        }
        tmp[y * out_w + x] = v;
      }
    }
    for (std::size_t y = 0; y < out_h; ++y) {
      const Taps& t = ty[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        double v = 0.0;
        for (std::size_t k = 0; k < t.idx.size(); ++k) {
          v += t.w[k] * tmp[std::size_t(t.idx[k]) * out_w + x];
        }
        out.at(c, y, x) = v;
      }
    }
  }
  return out;
}

}  // namespace zoomsr
