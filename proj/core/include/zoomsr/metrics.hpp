#pragma once

#include <optional>
#include <string>
#include <vector>

#include "zoomsr/features.hpp"
#include "zoomsr/image.hpp"

namespace zoomsr {

// PSNR is capped here when MSE is exactly zero.
inline constexpr double kPsnrCapDb = 99.0;

// 10*log10(peak^2 / MSE) with MSE over all three channels.
double psnr(const RgbImage& a, const RgbImage& b, double peak);

// Single-scale SSIM on luma (Y = 0.299 R + 0.587 G + 0.114 B), 11x11 Gaussian
// window sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1.0, averaged over
// valid (unpadded) windows.
double ssim(const RgbImage& a, const RgbImage& b);

// Mean L2 distance between Phi2 feature grids; uncalibrated stand-in for a
// learned perceptual metric. Zero iff the inputs are identical.
double feat_dist(const RgbImage& a, const RgbImage& b, const Extractor& extractor);

struct FrameMetrics {
  double psnr_db = 0.0;
  double ssim = 0.0;
  std::optional<double> feat_dist;
};

struct MetricReport {
  std::string label;          // method / checkpoint name
  double peak = 1.0;          // PSNR peak convention used
  std::vector<FrameMetrics> per_frame;

  double mean_psnr() const;
  double mean_ssim() const;
  std::optional<double> mean_feat_dist() const;
  std::string to_kv() const;  // machine-readable key=value lines
};

// Aligned text table, one row per report (PSNR up, SSIM up, FeatDist down).
std::string format_report_table(const std::vector<MetricReport>& rows);

}  // namespace zoomsr
