#include "zoomsr/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "zoomsr/errors.hpp"
#include "zoomsr/io.hpp"

namespace zoomsr {

double psnr(const RgbImage& a, const RgbImage& b, double peak) {
  if (!a.same_size(b)) {
    throw DimensionError("psnr: image sizes differ, " + std::to_string(a.width) + "x" +
                         std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                         std::to_string(b.height));
  }
  if (peak <= 0.0) throw ConfigError("psnr: peak must be > 0");
  double se = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = (a.data[i] - b.data[i]) * peak;
    se += d * d;
  }
  const double mse = se / double(a.data.size());
  if (mse == 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(peak * peak / mse));
}

namespace {

constexpr std::size_t kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimK1 = 0.01;
constexpr double kSsimK2 = 0.03;

std::vector<double> gaussian_window() {
  std::vector<double> w(kSsimWindow * kSsimWindow);
  const double c = double(kSsimWindow - 1) / 2.0;
  double sum = 0.0;
  for (std::size_t y = 0; y < kSsimWindow; ++y)
    for (std::size_t x = 0; x < kSsimWindow; ++x) {
      const double dx = double(x) - c, dy = double(y) - c;
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * kSsimSigma * kSsimSigma));
      w[y * kSsimWindow + x] = v;
      sum += v;
    }
  for (double& v : w) v /= sum;
  return w;
}

std::vector<double> luma(const RgbImage& img) {
  std::vector<double> y(img.pixels());
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    y[i] = 0.299 * img.data[i] + 0.587 * img.data[img.pixels() + i] +
           0.114 * img.data[2 * img.pixels() + i];
  }
  return y;
}

}  // namespace

double ssim(const RgbImage& a, const RgbImage& b) {
  if (!a.same_size(b)) throw DimensionError("ssim: image sizes differ");
  if (a.width < kSsimWindow || a.height < kSsimWindow) {
    throw DimensionError("ssim: image smaller than the 11x11 window");
  }
  static const std::vector<double> win = gaussian_window();
  const std::vector<double> ya = luma(a);
  const std::vector<double> yb = luma(b);
  constexpr double c1 = kSsimK1 * kSsimK1;  // (K1*L)^2, L = 1
  constexpr double c2 = kSsimK2 * kSsimK2;

  const std::size_t oh = a.height - kSsimWindow + 1;
  const std::size_t ow = a.width - kSsimWindow + 1;
  double acc = 0.0;
  for (std::size_t wy = 0; wy < oh; ++wy) {
    for (std::size_t wx = 0; wx < ow; ++wx) {
      double mu_a = 0.0, mu_b = 0.0, aa = 0.0, bb = 0.0, ab = 0.0;
      for (std::size_t y = 0; y < kSsimWindow; ++y) {
        const double* pa = ya.data() + (wy + y) * a.width + wx;
        const double* pb = yb.data() + (wy + y) * a.width + wx;
        const double* pw = win.data() + y * kSsimWindow;
        for (std::size_t x = 0; x < kSsimWindow; ++x) {
          mu_a += pw[x] * pa[x];
          mu_b += pw[x] * pb[x];
          aa += pw[x] * pa[x] * pa[x];
          bb += pw[x] * pb[x] * pb[x];
          ab += pw[x] * pa[x] * pb[x];
        }
      }
      const double var_a = aa - mu_a * mu_a;
      const double var_b = bb - mu_b * mu_b;
      const double cov = ab - mu_a * mu_b;
      acc += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
             ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
    }
  }
  return acc / double(oh * ow);
}

double feat_dist(const RgbImage& a, const RgbImage& b, const Extractor& extractor) {
  if (!a.same_size(b)) throw DimensionError("feat_dist: image sizes differ");
  const FeatureGrid ga = extract(extractor, a, GroupId::kPhi2);
  const FeatureGrid gb = extract(extractor, b, GroupId::kPhi2);
  double acc = 0.0;
  for (std::size_t li = 0; li < ga.layers.size(); ++li) {
    const auto& fa = ga.layers[li].feats.data();
    const auto& fb = gb.layers[li].feats.data();
    const std::size_t k = ga.layers[li].count(), c = ga.layers[li].dim();
    double layer_acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      double se = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double d = fa[i * c + j] - fb[i * c + j];
        se += d * d;
      }
      layer_acc += std::sqrt(se);
    }
    acc += layer_acc / double(k);
  }
  return acc / double(ga.layers.size());
}

double MetricReport::mean_psnr() const {
  double s = 0.0;
  for (const auto& f : per_frame) s += f.psnr_db;
  return per_frame.empty() ? 0.0 : s / double(per_frame.size());
}

double MetricReport::mean_ssim() const {
  double s = 0.0;
  for (const auto& f : per_frame) s += f.ssim;
  return per_frame.empty() ? 0.0 : s / double(per_frame.size());
}

std::optional<double> MetricReport::mean_feat_dist() const {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& f : per_frame) {
    if (f.feat_dist) {
      s += *f.feat_dist;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return s / double(n);
}

std::string MetricReport::to_kv() const {
  KvFile kv;
  kv.set("label", label);
  kv.set("peak", peak);
  kv.set("frames", std::int64_t(per_frame.size()));
  kv.set("psnr_mean", mean_psnr());
  kv.set("ssim_mean", mean_ssim());
  if (auto fd = mean_feat_dist()) kv.set("feat_dist_mean", *fd);
  for (std::size_t i = 0; i < per_frame.size(); ++i) {
    kv.set("psnr_" + std::to_string(i), per_frame[i].psnr_db);
    kv.set("ssim_" + std::to_string(i), per_frame[i].ssim);
    if (per_frame[i].feat_dist) {
      kv.set("feat_dist_" + std::to_string(i), *per_frame[i].feat_dist);
    }
  }
  return kv.serialize();
}

std::string format_report_table(const std::vector<MetricReport>& rows) {
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%-16s %10s %8s %10s\n", "method", "PSNR^", "SSIM^", "FeatDist_v");
  os << buf;
  for (const auto& r : rows) {
    if (auto fd = r.mean_feat_dist()) {
      std::snprintf(buf, sizeof(buf), "%-16s %10.4f %8.4f %10.4f\n", r.label.c_str(),
                    r.mean_psnr(), r.mean_ssim(), *fd);
    } else {
      std::snprintf(buf, sizeof(buf), "%-16s %10.4f %8.4f %10s\n", r.label.c_str(), r.mean_psnr(),
                    r.mean_ssim(), "-");
    }
    os << buf;
  }
  return os.str();
}

}  // namespace zoomsr
