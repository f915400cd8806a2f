#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "zoomsr/metrics.hpp"
#include "zoomsr/rng.hpp"

using namespace zoomsr;

namespace {

RgbImage noise_image(std::size_t w, std::size_t h, std::uint64_t seed) {
  Rng rng(seed);
  RgbImage img(w, h);
  for (auto& v : img.data) v = rng.uniform();
  return img;
}

// plain two-level-loop SSIM oracle with explicit windows and two-pass moments
double ssim_oracle(const RgbImage& a, const RgbImage& b) {
  const std::size_t win = 11;
  const double sigma = 1.5, k1 = 0.01, k2 = 0.03;
  std::vector<double> w(win * win);
  double wsum = 0.0;
  for (std::size_t y = 0; y < win; ++y)
    for (std::size_t x = 0; x < win; ++x) {
      const double dx = double(x) - 5.0, dy = double(y) - 5.0;
      w[y * win + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      wsum += w[y * win + x];
    }
  for (auto& v : w) v /= wsum;

  auto luma = [](const RgbImage& img, std::size_t y, std::size_t x) {
    return 0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) + 0.114 * img.at(2, y, x);
  };
  const double c1 = k1 * k1, c2 = k2 * k2;
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t wy = 0; wy + win <= a.height; ++wy) {
    for (std::size_t wx = 0; wx + win <= a.width; ++wx) {
      double mu_a = 0.0, mu_b = 0.0;
      for (std::size_t y = 0; y < win; ++y)
        for (std::size_t x = 0; x < win; ++x) {
          mu_a += w[y * win + x] * luma(a, wy + y, wx + x);
          mu_b += w[y * win + x] * luma(b, wy + y, wx + x);
        }
      double va = 0.0, vb = 0.0, cov = 0.0;
      for (std::size_t y = 0; y < win; ++y)
        for (std::size_t x = 0; x < win; ++x) {
          const double da = luma(a, wy + y, wx + x) - mu_a;
          const double db = luma(b, wy + y, wx + x) - mu_b;
          va += w[y * win + x] * da * da;
          vb += w[y * win + x] * db * db;
          cov += w[y * win + x] * da * db;
        }
      acc += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
             ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
      ++count;
    }
  }
  return acc / double(count);
}

}  // namespace

TEST_CASE("psnr: cap, closed form, symmetry, errors") {
  const RgbImage a = noise_image(16, 12, 1);
  CHECK(psnr(a, a, 255.0) == 99.0);

  RgbImage b = a;
  for (auto& v : b.data) v += 16.0 / 255.0;
  CHECK(psnr(a, b, 255.0) == doctest::Approx(24.0484).epsilon(1e-3 / 24.0));
  // peak convention does not change the value when both sides share the scale
  CHECK(psnr(a, b, 1.0) == doctest::Approx(psnr(a, b, 255.0)).epsilon(1e-12));
  CHECK(psnr(a, b, 255.0) == psnr(b, a, 255.0));

  const RgbImage c = noise_image(8, 8, 2);
  CHECK_THROWS_AS(psnr(a, c, 255.0), DimensionError);
  CHECK_THROWS_AS(psnr(a, a, 0.0), ConfigError);
}

TEST_CASE("ssim: identity is exactly 1") {
  const RgbImage a = noise_image(24, 16, 3);
  CHECK(ssim(a, a) == 1.0);
}

TEST_CASE("ssim: inverting a binary image flips the structure") {
  RgbImage a(16, 16);
  Rng rng(5);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      const double v = rng.below(2) ? 1.0 : 0.0;
      for (std::size_t c = 0; c < 3; ++c) a.at(c, y, x) = v;
    }
  RgbImage b = a;
  for (auto& v : b.data) v = 1.0 - v;
  CHECK(ssim(a, b) < 0.0);
}

TEST_CASE("ssim matches the sliding-window oracle to 1e-9") {
  const RgbImage a = noise_image(20, 14, 7);
  RgbImage b = noise_image(20, 14, 8);
  for (std::size_t i = 0; i < b.data.size(); ++i) b.data[i] = 0.7 * a.data[i] + 0.3 * b.data[i];
  CHECK(ssim(a, b) == doctest::Approx(ssim_oracle(a, b)).epsilon(1e-9));
  CHECK(ssim(a, b) <= 1.0);
  CHECK(ssim(a, b) >= -1.0);
}

TEST_CASE("ssim rejects images smaller than the window") {
  const RgbImage tiny = noise_image(8, 8, 9);
  CHECK_THROWS_AS(ssim(tiny, tiny), DimensionError);
}

TEST_CASE("feat_dist: zero at identity, symmetric, triangle inequality") {
  const Extractor ex = build_extractor(ExtractorSpec::defaults(11));
  const RgbImage a = noise_image(16, 16, 10);
  const RgbImage b = noise_image(16, 16, 11);
  const RgbImage c = noise_image(16, 16, 12);
  CHECK(feat_dist(a, a, ex) == 0.0);
  CHECK(feat_dist(a, b, ex) == feat_dist(b, a, ex));
  CHECK(feat_dist(a, b, ex) > 0.0);
  for (int trial = 0; trial < 5; ++trial) {
    const RgbImage x = noise_image(16, 16, 100 + trial);
    const RgbImage y = noise_image(16, 16, 200 + trial);
    const RgbImage z = noise_image(16, 16, 300 + trial);
    CHECK(feat_dist(x, z, ex) <= feat_dist(x, y, ex) + feat_dist(y, z, ex) + 1e-12);
  }
}

TEST_CASE("metric report aggregates means and serializes") {
  MetricReport r;
  r.label = "stcl";
  r.peak = 255.0;
  r.per_frame = {{30.0, 0.9, 0.1}, {32.0, 0.8, 0.3}};
  CHECK(r.mean_psnr() == doctest::Approx(31.0));
  CHECK(r.mean_ssim() == doctest::Approx(0.85));
  CHECK(*r.mean_feat_dist() == doctest::Approx(0.2));
  const std::string kv = r.to_kv();
  CHECK(kv.find("psnr_mean = 31") != std::string::npos);
  const std::string table = format_report_table({r});
  CHECK(table.find("stcl") != std::string::npos);
}
