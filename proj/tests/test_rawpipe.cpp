#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "zoomsr/io.hpp"
#include "zoomsr/rawpipe.hpp"
#include "zoomsr/rng.hpp"

using namespace zoomsr;

namespace {

RgbImage smooth_image(std::size_t w, std::size_t h) {
  RgbImage img(w, h);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        img.at(c, y, x) = 0.5 + 0.3 * std::sin(double(x) / 7.0 + double(c)) *
                                    std::cos(double(y) / 9.0);
      }
  return img;
}

ClipPair tiny_clip(std::size_t frames, const Homography& h, std::uint64_t seed) {
  ClipPair clip;
  clip.name = "tiny";
  clip.zoom_ratio = 4.0;
  clip.h_ideal_to_captured = h;
  Rng rng(seed);
  for (std::size_t t = 0; t < frames; ++t) {
    BayerFrame lr(128, 128);
    for (auto& s : lr.samples) s = static_cast<std::uint16_t>(rng.below(65536));
    lr.black_level = 64;
    lr.r_red = 1.5;
    lr.r_blue = 1.3;
    clip.lr_frames.push_back(std::move(lr));
    RgbImage hr(128, 128);
    for (auto& v : hr.data) v = rng.uniform();
    clip.hr_frames.push_back(std::move(hr));
  }
  return clip;
}

}  // namespace

TEST_CASE("photometric alignment formula") {
  BayerFrame f(2, 2);
  f.black_level = 64;
  f.r_red = 1.5;
  f.r_blue = 2.0;
  f.at(0, 0) = 1024;  // R
  f.at(0, 1) = 64;    // G1 at black level
  f.at(1, 0) = 5000;  // G2
  f.at(1, 1) = 64;    // B at black level
  const MosaicImage a = photometric_align(f);
  CHECK(a.at(0, 0) == doctest::Approx(960.0 * 1.5 / 65471.0).epsilon(1e-12));
  CHECK(a.at(0, 0) == doctest::Approx(0.021995).epsilon(1e-4));
  CHECK(a.at(0, 1) == 0.0);
  CHECK(a.at(1, 1) == 0.0);
  CHECK(a.at(1, 0) == doctest::Approx((5000.0 - 64.0) / 65471.0).epsilon(1e-12));

  BayerFrame g(2, 2);
  g.at(0, 1) = 12345;  // G1, black level 0
  CHECK(photometric_align(g).at(0, 1) == doctest::Approx(12345.0 / 65535.0).epsilon(1e-12));
}

TEST_CASE("photometric alignment is monotone per channel") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    BayerFrame a(4, 4), b(4, 4);
    a.black_level = b.black_level = 512;
    a.r_red = b.r_red = 1.7;
    a.r_blue = b.r_blue = 1.2;
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
      a.samples[i] = static_cast<std::uint16_t>(rng.below(60000));
      b.samples[i] = static_cast<std::uint16_t>(
          std::min<std::uint64_t>(65535, a.samples[i] + rng.below(5000)));
    }
    const MosaicImage ma = photometric_align(a);
    const MosaicImage mb = photometric_align(b);
    for (std::size_t i = 0; i < ma.values.size(); ++i) CHECK(mb.values[i] >= ma.values[i]);
  }
}

TEST_CASE("estimate_black_level is the dark-frame mean") {
  BayerFrame dark(2, 2);
  dark.samples = {100, 101, 103, 104};  // mean 102
  CHECK(estimate_black_level(dark) == 102);
}

TEST_CASE("pack/unpack follow RGGB tile order") {
  MosaicImage plane(2, 2);
  plane.at(0, 0) = 0.1;  // R
  plane.at(0, 1) = 0.2;  // G1
  plane.at(1, 0) = 0.3;  // G2
  plane.at(1, 1) = 0.4;  // B
  Tensor packed = pack_mosaic(plane);
  REQUIRE(packed.shape() == Shape{4, 1, 1});
  CHECK(packed.at(0) == 0.1);
  CHECK(packed.at(1) == 0.2);
  CHECK(packed.at(2) == 0.3);
  CHECK(packed.at(3) == 0.4);

  // 4x4 index oracle: channel c at tile (ty,tx) comes from the mosaic site
  // (2ty + c/2 parity, 2tx + c parity)
  MosaicImage m4(4, 4);
  for (std::size_t i = 0; i < 16; ++i) m4.values[i] = double(i);
  Tensor p4 = pack_mosaic(m4);
  REQUIRE(p4.shape() == Shape{4, 2, 2});
  const std::size_t dy[4] = {0, 0, 1, 1};
  const std::size_t dx[4] = {0, 1, 0, 1};
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t ty = 0; ty < 2; ++ty)
      for (std::size_t tx = 0; tx < 2; ++tx) {
        CHECK(p4.at((c * 2 + ty) * 2 + tx) == m4.at(2 * ty + dy[c], 2 * tx + dx[c]));
      }

  const MosaicImage back = unpack_mosaic(p4);
  CHECK(back.values == m4.values);
  MosaicImage odd(3, 4);
  CHECK_THROWS_AS(pack_mosaic(odd), DimensionError);
}

TEST_CASE("pack/unpack bijectivity on random planes") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t w = 2 * (1 + rng.below(8)), h = 2 * (1 + rng.below(8));
    MosaicImage m(w, h);
    for (auto& v : m.values) v = rng.uniform();
    const MosaicImage back = unpack_mosaic(pack_mosaic(m));
    CHECK(back.values == m.values);
  }
}

TEST_CASE("homography estimation: identity from fixed corners") {
  std::vector<Correspondence> corrs = {
      {0, 0, 0, 0}, {10, 0, 10, 0}, {0, 10, 0, 10}, {10, 10, 10, 10}};
  const auto est = estimate_homography(corrs);
  const Homography id = Homography::identity();
  for (int i = 0; i < 9; ++i) CHECK(est.h.m[i] == doctest::Approx(id.m[i]).epsilon(1e-9));
  CHECK(est.rms < 1e-9);
}

TEST_CASE("homography estimation: pure translation") {
  std::vector<Correspondence> corrs;
  for (double x : {0.0, 7.0}) {
    for (double y : {0.0, 5.0}) corrs.push_back({x, y, x + 5.0, y - 3.0});
  }
  const auto est = estimate_homography(corrs);
  CHECK(est.h.m[2] == doctest::Approx(5.0).epsilon(1e-9));
  CHECK(est.h.m[5] == doctest::Approx(-3.0).epsilon(1e-9));
  CHECK(est.h.m[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(est.h.m[6] == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("homography round trip on 20 noiseless points") {
  Homography h;
  h.m = {1.02, 0.03, 12.0, -0.02, 0.98, -7.5, 1e-5, -2e-5, 1.0};
  Rng rng(17);
  std::vector<Correspondence> corrs;
  for (int i = 0; i < 20; ++i) {
    Correspondence c;
    c.x = rng.uniform(0.0, 300.0);
    c.y = rng.uniform(0.0, 200.0);
    const Vec2 p = h.apply({c.x, c.y});
    c.xp = p.x;
    c.yp = p.y;
    corrs.push_back(c);
  }
  const auto est = estimate_homography(corrs);
  double scale = 0.0;
  for (int i = 0; i < 9; ++i) scale = std::max(scale, std::fabs(h.m[i]));
  for (int i = 0; i < 9; ++i) {
    CHECK(std::fabs(est.h.m[i] - h.m[i]) / scale < 1e-6);
  }
  CHECK(est.rms < 1e-6);
}

TEST_CASE("homography estimation degrades gracefully with point noise") {
  Homography h = Homography::translation(20.0, -11.0);
  Rng rng(23);
  std::vector<Correspondence> corrs;
  const double noise = 1.0;
  for (int i = 0; i < 20; ++i) {
    Correspondence c;
    c.x = rng.uniform(0.0, 300.0);
    c.y = rng.uniform(0.0, 200.0);
    const Vec2 p = h.apply({c.x, c.y});
    c.xp = p.x + noise * rng.normal();
    c.yp = p.y + noise * rng.normal();
    corrs.push_back(c);
  }
  const auto est = estimate_homography(corrs);
  CHECK(est.rms > 0.3 * noise);
  CHECK(est.rms < 2.5 * noise);
}

TEST_CASE("homography estimation rejects bad configurations") {
  std::vector<Correspondence> three = {{0, 0, 0, 0}, {1, 0, 1, 0}, {0, 1, 0, 1}};
  CHECK_THROWS_AS(estimate_homography(three), NumericError);
  std::vector<Correspondence> collinear;
  for (int i = 0; i < 8; ++i) collinear.push_back({double(i), 2.0 * i, double(i), 2.0 * i});
  CHECK_THROWS_AS(estimate_homography(collinear), NumericError);
}

TEST_CASE("warp with identity reproduces the image") {
  const RgbImage img = smooth_image(24, 18);
  std::vector<std::uint8_t> mask;
  const RgbImage out = warp(img, Homography::identity(), 24, 18, &mask);
  CHECK(out.data == img.data);
  for (auto m : mask) CHECK(m == 1);
}

TEST_CASE("warp by an integer translation is bit-equal on the interior") {
  const RgbImage img = smooth_image(30, 22);
  // out(p) = img(p + (4,3))
  const RgbImage out = warp(img, Homography::translation(4.0, 3.0), 30, 22, nullptr);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y + 3 < 22; ++y)
      for (std::size_t x = 0; x + 4 < 30; ++x) {
        CHECK(out.at(c, y, x) == img.at(c, y + 3, x + 4));
      }
}

TEST_CASE("warp round trip H then H^-1 stays within interpolation error") {
  const RgbImage img = smooth_image(64, 64);
  Homography h;
  h.m = {1.01, 0.02, 3.5, -0.015, 0.99, -2.25, 2e-5, -1e-5, 1.0};
  const RgbImage once = warp(img, h, 64, 64, nullptr);
  const RgbImage back = warp(once, h.inverse(), 64, 64, nullptr);
  double se = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 8; y < 56; ++y)
      for (std::size_t x = 8; x < 56; ++x) {
        const double d = back.at(c, y, x) - img.at(c, y, x);
        se += d * d;
        ++n;
      }
  CHECK(std::sqrt(se / double(n)) < 1e-2);
}

TEST_CASE("fov window and match_fov") {
  const FovWindow full = fov_window(100, 80, 1.0);
  CHECK(full.x == 0);
  CHECK(full.y == 0);
  CHECK(full.width == 100);
  CHECK(full.height == 80);

  const FovWindow w = fov_window(1384, 1032, 4.0);
  CHECK(w.width == 346);
  CHECK(w.height == 258);
  // centered within 1 px
  CHECK(std::llabs(std::int64_t(w.x) - std::int64_t(1384 - w.x - w.width)) <= 1);
  CHECK(std::llabs(std::int64_t(w.y) - std::int64_t(1032 - w.y - w.height)) <= 1);

  const RgbImage native(1384, 1032);
  const RgbImage same = match_fov(1384, 1032, native, 4.0);
  CHECK(same.width == 1384);
  CHECK(same.height == 1032);

  const RgbImage big(1500, 1100);
  const RgbImage cropped = match_fov(1384, 1032, big, 4.0);
  CHECK(cropped.width == 1384);
  CHECK(cropped.height == 1032);

  const RgbImage small(300, 200);
  CHECK_THROWS_AS(match_fov(1384, 1032, small, 4.0), DimensionError);
}

TEST_CASE("crop_patches is deterministic and respects geometry") {
  const ClipPair clip = tiny_clip(5, Homography::translation(9.0, -6.0), 77);
  const auto a = crop_patches(clip, 16, 4, 1, 6, 42);
  const auto b = crop_patches(clip, 16, 4, 1, 6, 42);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].center_frame == b[i].center_frame);
    CHECK(a[i].lr_x == b[i].lr_x);
    CHECK(a[i].lr_y == b[i].lr_y);
    CHECK(a[i].lr_patch.samples == b[i].lr_patch.samples);
    // HR patch is 4x the LR patch
    REQUIRE(a[i].hr_patches.size() == 3);
    CHECK(a[i].hr_patches[0].width == 64);
    CHECK(a[i].hr_patches[0].height == 64);
    CHECK(a[i].lr_patch.width == 16);
    // even-aligned origin, inside the FoV window
    CHECK(a[i].lr_x % 2 == 0);
    CHECK(a[i].lr_y % 2 == 0);
    const FovWindow win = fov_window(128, 128, 4.0);
    CHECK(a[i].lr_x >= win.x);
    CHECK(a[i].lr_x + 16 <= win.x + win.width);
    // center frame leaves room for both neighbors
    CHECK(a[i].center_frame >= 1);
    CHECK(a[i].center_frame + 1 < 5);
  }
}

TEST_CASE("crop_patches stays in bounds across 100 seeds") {
  const ClipPair clip = tiny_clip(4, Homography::translation(-10.0, 8.0), 99);
  const FovWindow win = fov_window(128, 128, 4.0);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto samples = crop_patches(clip, 16, 4, 1, 2, seed);
    for (const auto& s : samples) {
      const double ix0 = double(s.lr_x - win.x) * 4.0;
      const double iy0 = double(s.lr_y - win.y) * 4.0;
      for (const double cx : {ix0, ix0 + 63.0}) {
        for (const double cy : {iy0, iy0 + 63.0}) {
          const Vec2 q = clip.h_ideal_to_captured.apply({cx, cy});
          CHECK(q.x >= 0.0);
          CHECK(q.x <= 127.0);
          CHECK(q.y >= 0.0);
          CHECK(q.y <= 127.0);
        }
      }
    }
  }
}

TEST_CASE("crop_patches needs enough frames for the temporal radius") {
  const ClipPair clip = tiny_clip(2, Homography::identity(), 5);
  CHECK_THROWS_AS(crop_patches(clip, 16, 4, 1, 1, 1), DimensionError);
}

TEST_CASE("clip manifest and correspondence files round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "zoomsr_rp_test";
  std::filesystem::create_directories(dir);

  ClipManifest m;
  m.name = "clip007";
  m.frames = 2;
  m.fps = 15.0;
  m.width = 64;
  m.height = 48;
  m.zoom_ratio = 4.0;
  m.black_level = 2048;
  m.wb_red = 1.9;
  m.wb_blue = 1.7;
  m.scale_offset = 1.0;
  m.homography = {1.0, 0.0, 17.25, 0.0, 1.0, -4.5, 1e-6, 0.0, 1.0};
  m.correspondence_file = "corrs.txt";
  m.lr_paths = {"lr_0000.pgm", "lr_0001.pgm"};
  m.hr_paths = {"hr_0000.ppm", "hr_0001.ppm"};
  m.gt_paths = {"gt_0000.ppm", "gt_0001.ppm"};
  m.save(dir / "clip.manifest");
  const ClipManifest back = ClipManifest::load(dir / "clip.manifest");
  CHECK(back.name == m.name);
  CHECK(back.frames == m.frames);
  CHECK(back.homography == m.homography);
  CHECK(back.lr_paths == m.lr_paths);
  CHECK(back.gt_paths == m.gt_paths);
  CHECK(back.black_level == m.black_level);

  std::vector<Correspondence> corrs = {{1.5, 2.25, 3.125, 4.0625}, {5, 6, 7, 8}};
  save_correspondences(dir / "corrs.txt", corrs);
  const auto cback = load_correspondences(dir / "corrs.txt");
  REQUIRE(cback.size() == 2);
  CHECK(cback[0].x == 1.5);
  CHECK(cback[0].yp == 4.0625);

  DatasetManifest dm;
  dm.zoom_ratio = 4.0;
  dm.seed = 123;
  dm.clips = {{"c0/clip.manifest", Split::kTrain}, {"c1/clip.manifest", Split::kTest}};
  dm.save(dir / "dataset.manifest");
  const DatasetManifest dback = DatasetManifest::load(dir / "dataset.manifest");
  CHECK(dback.seed == 123);
  REQUIRE(dback.clips.size() == 2);
  CHECK(dback.clips[1].second == Split::kTest);
  CHECK(dback.clip_paths(dir / "dataset.manifest", Split::kTrain).size() == 1);

  std::filesystem::remove_all(dir);
}

TEST_CASE("pgm16 round trip is big-endian with maxval 65535") {
  const auto path = std::filesystem::temp_directory_path() / "zoomsr_t.pgm";
  std::vector<std::uint16_t> s = {0, 1, 258, 65535, 4096, 777};
  write_pgm16(path, 3, 2, s);
  std::size_t w = 0, h = 0;
  std::vector<std::uint16_t> back;
  read_pgm16(path, w, h, back);
  CHECK(w == 3);
  CHECK(h == 2);
  CHECK(back == s);
  std::filesystem::remove(path);
}
