#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "zoomsr/rawpipe.hpp"
#include "zoomsr/rng.hpp"
#include "zoomsr/synthcam.hpp"

using namespace zoomsr;

namespace {

SceneSpec moving_sprite_scene() {
  SceneSpec s;
  s.canvas_width = 96;
  s.canvas_height = 96;
  s.background_seed = 5;
  s.background_contrast = 0.3;
  s.frame_count = 4;
  s.seed = 9;
  SpriteSpec sp;
  sp.texture_seed = 400;
  sp.size = 48.0;
  sp.vx = 2.0;
  sp.vy = 0.0;
  sp.x0 = 10.0;
  sp.y0 = 30.0;
  s.sprites.push_back(sp);
  return s;
}

std::vector<unsigned char> slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(is), {});
}

}  // namespace

TEST_CASE("render_truth is deterministic and static scenes do not move") {
  SceneSpec scene = moving_sprite_scene();
  const RgbImage a = render_truth(scene, 2);
  const RgbImage b = render_truth(scene, 2);
  CHECK(a.data == b.data);
  CHECK_THROWS_AS(render_truth(scene, 99), ContractError);

  scene.sprites[0].vx = 0.0;
  const RgbImage f0 = render_truth(scene, 0);
  const RgbImage f3 = render_truth(scene, 3);
  CHECK(f0.data == f3.data);
}

TEST_CASE("sprite velocity shows up as the cross-correlation peak") {
  const SceneSpec scene = moving_sprite_scene();
  const RgbImage f0 = render_truth(scene, 0);
  const RgbImage f1 = render_truth(scene, 1);
  // correlation window strictly inside the sprite at both frames
  const std::size_t wx = 22, wy = 40, ww = 24, wh = 24;
  double best = -2.0;
  int best_dx = 99, best_dy = 99;
  for (int dy = -4; dy <= 4; ++dy) {
    for (int dx = -4; dx <= 4; ++dx) {
      double num = 0.0, da = 0.0, db = 0.0, ma = 0.0, mb = 0.0;
      const std::size_t n = ww * wh;
      for (std::size_t y = 0; y < wh; ++y)
        for (std::size_t x = 0; x < ww; ++x) {
          ma += f0.at(1, wy + y, wx + x);
          mb += f1.at(1, std::size_t(int(wy + y) + dy), std::size_t(int(wx + x) + dx));
        }
      ma /= double(n);
      mb /= double(n);
      for (std::size_t y = 0; y < wh; ++y)
        for (std::size_t x = 0; x < ww; ++x) {
          const double va = f0.at(1, wy + y, wx + x) - ma;
          const double vb =
              f1.at(1, std::size_t(int(wy + y) + dy), std::size_t(int(wx + x) + dx)) - mb;
          num += va * vb;
          da += va * va;
          db += vb * vb;
        }
      const double ncc = num / std::sqrt(da * db);
      if (ncc > best) {
        best = ncc;
        best_dx = dx;
        best_dy = dy;
      }
    }
  }
  CHECK(best_dx == 2);
  CHECK(best_dy == 0);
  CHECK(best > 0.999);
}

TEST_CASE("noise-free capture reconstructs the downsampled green plane") {
  SceneSpec scene = SceneSpec::random_scene(256, 256, 3, 21);
  RigSpec rig;
  rig.shift_min = rig.shift_max = 0.0;
  rig.perspective = 0.0;
  rig.read_noise = 0.0;
  rig.shot_noise = 0.0;
  const CapturedPair pair = capture_pair(scene, rig, 1);
  const MosaicImage aligned = photometric_align(pair.lr);
  const RgbImage truth = render_truth(scene, 1);

  double max_err = 0.0;
  for (std::size_t y = 0; y < pair.lr.height; ++y) {
    for (std::size_t x = 0; x < pair.lr.width; ++x) {
      const BayerSite site = bayer_site(y, x);
      if (site != BayerSite::kG1 && site != BayerSite::kG2) continue;
      double want = 0.0;
      for (std::size_t by = 0; by < 4; ++by)
        for (std::size_t bx = 0; bx < 4; ++bx) want += truth.at(1, 4 * y + by, 4 * x + bx);
      want /= 16.0;
      max_err = std::max(max_err, std::fabs(aligned.at(y, x) - want));
    }
  }
  CHECK(max_err <= 2.0 / 65535.0);
}

TEST_CASE("configured 20 px shift displaces HR corners by 20 px on average") {
  SceneSpec scene = SceneSpec::random_scene(256, 256, 2, 31);
  RigSpec rig;
  rig.shift_min = rig.shift_max = 20.0;
  const CapturedPair pair = capture_pair(scene, rig, 0);
  const double w = double(pair.hr.width - 1), h = double(pair.hr.height - 1);
  const Vec2 corners[4] = {{0, 0}, {w, 0}, {0, h}, {w, h}};
  double mean = 0.0;
  for (const auto& c : corners) {
    const Vec2 q = pair.h_ideal_to_captured.apply(c);
    mean += std::hypot(q.x - c.x, q.y - c.y);
  }
  mean /= 4.0;
  CHECK(mean == doctest::Approx(20.0).epsilon(1e-6));
  // perspective component: displacements differ across corners
  const Vec2 q0 = pair.h_ideal_to_captured.apply(corners[0]);
  const Vec2 q3 = pair.h_ideal_to_captured.apply(corners[3]);
  const double d0 = std::hypot(q0.x - corners[0].x, q0.y - corners[0].y);
  const double d3 = std::hypot(q3.x - corners[3].x, q3.y - corners[3].y);
  CHECK(d0 != doctest::Approx(d3).epsilon(1e-9));
}

TEST_CASE("captured value ranges: 8-bit HR grid, LR within [black, 65535]") {
  SceneSpec scene = SceneSpec::random_scene(128, 128, 2, 41);
  RigSpec rig;
  rig.read_noise = 0.01;
  const CapturedPair pair = capture_pair(scene, rig, 0);
  for (double v : pair.hr.data) {
    const double q = v * 255.0;
    CHECK(std::fabs(q - std::round(q)) < 1e-9);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  for (std::uint16_t s : pair.lr.samples) {
    CHECK(s >= rig.black_level);
  }
  CHECK(pair.lr.width == 32);
  CHECK(pair.lr.black_level == rig.black_level);
}

TEST_CASE("ground-truth homography aligns HR back onto the truth crop") {
  SceneSpec scene = SceneSpec::random_scene(640, 640, 2, 51);
  RigSpec rig;
  rig.read_noise = 0.0;
  rig.shot_noise = 0.0;
  rig.hr_gain = {1.0, 1.0, 1.0};
  rig.hr_offset = {0.0, 0.0, 0.0};
  const CapturedPair pair = capture_pair(scene, rig, 1);  // shift in [10, 40]
  std::vector<std::uint8_t> mask;
  const RgbImage realigned =
      warp(pair.hr, pair.h_ideal_to_captured, pair.hr.width, pair.hr.height, &mask);
  double se = 0.0;
  std::size_t n = 0;
  const std::size_t margin = 44;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = margin; y + margin < pair.hr.height; ++y)
      for (std::size_t x = margin; x + margin < pair.hr.width; ++x) {
        if (!mask[y * pair.hr.width + x]) continue;
        const double d = realigned.at(c, y, x) - pair.gt_aligned.at(c, y, x);
        se += d * d;
        ++n;
      }
  REQUIRE(n > 1000);
  CHECK(std::sqrt(se / double(n)) < 2.0 / 255.0);
}

TEST_CASE("flat-field noise variance matches the configured sigma within 10%") {
  SceneSpec scene;
  scene.canvas_width = 640;
  scene.canvas_height = 640;
  scene.background_contrast = 0.0;  // flat mid-gray
  scene.frame_count = 1;
  scene.seed = 61;
  RigSpec rig;
  rig.read_noise = 0.002;
  rig.shot_noise = 0.0;
  rig.wb_red = 1.0;
  rig.wb_blue = 1.0;
  const CapturedPair pair = capture_pair(scene, rig, 0);
  const MosaicImage aligned = photometric_align(pair.lr);
  double mean = 0.0;
  std::size_t n = 0;
  for (std::size_t y = 0; y < pair.lr.height; ++y)
    for (std::size_t x = 0; x < pair.lr.width; ++x) {
      const BayerSite s = bayer_site(y, x);
      if (s != BayerSite::kG1 && s != BayerSite::kG2) continue;
      mean += aligned.at(y, x);
      ++n;
    }
  mean /= double(n);
  double var = 0.0;
  for (std::size_t y = 0; y < pair.lr.height; ++y)
    for (std::size_t x = 0; x < pair.lr.width; ++x) {
      const BayerSite s = bayer_site(y, x);
      if (s != BayerSite::kG1 && s != BayerSite::kG2) continue;
      const double d = aligned.at(y, x) - mean;
      var += d * d;
    }
  var /= double(n - 1);
  REQUIRE(n >= 10000);
  CHECK(var == doctest::Approx(rig.read_noise * rig.read_noise).epsilon(0.10));
}

TEST_CASE("split sizes: floor then remainder to train") {
  const auto s10 = split_sizes(10, {});
  CHECK(s10[0] == 5);
  CHECK(s10[1] == 1);
  CHECK(s10[2] == 4);
  const auto s6 = split_sizes(6, {});
  CHECK(s6[0] + s6[1] + s6[2] == 6);
  CHECK(s6[0] == 4);  // floor(2.7) + remainder 2
  CHECK(s6[1] == 0);
  CHECK(s6[2] == 2);
}

TEST_CASE("generate_dataset is byte-identical under the same seed") {
  const auto base = std::filesystem::temp_directory_path() / "zoomsr_sc_test";
  std::filesystem::remove_all(base);
  std::vector<SceneSpec> scenes;
  for (std::uint64_t i = 0; i < 2; ++i) {
    scenes.push_back(SceneSpec::random_scene(128, 128, 3, mix_seed(7, i)));
  }
  RigSpec rig;
  rig.read_noise = 0.002;
  const auto m1 = generate_dataset(scenes, rig, base / "a", 7);
  const auto m2 = generate_dataset(scenes, rig, base / "b", 7);

  std::vector<std::filesystem::path> rel;
  for (const auto& e : std::filesystem::recursive_directory_iterator(base / "a")) {
    if (e.is_regular_file()) rel.push_back(std::filesystem::relative(e.path(), base / "a"));
  }
  CHECK(rel.size() == 2 * (3 * 3 + 2) + 1);  // frames*3 + manifest + corrs per clip, + dataset
  for (const auto& r : rel) {
    CHECK(slurp(base / "a" / r) == slurp(base / "b" / r));
  }

  // manifest paths exist and parse into loadable clips
  const DatasetManifest dm = DatasetManifest::load(m1);
  CHECK(dm.clips.size() == 2);
  for (const auto& [relpath, split] : dm.clips) {
    const auto cp = m1.parent_path() / relpath;
    CHECK(std::filesystem::exists(cp));
    const ClipPair clip = load_clip(cp);
    CHECK(clip.frame_count() == 3);
    CHECK(clip.gt_frames.size() == 3);
    CHECK(clip.corrs.size() == 20);
  }
  (void)m2;
  std::filesystem::remove_all(base);
}
