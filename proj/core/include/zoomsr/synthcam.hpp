#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "zoomsr/image.hpp"
#include "zoomsr/rawpipe.hpp"

namespace zoomsr {

struct SpriteSpec {
  std::uint64_t texture_seed = 0;
  double size = 32.0;       // square sprite edge, truth pixels
  double vx = 0.0, vy = 0.0;  // truth px / frame
  double x0 = 0.0, y0 = 0.0;  // top-left at t = 0
};

struct SceneSpec {
  std::size_t canvas_width = 0;   // truth raster dims (= LR dims * zoom)
  std::size_t canvas_height = 0;
  std::uint64_t background_seed = 1;
  double background_contrast = 1.0;  // 0 gives a flat mid-gray field
  std::vector<SpriteSpec> sprites;
  std::size_t frame_count = 20;
  double fps = 15.0;
  std::uint64_t seed = 1;  // drives noise draws and per-scene rig geometry

  // Textured background + a few moving sprites with trajectories clamped to
  // the canvas over all frames.
  static SceneSpec random_scene(std::size_t canvas_w, std::size_t canvas_h,
                                std::size_t frame_count, std::uint64_t seed);
  void validate() const;
};

struct RigSpec {
  double zoom_ratio = 4.0;
  double shift_min = 10.0;  // misalignment magnitude bounds, HR pixels
  double shift_max = 40.0;
  double perspective = 0.1;  // projective part, fraction of the shift
  double read_noise = 0.0;   // Gaussian sigma, normalized [0,1] units
  double shot_noise = 0.0;   // variance slope vs signal, normalized units
  std::uint16_t black_level = 2048;
  double wb_red = 1.9;
  double wb_blue = 1.7;
  // mild long-focus ISP mismatch so photometric alignment has work to do
  std::array<double, 3> hr_gain{1.02, 1.0, 0.98};
  std::array<double, 3> hr_offset{0.01, 0.0, -0.01};

  void validate() const;
};

// Deterministic continuous scene sampled at frame t; values in [0,1].
RgbImage render_truth(const SceneSpec& scene, std::size_t t);

struct CapturedPair {
  BayerFrame lr;          // full-FoV mosaic, noise + black level + inverse WB
  RgbImage hr;            // central-FoV capture, misaligned, 8-bit quantized
  RgbImage gt_aligned;    // noise-free ideal-grid truth crop, 8-bit quantized
  Homography h_ideal_to_captured;
  std::vector<Correspondence> corrs;  // 20 ground-truth pairs, HR px
};

// The per-scene rig geometry (homography, photometric state) is a pure
// function of (scene.seed, rig); noise draws depend on (scene.seed, t).
CapturedPair capture_pair(const SceneSpec& scene, const RigSpec& rig, std::size_t t);

// Misalignment homography for this scene: translation plus a projective
// component, scaled so the mean HR corner displacement equals the drawn
// shift magnitude exactly.
Homography rig_misalignment(const SceneSpec& scene, const RigSpec& rig, std::size_t hr_w,
                            std::size_t hr_h);

struct DatasetOptions {
  std::size_t train_pct = 45;
  std::size_t val_pct = 10;  // remainder of 100 goes to test
};

// Writes one directory per clip (PGM/PPM frames, correspondences, clip
// manifest) plus dataset.manifest with the split; byte-identical under the
// same inputs. Returns the dataset manifest path.
std::filesystem::path generate_dataset(const std::vector<SceneSpec>& scenes, const RigSpec& rig,
                                       const std::filesystem::path& out_dir, std::uint64_t seed,
                                       const DatasetOptions& opts = {});

// Split sizes: floor of each percentage, remainder to train.
std::array<std::size_t, 3> split_sizes(std::size_t n, const DatasetOptions& opts);

}  // namespace zoomsr
