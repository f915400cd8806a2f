#include "zoomsr/synthcam.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "zoomsr/errors.hpp"
#include "zoomsr/io.hpp"
#include "zoomsr/rng.hpp"

namespace zoomsr {

namespace {

double lattice_value(std::uint64_t seed, std::int64_t ix, std::int64_t iy) {
  const std::uint64_t h =
      mix_seed(mix_seed(seed, static_cast<std::uint64_t>(ix + (1LL << 30))),
               static_cast<std::uint64_t>(iy + (1LL << 30)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smoothstep01(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(std::uint64_t seed, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto ix = static_cast<std::int64_t>(fx);
  const auto iy = static_cast<std::int64_t>(fy);
  const double tx = smoothstep01(x - fx);
  const double ty = smoothstep01(y - fy);
  const double v00 = lattice_value(seed, ix, iy);
  const double v10 = lattice_value(seed, ix + 1, iy);
  const double v01 = lattice_value(seed, ix, iy + 1);
  const double v11 = lattice_value(seed, ix + 1, iy + 1);
  const double top = v00 + (v10 - v00) * tx;
  const double bot = v01 + (v11 - v01) * tx;
  return top + (bot - top) * ty;
}

struct Octave {
  double spacing, amplitude;
};
constexpr Octave kOctaves[] = {{48.0, 0.45}, {16.0, 0.30}, {8.0, 0.15}};

double texture_sample(std::uint64_t seed, std::size_t channel, double x, double y,
                      double contrast) {
  double v = 0.5;
  for (std::size_t o = 0; o < std::size(kOctaves); ++o) {
    const std::uint64_t os = mix_seed(seed, o * 3 + channel);
    v += contrast * kOctaves[o].amplitude *
         (value_noise(os, x / kOctaves[o].spacing, y / kOctaves[o].spacing) - 0.5);
  }
  return std::clamp(v, 0.0, 1.0);
}

// Antialiased soft rectangle edge, ~3 px transition.
double sprite_alpha(const SpriteSpec& s, double sx, double sy, double x, double y) {
  constexpr double kEdge = 3.0;
  const double dx = std::min(x - sx, sx + s.size - x);
  const double dy = std::min(y - sy, sy + s.size - y);
  const double d = std::min(dx, dy);
  if (d <= 0.0) return 0.0;
  if (d >= kEdge) return 1.0;
  return smoothstep01(d / kEdge);
}

// Continuous scene value at truth coordinates; the core of both the truth
// raster and the HR capture path.
double scene_sample(const SceneSpec& scene, std::size_t t, std::size_t channel, double x,
                    double y) {
  double v = texture_sample(scene.background_seed, channel, x, y, scene.background_contrast);
  for (const auto& s : scene.sprites) {
    const double maxx = double(scene.canvas_width) - s.size;
    const double maxy = double(scene.canvas_height) - s.size;
    const double sx = std::clamp(s.x0 + s.vx * double(t), 0.0, std::max(0.0, maxx));
    const double sy = std::clamp(s.y0 + s.vy * double(t), 0.0, std::max(0.0, maxy));
    const double a = sprite_alpha(s, sx, sy, x, y);
    if (a <= 0.0) continue;
    const double sv = texture_sample(s.texture_seed, channel, x - sx, y - sy, 1.0);
    v = v * (1.0 - a) + sv * a;
  }
  return v;
}

double quantize8(double v) {
  return std::clamp(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5), 0.0, 255.0) / 255.0;
}

}  // namespace

void SceneSpec::validate() const {
  if (canvas_width == 0 || canvas_height == 0) throw ConfigError("scene: empty canvas");
  if (frame_count == 0) throw ConfigError("scene: zero frames");
  if (fps <= 0.0) throw ConfigError("scene: fps must be > 0");
  for (const auto& s : sprites) {
    if (s.size <= 0.0 || s.size > double(std::min(canvas_width, canvas_height))) {
      throw ConfigError("scene: sprite size out of range");
    }
  }
}

SceneSpec SceneSpec::random_scene(std::size_t canvas_w, std::size_t canvas_h,
                                  std::size_t frame_count, std::uint64_t seed) {
  SceneSpec spec;
  spec.canvas_width = canvas_w;
  spec.canvas_height = canvas_h;
  spec.frame_count = frame_count;
  spec.seed = seed;
  spec.background_seed = mix_seed(seed, 0xb6);
  Rng rng(mix_seed(seed, 0x5c));
  const std::size_t count = 3 + rng.below(3);
  const double tmax = double(frame_count - 1);
  for (std::size_t i = 0; i < count; ++i) {
    SpriteSpec s;
    s.texture_seed = mix_seed(seed, 0x100 + i);
    const double dim = double(std::min(canvas_w, canvas_h));
    s.size = rng.uniform(dim / 8.0, dim / 4.0);
    s.vx = rng.uniform(-3.0, 3.0);
    s.vy = rng.uniform(-3.0, 3.0);
    // start so the full trajectory stays inside the canvas
    const double span_x = s.vx * tmax, span_y = s.vy * tmax;
    const double lo_x = std::max(0.0, -span_x);
    const double hi_x = double(canvas_w) - s.size - std::max(0.0, span_x);
    const double lo_y = std::max(0.0, -span_y);
    const double hi_y = double(canvas_h) - s.size - std::max(0.0, span_y);
    if (hi_x < lo_x || hi_y < lo_y) {
      s.vx = 0.0;
      s.vy = 0.0;
      s.x0 = rng.uniform(0.0, double(canvas_w) - s.size);
      s.y0 = rng.uniform(0.0, double(canvas_h) - s.size);
    } else {
      s.x0 = rng.uniform(lo_x, hi_x);
      s.y0 = rng.uniform(lo_y, hi_y);
    }
    spec.sprites.push_back(s);
  }
  return spec;
}

void RigSpec::validate() const {
  if (zoom_ratio < 1.0 || zoom_ratio != std::floor(zoom_ratio)) {
    throw ConfigError("rig: zoom ratio must be a positive integer");
  }
  if (shift_min < 0.0 || shift_max < shift_min) throw ConfigError("rig: bad shift range");
  if (perspective < 0.0) throw ConfigError("rig: perspective must be >= 0");
  if (read_noise < 0.0 || shot_noise < 0.0) throw ConfigError("rig: negative noise");
  if (black_level >= 65535) throw ConfigError("rig: black level out of range");
  if (wb_red <= 0.0 || wb_blue <= 0.0) throw ConfigError("rig: WB ratios must be > 0");
  for (double g : hr_gain) {
    if (g <= 0.0) throw ConfigError("rig: HR gain must be > 0");
  }
}

RgbImage render_truth(const SceneSpec& scene, std::size_t t) {
  scene.validate();
  if (t >= scene.frame_count) {
    throw ContractError("render_truth: frame " + std::to_string(t) + " out of range (count " +
                        std::to_string(scene.frame_count) + ")");
  }
  RgbImage out(scene.canvas_width, scene.canvas_height, PixelOrigin::kSynthetic);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < scene.canvas_height; ++y)
      for (std::size_t x = 0; x < scene.canvas_width; ++x)
        out.at(c, y, x) = scene_sample(scene, t, c, double(x), double(y));
  return out;
}

Homography rig_misalignment(const SceneSpec& scene, const RigSpec& rig, std::size_t hr_w,
                            std::size_t hr_h) {
  Rng rng(mix_seed(scene.seed, 0xa116));
  const double magnitude = rig.shift_min == rig.shift_max
                               ? rig.shift_min
                               : rng.uniform(rig.shift_min, rig.shift_max);
  const double theta = rng.uniform(0.0, 6.283185307179586);
  const double ux = std::cos(theta), uy = std::sin(theta);
  const double w = double(hr_w - 1), h = double(hr_h - 1);
  const double diag = std::sqrt(w * w + h * h);

  Homography p = Homography::identity();
  if (rig.perspective > 0.0 && magnitude > 0.0) {
    p.m[6] = rig.perspective * magnitude * rng.uniform(-1.0, 1.0) / (diag * w);
    p.m[7] = rig.perspective * magnitude * rng.uniform(-1.0, 1.0) / (diag * h);
  }

  const Vec2 corners[4] = {{0.0, 0.0}, {w, 0.0}, {0.0, h}, {w, h}};
  auto mean_displacement = [&](double s) {
    Homography t = Homography::translation(s * ux, s * uy).compose(p);
    double acc = 0.0;
    for (const Vec2& c : corners) {
      const Vec2 q = t.apply(c);
      acc += std::hypot(q.x - c.x, q.y - c.y);
    }
    return acc / 4.0;
  };

  if (magnitude == 0.0) return p;
  // Convex in s with a single crossing of the target level on the rising
  // branch: bisect the translation scale so the mean corner displacement
  // equals the drawn magnitude exactly.
  double lo = 0.0, hi = 3.0 * magnitude + 16.0;
  while (mean_displacement(hi) < magnitude) hi *= 2.0;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mean_displacement(mid) < magnitude) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return Homography::translation(0.5 * (lo + hi) * ux, 0.5 * (lo + hi) * uy).compose(p);
}

CapturedPair capture_pair(const SceneSpec& scene, const RigSpec& rig, std::size_t t) {
  scene.validate();
  rig.validate();
  if (t >= scene.frame_count) {
    throw ContractError("capture_pair: frame index out of range");
  }
  const auto z = static_cast<std::size_t>(rig.zoom_ratio);
  if (scene.canvas_width % z != 0 || scene.canvas_height % z != 0) {
    throw DimensionError("capture_pair: canvas dims must be divisible by the zoom ratio");
  }
  const std::size_t lr_w = scene.canvas_width / z;
  const std::size_t lr_h = scene.canvas_height / z;
  if (lr_w % 2 != 0 || lr_h % 2 != 0) {
    throw DimensionError("capture_pair: LR dims must be even for RGGB tiling");
  }
  // HR native frame: central 1/z of the LR field of view at full truth
  // resolution, same pixel count as the LR sensor.
  const std::size_t hr_w = lr_w, hr_h = lr_h;
  const double ox = double(scene.canvas_width - hr_w) / 2.0;
  const double oy = double(scene.canvas_height - hr_h) / 2.0;

  CapturedPair out;
  out.h_ideal_to_captured = rig_misalignment(scene, rig, hr_w, hr_h);
  const Homography h_inv = out.h_ideal_to_captured.inverse();

  // aligned ground truth: exact ideal-grid samples, 8-bit quantized
  out.gt_aligned = RgbImage(hr_w, hr_h, PixelOrigin::kSrgb8);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < hr_h; ++y)
      for (std::size_t x = 0; x < hr_w; ++x)
        out.gt_aligned.at(c, y, x) =
            quantize8(scene_sample(scene, t, c, ox + double(x), oy + double(y)));

  // captured HR: ideal content displaced by the rig homography, then the
  // photometric mismatch of the long-focus ISP branch
  out.hr = RgbImage(hr_w, hr_h, PixelOrigin::kSrgb8);
  for (std::size_t y = 0; y < hr_h; ++y) {
    for (std::size_t x = 0; x < hr_w; ++x) {
      const Vec2 q = h_inv.apply({double(x), double(y)});
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = scene_sample(scene, t, c, ox + q.x, oy + q.y);
        out.hr.at(c, y, x) = quantize8(v * rig.hr_gain[c] + rig.hr_offset[c]);
      }
    }
  }

  // LR raw: zoom x zoom block mean per RGGB site, inverse white balance,
  // sensor noise, black level, 16-bit quantization
  out.lr = BayerFrame(lr_w, lr_h);
  out.lr.black_level = rig.black_level;
  out.lr.r_red = rig.wb_red;
  out.lr.r_blue = rig.wb_blue;
  Rng noise(mix_seed(mix_seed(scene.seed, 0x401e), t));
  const double scale = 65535.0 - double(rig.black_level);
  for (std::size_t y = 0; y < lr_h; ++y) {
    for (std::size_t x = 0; x < lr_w; ++x) {
      std::size_t channel;
      double wb = 1.0;
      switch (bayer_site(y, x)) {
        case BayerSite::kR: channel = 0; wb = rig.wb_red; break;
        case BayerSite::kB: channel = 2; wb = rig.wb_blue; break;
        default: channel = 1; break;
      }
      double acc = 0.0;
      for (std::size_t by = 0; by < z; ++by)
        for (std::size_t bx = 0; bx < z; ++bx)
          acc += scene_sample(scene, t, channel, double(x * z + bx), double(y * z + by));
      double v = acc / double(z * z) / wb;
      const double sigma = std::sqrt(rig.read_noise * rig.read_noise +
                                     rig.shot_noise * std::max(v, 0.0));
      if (sigma > 0.0) v += sigma * noise.normal();
      const double dn = std::floor(double(rig.black_level) + v * scale + 0.5);
      out.lr.at(y, x) = static_cast<std::uint16_t>(
          std::clamp(dn, double(rig.black_level), 65535.0));
    }
  }

  // 20 ground-truth correspondences on a 5x4 interior grid
  const double inset_x = double(hr_w) * 0.1, inset_y = double(hr_h) * 0.1;
  for (std::size_t gy = 0; gy < 4; ++gy) {
    for (std::size_t gx = 0; gx < 5; ++gx) {
      Correspondence c;
      c.x = inset_x + (double(hr_w) - 2.0 * inset_x) * double(gx) / 4.0;
      c.y = inset_y + (double(hr_h) - 2.0 * inset_y) * double(gy) / 3.0;
      const Vec2 p = out.h_ideal_to_captured.apply({c.x, c.y});
      c.xp = p.x;
      c.yp = p.y;
      out.corrs.push_back(c);
    }
  }
  return out;
}

std::array<std::size_t, 3> split_sizes(std::size_t n, const DatasetOptions& opts) {
  if (opts.train_pct + opts.val_pct > 100) throw ConfigError("split percentages exceed 100");
  const std::size_t test_pct = 100 - opts.train_pct - opts.val_pct;
  std::size_t n_train = n * opts.train_pct / 100;
  const std::size_t n_val = n * opts.val_pct / 100;
  const std::size_t n_test = n * test_pct / 100;
  n_train += n - (n_train + n_val + n_test);  // remainder to train
  return {n_train, n_val, n_test};
}

std::filesystem::path generate_dataset(const std::vector<SceneSpec>& scenes, const RigSpec& rig,
                                       const std::filesystem::path& out_dir, std::uint64_t seed,
                                       const DatasetOptions& opts) {
  rig.validate();
  if (scenes.empty()) throw ConfigError("generate_dataset: no scenes");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  const auto sizes = split_sizes(scenes.size(), opts);
  DatasetManifest dm;
  dm.zoom_ratio = rig.zoom_ratio;
  dm.seed = seed;

  for (std::size_t ci = 0; ci < scenes.size(); ++ci) {
    char name[32];
    std::snprintf(name, sizeof(name), "clip%03zu", ci);
    const auto clip_dir = out_dir / name;
    std::filesystem::create_directories(clip_dir, ec);
    if (ec) throw IoError("cannot create " + clip_dir.string() + ": " + ec.message());

    ClipManifest cm;
    cm.name = name;
    cm.frames = scenes[ci].frame_count;
    cm.fps = scenes[ci].fps;
    cm.zoom_ratio = rig.zoom_ratio;
    cm.black_level = rig.black_level;
    cm.wb_red = rig.wb_red;
    cm.wb_blue = rig.wb_blue;
    cm.correspondence_file = "corrs.txt";

    for (std::size_t t = 0; t < scenes[ci].frame_count; ++t) {
      const CapturedPair pair = capture_pair(scenes[ci], rig, t);
      if (t == 0) {
        cm.width = pair.lr.width;
        cm.height = pair.lr.height;
        cm.homography = pair.h_ideal_to_captured.m;
        save_correspondences(clip_dir / cm.correspondence_file, pair.corrs);
      }
      char frame[32];
      std::snprintf(frame, sizeof(frame), "lr_%04zu.pgm", t);
      write_pgm16(clip_dir / frame, pair.lr.width, pair.lr.height, pair.lr.samples);
      cm.lr_paths.emplace_back(frame);
      std::snprintf(frame, sizeof(frame), "hr_%04zu.ppm", t);
      write_ppm8(clip_dir / frame, pair.hr);
      cm.hr_paths.emplace_back(frame);
      std::snprintf(frame, sizeof(frame), "gt_%04zu.ppm", t);
      write_ppm8(clip_dir / frame, pair.gt_aligned);
      cm.gt_paths.emplace_back(frame);
    }
    cm.save(clip_dir / "clip.manifest");

    Split split = Split::kTest;
    if (ci < sizes[0]) {
      split = Split::kTrain;
    } else if (ci < sizes[0] + sizes[1]) {
      split = Split::kVal;
    }
    dm.clips.emplace_back(std::string(name) + "/clip.manifest", split);
  }

  const auto manifest_path = out_dir / "dataset.manifest";
  dm.save(manifest_path);
  return manifest_path;
}

}  // namespace zoomsr
