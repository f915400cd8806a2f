#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "zoomsr/image.hpp"
#include "zoomsr/tensor.hpp"

namespace zoomsr {

// ----- Bayer frames ----------------------------------------------------------

enum class BayerSite : std::uint8_t { kR, kG1, kG2, kB };

inline BayerSite bayer_site(std::size_t y, std::size_t x) {
  // RGGB: R at (even,even), G1 at (even,odd), G2 at (odd,even), B at (odd,odd)
  const bool oy = (y & 1) != 0, ox = (x & 1) != 0;
  if (!oy && !ox) return BayerSite::kR;
  if (!oy && ox) return BayerSite::kG1;
  if (oy && !ox) return BayerSite::kG2;
  return BayerSite::kB;
}

struct BayerFrame {
  std::size_t width = 0;   // even
  std::size_t height = 0;  // even
  std::vector<std::uint16_t> samples;
  std::uint16_t black_level = 0;
  double r_red = 1.0;   // white-balance gain for red sites
  double r_blue = 1.0;  // white-balance gain for blue sites

  BayerFrame() = default;
  BayerFrame(std::size_t w, std::size_t h) : width(w), height(h), samples(w * h, 0) {}
  std::uint16_t at(std::size_t y, std::size_t x) const { return samples[y * width + x]; }
  std::uint16_t& at(std::size_t y, std::size_t x) { return samples[y * width + x]; }
  void validate() const;  // even dims, black level sane
};

// Black-level subtraction, normalization by (2^16-1 - black) and per-channel
// white-balance gains; output clamped to [0,1].
MosaicImage photometric_align(const BayerFrame& frame);

// Raw sample values as doubles (no normalization); for tests and diagnostics.
MosaicImage raw_plane(const BayerFrame& frame);

// Mean sample of a dark capture, rounded half-up.
std::uint16_t estimate_black_level(const BayerFrame& dark);

// RGGB mosaic plane -> (4, H/2, W/2) tensor, channels [R, G1, G2, B].
Tensor pack_mosaic(const MosaicImage& plane);
MosaicImage unpack_mosaic(const Tensor& packed);

// Half-resolution RGB view of a packed-aligned mosaic: R, (G1+G2)/2, B.
RgbImage half_res_rgb(const MosaicImage& aligned);

// ----- homography ------------------------------------------------------------

struct Vec2 {
  double x = 0.0, y = 0.0;
};

struct Homography {
  // row-major 3x3, normalized so m[8] == 1
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Homography identity() { return {}; }
  static Homography translation(double tx, double ty);
  static Homography from_array(const std::array<double, 9>& a);

  Vec2 apply(Vec2 p) const;
  Homography inverse() const;  // throws NumericError if singular
  Homography compose(const Homography& inner) const;  // this ∘ inner
  double det() const;
  void normalize();  // divide by m[8]
};

struct Correspondence {
  double x = 0.0, y = 0.0;    // source point
  double xp = 0.0, yp = 0.0;  // target point
};

struct HomographyEstimate {
  Homography h;
  double rms = 0.0;  // reprojection RMS over the input correspondences
};

// Normalized DLT (Hartley normalization) least squares. Needs >= 4
// correspondences in a non-degenerate configuration.
HomographyEstimate estimate_homography(std::span<const Correspondence> corrs);

// Inverse-mapping bilinear warp: out(p) = src(h(p)), where h maps output
// pixel coordinates into source image coordinates. Out-of-bounds samples are
// zero and cleared in valid_mask when provided.
RgbImage warp(const RgbImage& src, const Homography& h, std::size_t out_w, std::size_t out_h,
              std::vector<std::uint8_t>* valid_mask = nullptr);

// ----- field-of-view matching --------------------------------------------------

struct FovWindow {
  std::size_t x = 0, y = 0, width = 0, height = 0;
};

// Centered LR-frame window covered by the long-focus camera at this focal
// ratio (margins equal on both sides, left/top gets the smaller half).
FovWindow fov_window(std::size_t lr_width, std::size_t lr_height, double focal_ratio);

// Crops hr to the region covering exactly the LR frame's central FoV window;
// a native HR frame of size window*ratio passes through unchanged.
RgbImage match_fov(std::size_t lr_width, std::size_t lr_height, const RgbImage& hr,
                   double focal_ratio);

// ----- clips and patches --------------------------------------------------------

struct ClipPair {
  std::string name;
  std::vector<BayerFrame> lr_frames;
  std::vector<RgbImage> hr_frames;
  std::vector<RgbImage> gt_frames;  // aligned ground truth when available
  double fps = 15.0;
  Homography h_ideal_to_captured;  // HR pixel units
  double scale_offset = 1.0;
  double zoom_ratio = 4.0;
  std::vector<Correspondence> corrs;  // (ideal, captured) in HR pixel units

  std::size_t frame_count() const { return lr_frames.size(); }
  void validate() const;
};

struct PatchSample {
  std::size_t center_frame = 0;
  std::size_t lr_x = 0, lr_y = 0;  // patch origin, full LR mosaic coords (even)
  BayerFrame lr_patch;
  std::vector<RgbImage> hr_patches;  // offsets -T..+T in order
  std::vector<RgbImage> gt_patches;  // same windows from gt frames when present
  int t_radius = 0;
};

// Random consecutive patches; LR window stays inside the FoV-matched region
// on even Bayer boundaries and the homography-mapped patch quad stays inside
// the HR frame. Deterministic under seed.
std::vector<PatchSample> crop_patches(const ClipPair& pair, std::size_t lr_patch,
                                      std::size_t zoom, int t_radius, std::size_t count,
                                      std::uint64_t seed);

// ----- manifests ----------------------------------------------------------------

struct ClipManifest {
  std::string name;
  std::size_t frames = 0;
  double fps = 15.0;
  std::size_t width = 0, height = 0;  // LR mosaic dims
  double zoom_ratio = 4.0;
  std::uint16_t black_level = 0;
  double wb_red = 1.0, wb_blue = 1.0;
  double scale_offset = 1.0;
  std::array<double, 9> homography{1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::string correspondence_file;
  std::vector<std::string> lr_paths, hr_paths, gt_paths;  // relative to the manifest

  void save(const std::filesystem::path& path) const;
  static ClipManifest load(const std::filesystem::path& path);
};

std::vector<Correspondence> load_correspondences(const std::filesystem::path& path);
void save_correspondences(const std::filesystem::path& path,
                          std::span<const Correspondence> corrs);

ClipPair load_clip(const std::filesystem::path& manifest_path);

enum class Split : std::uint8_t { kTrain, kVal, kTest };
const char* split_name(Split s);

struct DatasetManifest {
  double zoom_ratio = 4.0;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, Split>> clips;  // manifest path, split

  std::vector<std::filesystem::path> clip_paths(const std::filesystem::path& self_path,
                                                Split split) const;
  void save(const std::filesystem::path& path) const;
  static DatasetManifest load(const std::filesystem::path& path);
};

}  // namespace zoomsr
