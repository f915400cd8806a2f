#include "zoomsr/rawpipe.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "zoomsr/errors.hpp"
#include "zoomsr/io.hpp"
#include "zoomsr/rng.hpp"

namespace zoomsr {

void BayerFrame::validate() const {
  if (width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0) {
    throw DimensionError("bayer frame dims must be even and nonzero, got " +
                         std::to_string(width) + "x" + std::to_string(height));
  }
  if (samples.size() != width * height) {
    throw DimensionError("bayer frame sample count mismatch");
  }
  if (r_red <= 0.0 || r_blue <= 0.0) {
    throw ConfigError("white-balance ratios must be > 0");
  }
}

MosaicImage photometric_align(const BayerFrame& frame) {
  frame.validate();
  MosaicImage out(frame.width, frame.height);
  const double norm = 1.0 / (65535.0 - double(frame.black_level));
  for (std::size_t y = 0; y < frame.height; ++y) {
    for (std::size_t x = 0; x < frame.width; ++x) {
      const double s = double(frame.at(y, x));
      double v = std::max(0.0, s - double(frame.black_level)) * norm;
      switch (bayer_site(y, x)) {
        case BayerSite::kR: v *= frame.r_red; break;
        case BayerSite::kB: v *= frame.r_blue; break;
        default: break;
      }
      out.at(y, x) = std::min(v, 1.0);
    }
  }
  return out;
}

MosaicImage raw_plane(const BayerFrame& frame) {
  MosaicImage out(frame.width, frame.height);
  for (std::size_t i = 0; i < frame.samples.size(); ++i) {
    out.values[i] = double(frame.samples[i]);
  }
  return out;
}

std::uint16_t estimate_black_level(const BayerFrame& dark) {
  if (dark.samples.empty()) throw DimensionError("dark frame is empty");
  double s = 0.0;
  for (std::uint16_t v : dark.samples) s += double(v);
  return static_cast<std::uint16_t>(std::floor(s / double(dark.samples.size()) + 0.5));
}

Tensor pack_mosaic(const MosaicImage& plane) {
  if (plane.width % 2 != 0 || plane.height % 2 != 0 || plane.width == 0 || plane.height == 0) {
    throw DimensionError("pack_mosaic: dims must be even, got " + std::to_string(plane.width) +
                         "x" + std::to_string(plane.height));
  }
  const std::size_t hw = plane.width / 2, hh = plane.height / 2;
  std::vector<double> data(4 * hh * hw);
  for (std::size_t ty = 0; ty < hh; ++ty) {
    for (std::size_t tx = 0; tx < hw; ++tx) {
      data[(0 * hh + ty) * hw + tx] = plane.at(2 * ty, 2 * tx);          // R
      data[(1 * hh + ty) * hw + tx] = plane.at(2 * ty, 2 * tx + 1);      // G1
      data[(2 * hh + ty) * hw + tx] = plane.at(2 * ty + 1, 2 * tx);      // G2
      data[(3 * hh + ty) * hw + tx] = plane.at(2 * ty + 1, 2 * tx + 1);  // B
    }
  }
  return Tensor::constant({4, hh, hw}, std::move(data));
}

MosaicImage unpack_mosaic(const Tensor& packed) {
  if (packed.rank() != 3 || packed.dim(0) != 4) {
    throw DimensionError("unpack_mosaic: expects (4,H/2,W/2), got " + shape_str(packed.shape()));
  }
  const std::size_t hh = packed.dim(1), hw = packed.dim(2);
  MosaicImage out(hw * 2, hh * 2);
  const auto& d = packed.data();
  for (std::size_t ty = 0; ty < hh; ++ty) {
    for (std::size_t tx = 0; tx < hw; ++tx) {
      out.at(2 * ty, 2 * tx) = d[(0 * hh + ty) * hw + tx];
      out.at(2 * ty, 2 * tx + 1) = d[(1 * hh + ty) * hw + tx];
      out.at(2 * ty + 1, 2 * tx) = d[(2 * hh + ty) * hw + tx];
      out.at(2 * ty + 1, 2 * tx + 1) = d[(3 * hh + ty) * hw + tx];
    }
  }
  return out;
}

RgbImage half_res_rgb(const MosaicImage& aligned) {
  Tensor packed = pack_mosaic(aligned);
  const std::size_t hh = packed.dim(1), hw = packed.dim(2);
  RgbImage out(hw, hh, PixelOrigin::kSynthetic);
  const auto& d = packed.data();
  for (std::size_t y = 0; y < hh; ++y) {
    for (std::size_t x = 0; x < hw; ++x) {
      out.at(0, y, x) = d[(0 * hh + y) * hw + x];
      out.at(1, y, x) = 0.5 * (d[(1 * hh + y) * hw + x] + d[(2 * hh + y) * hw + x]);
      out.at(2, y, x) = d[(3 * hh + y) * hw + x];
    }
  }
  return out;
}

// ------------------------------------------------------------ homography ---

Homography Homography::translation(double tx, double ty) {
  Homography h;
  h.m = {1, 0, tx, 0, 1, ty, 0, 0, 1};
  return h;
}

Homography Homography::from_array(const std::array<double, 9>& a) {
  Homography h;
  h.m = a;
  h.normalize();
  return h;
}

Vec2 Homography::apply(Vec2 p) const {
  const double w = m[6] * p.x + m[7] * p.y + m[8];
  if (std::fabs(w) < 1e-15) throw NumericError("homography maps point to infinity");
  return {(m[0] * p.x + m[1] * p.y + m[2]) / w, (m[3] * p.x + m[4] * p.y + m[5]) / w};
}

double Homography::det() const {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Homography Homography::inverse() const {
  const double d = det();
  if (std::fabs(d) < 1e-12) throw NumericError("homography not invertible, |det| < 1e-12");
  std::array<double, 9> a;
  a[0] = (m[4] * m[8] - m[5] * m[7]) / d;
  a[1] = (m[2] * m[7] - m[1] * m[8]) / d;
  a[2] = (m[1] * m[5] - m[2] * m[4]) / d;
  a[3] = (m[5] * m[6] - m[3] * m[8]) / d;
  a[4] = (m[0] * m[8] - m[2] * m[6]) / d;
  a[5] = (m[2] * m[3] - m[0] * m[5]) / d;
  a[6] = (m[3] * m[7] - m[4] * m[6]) / d;
  a[7] = (m[1] * m[6] - m[0] * m[7]) / d;
  a[8] = (m[0] * m[4] - m[1] * m[3]) / d;
  return Homography::from_array(a);
}

Homography Homography::compose(const Homography& inner) const {
  std::array<double, 9> a{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) a[i * 3 + j] += m[i * 3 + k] * inner.m[k * 3 + j];
  return Homography::from_array(a);
}

void Homography::normalize() {
  if (std::fabs(m[8]) < 1e-15) throw NumericError("homography has h33 ~ 0");
  for (double& v : m) v /= m[8] == 0.0 ? 1.0 : 1.0;  // overwritten below
  const double s = m[8];
  for (double& v : m) v /= s;
}

namespace {

struct PointNorm {
  double cx, cy, scale;  // p' = scale * (p - c)
};

PointNorm hartley_normalization(std::span<const Correspondence> corrs, bool target) {
  double cx = 0.0, cy = 0.0;
  for (const auto& c : corrs) {
    cx += target ? c.xp : c.x;
    cy += target ? c.yp : c.y;
  }
  cx /= double(corrs.size());
  cy /= double(corrs.size());
  double dist = 0.0;
  for (const auto& c : corrs) {
    const double dx = (target ? c.xp : c.x) - cx;
    const double dy = (target ? c.yp : c.y) - cy;
    dist += std::sqrt(dx * dx + dy * dy);
  }
  dist /= double(corrs.size());
  const double scale = dist > 1e-12 ? std::sqrt(2.0) / dist : 1.0;
  return {cx, cy, scale};
}

}  // namespace

HomographyEstimate estimate_homography(std::span<const Correspondence> corrs) {
  if (corrs.size() < 4) {
    throw NumericError("estimate_homography: needs >= 4 correspondences, got " +
                       std::to_string(corrs.size()));
  }
  const PointNorm na = hartley_normalization(corrs, false);
  const PointNorm nb = hartley_normalization(corrs, true);

  Eigen::MatrixXd a(2 * corrs.size(), 9);
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    const double x = na.scale * (corrs[i].x - na.cx);
    const double y = na.scale * (corrs[i].y - na.cy);
    const double xp = nb.scale * (corrs[i].xp - nb.cx);
    const double yp = nb.scale * (corrs[i].yp - nb.cy);
    a.row(2 * i) << 0, 0, 0, -x, -y, -1, yp * x, yp * y, yp;
    a.row(2 * i + 1) << x, y, 1, 0, 0, 0, -xp * x, -xp * y, -xp;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // A second (near-)zero singular value means the solution is not unique:
  // degenerate configuration (e.g. collinear points).
  if (sv(7) < 1e-10 * std::max(1.0, sv(0))) {
    throw NumericError("estimate_homography: degenerate correspondence configuration");
  }
  const Eigen::VectorXd h = svd.matrixV().col(8);

  // Denormalize: H = Tb^-1 * Hn * Ta
  Homography hn;
  for (int i = 0; i < 9; ++i) hn.m[i] = h(i);
  Homography ta;
  ta.m = {na.scale, 0, -na.scale * na.cx, 0, na.scale, -na.scale * na.cy, 0, 0, 1};
  Homography tb_inv;
  tb_inv.m = {1.0 / nb.scale, 0, nb.cx, 0, 1.0 / nb.scale, nb.cy, 0, 0, 1};
  Homography est = tb_inv.compose(hn.compose(ta));
  est.normalize();

  double se = 0.0;
  for (const auto& c : corrs) {
    const Vec2 p = est.apply({c.x, c.y});
    const double dx = p.x - c.xp, dy = p.y - c.yp;
    se += dx * dx + dy * dy;
  }
  return {est, std::sqrt(se / double(corrs.size()))};
}

RgbImage warp(const RgbImage& src, const Homography& h, std::size_t out_w, std::size_t out_h,
              std::vector<std::uint8_t>* valid_mask) {
  if (std::fabs(h.det()) < 1e-12) throw NumericError("warp: homography not invertible");
  RgbImage out(out_w, out_h, src.origin);
  if (valid_mask) valid_mask->assign(out_w * out_h, 0);
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      const Vec2 q = h.apply({double(x), double(y)});
      const bool inside = q.x >= 0.0 && q.x <= double(src.width - 1) && q.y >= 0.0 &&
                          q.y <= double(src.height - 1);
      if (!inside) continue;
      if (valid_mask) (*valid_mask)[y * out_w + x] = 1;
      for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = sample_bilinear(src, c, q.x, q.y);
    }
  }
  return out;
}

// ------------------------------------------------------------ FoV matching --

FovWindow fov_window(std::size_t lr_width, std::size_t lr_height, double focal_ratio) {
  if (focal_ratio < 1.0) throw ConfigError("fov_window: focal ratio must be >= 1");
  const auto win_w = static_cast<std::size_t>(std::floor(double(lr_width) / focal_ratio + 0.5));
  const auto win_h = static_cast<std::size_t>(std::floor(double(lr_height) / focal_ratio + 0.5));
  if (win_w == 0 || win_h == 0) throw DimensionError("fov_window: window collapsed to zero");
  FovWindow w;
  w.width = win_w;
  w.height = win_h;
  w.x = (lr_width - win_w) / 2;
  w.y = (lr_height - win_h) / 2;
  return w;
}

RgbImage match_fov(std::size_t lr_width, std::size_t lr_height, const RgbImage& hr,
                   double focal_ratio) {
  const FovWindow win = fov_window(lr_width, lr_height, focal_ratio);
  const auto want_w = static_cast<std::size_t>(std::floor(double(win.width) * focal_ratio + 0.5));
  const auto want_h = static_cast<std::size_t>(std::floor(double(win.height) * focal_ratio + 0.5));
  if (hr.width == want_w && hr.height == want_h) return hr;
  if (hr.width < want_w || hr.height < want_h) {
    throw DimensionError("match_fov: HR frame " + std::to_string(hr.width) + "x" +
                         std::to_string(hr.height) + " smaller than FoV-matched size " +
                         std::to_string(want_w) + "x" + std::to_string(want_h));
  }
  return crop(hr, (hr.width - want_w) / 2, (hr.height - want_h) / 2, want_w, want_h);
}

// ------------------------------------------------------------------ clips ---

void ClipPair::validate() const {
  if (lr_frames.size() != hr_frames.size()) {
    throw DimensionError("clip: LR and HR frame counts differ (" +
                         std::to_string(lr_frames.size()) + " vs " +
                         std::to_string(hr_frames.size()) + ")");
  }
  if (!gt_frames.empty() && gt_frames.size() != lr_frames.size()) {
    throw DimensionError("clip: ground-truth frame count mismatch");
  }
  if (zoom_ratio < 1.0) throw ConfigError("clip: zoom ratio must be >= 1");
}

std::vector<PatchSample> crop_patches(const ClipPair& pair, std::size_t lr_patch,
                                      std::size_t zoom, int t_radius, std::size_t count,
                                      std::uint64_t seed) {
  pair.validate();
  if (t_radius < 0) throw ConfigError("crop_patches: negative temporal radius");
  const std::size_t span = 2 * std::size_t(t_radius) + 1;
  if (pair.frame_count() < span) {
    throw DimensionError("crop_patches: clip has " + std::to_string(pair.frame_count()) +
                         " frames, needs at least " + std::to_string(span));
  }
  if (lr_patch % 2 != 0) throw DimensionError("crop_patches: LR patch size must be even");
  const BayerFrame& f0 = pair.lr_frames[0];
  const FovWindow win = fov_window(f0.width, f0.height, pair.zoom_ratio);
  if (lr_patch > win.width || lr_patch > win.height) {
    throw DimensionError("crop_patches: patch " + std::to_string(lr_patch) +
                         " exceeds FoV window " + std::to_string(win.width) + "x" +
                         std::to_string(win.height));
  }
  const RgbImage& hr0 = pair.hr_frames[0];
  const std::size_t hr_patch = lr_patch * zoom;

  Rng rng(seed);
  std::vector<PatchSample> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      const std::size_t frame =
          std::size_t(t_radius) + rng.below(pair.frame_count() - span + 1);
      // even-aligned origin inside the FoV window
      const std::size_t max_ox = (win.width - lr_patch) / 2;
      const std::size_t max_oy = (win.height - lr_patch) / 2;
      const std::size_t px = win.x + 2 * rng.below(max_ox + 1);
      const std::size_t py = win.y + 2 * rng.below(max_oy + 1);
      // ideal HR window of this patch
      const double ix0 = double(px - win.x) * double(zoom);
      const double iy0 = double(py - win.y) * double(zoom);
      const double ix1 = ix0 + double(hr_patch) - 1.0;
      const double iy1 = iy0 + double(hr_patch) - 1.0;
      // the true content of the patch must exist inside the captured HR frame
      const Vec2 quad[4] = {pair.h_ideal_to_captured.apply({ix0, iy0}),
                            pair.h_ideal_to_captured.apply({ix1, iy0}),
                            pair.h_ideal_to_captured.apply({ix0, iy1}),
                            pair.h_ideal_to_captured.apply({ix1, iy1})};
      bool inside = true;
      for (const Vec2& q : quad) {
        inside = inside && q.x >= 0.0 && q.x <= double(hr0.width - 1) && q.y >= 0.0 &&
                 q.y <= double(hr0.height - 1);
      }
      if (!inside) continue;

      PatchSample ps;
      ps.center_frame = frame;
      ps.lr_x = px;
      ps.lr_y = py;
      ps.t_radius = t_radius;
      const BayerFrame& lr = pair.lr_frames[frame];
      ps.lr_patch = BayerFrame(lr_patch, lr_patch);
      ps.lr_patch.black_level = lr.black_level;
      ps.lr_patch.r_red = lr.r_red;
      ps.lr_patch.r_blue = lr.r_blue;
      for (std::size_t y = 0; y < lr_patch; ++y)
        for (std::size_t x = 0; x < lr_patch; ++x)
          ps.lr_patch.at(y, x) = lr.at(py + y, px + x);
      const auto hx0 = static_cast<std::size_t>(ix0);
      const auto hy0 = static_cast<std::size_t>(iy0);
      for (int t = -t_radius; t <= t_radius; ++t) {
        const std::size_t fi = frame + std::size_t(std::ptrdiff_t(t));
        ps.hr_patches.push_back(crop(pair.hr_frames[fi], hx0, hy0, hr_patch, hr_patch));
        if (!pair.gt_frames.empty()) {
          ps.gt_patches.push_back(crop(pair.gt_frames[fi], hx0, hy0, hr_patch, hr_patch));
        }
      }
      out.push_back(std::move(ps));
      placed = true;
    }
    if (!placed) {
      throw NumericError("crop_patches: could not place a patch inside both frames; "
                         "misalignment too large for this patch size");
    }
  }
  return out;
}

// -------------------------------------------------------------- manifests ---

void ClipManifest::save(const std::filesystem::path& path) const {
  KvFile kv;
  kv.set("name", name);
  kv.set("frames", std::int64_t(frames));
  kv.set("fps", fps);
  kv.set("width", std::int64_t(width));
  kv.set("height", std::int64_t(height));
  kv.set("zoom_ratio", zoom_ratio);
  kv.set("black_level", std::int64_t(black_level));
  kv.set("wb_red", wb_red);
  kv.set("wb_blue", wb_blue);
  kv.set("scale_offset", scale_offset);
  std::ostringstream hs;
  for (int i = 0; i < 9; ++i) {
    if (i) hs << " ";
    hs << format_double(homography[i]);
  }
  kv.set("homography", hs.str());
  kv.set("correspondences", correspondence_file);
  for (std::size_t i = 0; i < lr_paths.size(); ++i) kv.set("lr_" + std::to_string(i), lr_paths[i]);
  for (std::size_t i = 0; i < hr_paths.size(); ++i) kv.set("hr_" + std::to_string(i), hr_paths[i]);
  for (std::size_t i = 0; i < gt_paths.size(); ++i) kv.set("gt_" + std::to_string(i), gt_paths[i]);
  kv.save(path);
}

ClipManifest ClipManifest::load(const std::filesystem::path& path) {
  const KvFile kv = KvFile::load(path);
  ClipManifest m;
  m.name = kv.get("name");
  m.frames = static_cast<std::size_t>(kv.get_int("frames"));
  m.fps = kv.get_double("fps");
  m.width = static_cast<std::size_t>(kv.get_int("width"));
  m.height = static_cast<std::size_t>(kv.get_int("height"));
  m.zoom_ratio = kv.get_double("zoom_ratio");
  m.black_level = static_cast<std::uint16_t>(kv.get_int("black_level"));
  m.wb_red = kv.get_double("wb_red");
  m.wb_blue = kv.get_double("wb_blue");
  m.scale_offset = kv.get_double("scale_offset");
  {
    std::istringstream hs(kv.get("homography"));
    for (int i = 0; i < 9; ++i) {
      if (!(hs >> m.homography[i])) throw FormatError("clip manifest: bad homography");
    }
  }
  m.correspondence_file = kv.get("correspondences");
  for (std::size_t i = 0; i < m.frames; ++i) {
    m.lr_paths.push_back(kv.get("lr_" + std::to_string(i)));
    m.hr_paths.push_back(kv.get("hr_" + std::to_string(i)));
    const std::string gt_key = "gt_" + std::to_string(i);
    if (kv.has(gt_key)) m.gt_paths.push_back(kv.get(gt_key));
  }
  return m;
}

std::vector<Correspondence> load_correspondences(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::vector<Correspondence> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    Correspondence c;
    if (!(ls >> c.x >> c.y >> c.xp >> c.yp)) {
      throw FormatError("correspondence file: bad line '" + line + "'");
    }
    out.push_back(c);
  }
  return out;
}

void save_correspondences(const std::filesystem::path& path,
                          std::span<const Correspondence> corrs) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << "# ideal_x ideal_y captured_x captured_y\n";
  for (const auto& c : corrs) {
    os << format_double(c.x) << " " << format_double(c.y) << " " << format_double(c.xp) << " "
       << format_double(c.yp) << "\n";
  }
}

ClipPair load_clip(const std::filesystem::path& manifest_path) {
  const ClipManifest m = ClipManifest::load(manifest_path);
  const auto dir = manifest_path.parent_path();
  ClipPair clip;
  clip.name = m.name;
  clip.fps = m.fps;
  clip.zoom_ratio = m.zoom_ratio;
  clip.scale_offset = m.scale_offset;
  clip.h_ideal_to_captured = Homography::from_array(m.homography);
  if (!m.correspondence_file.empty()) {
    clip.corrs = load_correspondences(dir / m.correspondence_file);
  }
  for (std::size_t i = 0; i < m.frames; ++i) {
    BayerFrame f;
    read_pgm16(dir / m.lr_paths[i], f.width, f.height, f.samples);
    f.black_level = m.black_level;
    f.r_red = m.wb_red;
    f.r_blue = m.wb_blue;
    if (f.width != m.width || f.height != m.height) {
      throw FormatError("clip frame " + m.lr_paths[i] + " size differs from manifest");
    }
    clip.lr_frames.push_back(std::move(f));
    clip.hr_frames.push_back(read_ppm8(dir / m.hr_paths[i]));
    if (!m.gt_paths.empty()) clip.gt_frames.push_back(read_ppm8(dir / m.gt_paths[i]));
  }
  clip.validate();
  return clip;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    default: return "test";
  }
}

std::vector<std::filesystem::path> DatasetManifest::clip_paths(
    const std::filesystem::path& self_path, Split split) const {
  std::vector<std::filesystem::path> out;
  for (const auto& [rel, s] : clips) {
    if (s == split) out.push_back(self_path.parent_path() / rel);
  }
  return out;
}

void DatasetManifest::save(const std::filesystem::path& path) const {
  KvFile kv;
  kv.set("zoom_ratio", zoom_ratio);
  kv.set_u64("seed", seed);
  kv.set("clips", std::int64_t(clips.size()));
  for (std::size_t i = 0; i < clips.size(); ++i) {
    kv.set("clip_" + std::to_string(i), clips[i].first);
    kv.set("split_" + std::to_string(i), split_name(clips[i].second));
  }
  kv.save(path);
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  const KvFile kv = KvFile::load(path);
  DatasetManifest m;
  m.zoom_ratio = kv.get_double("zoom_ratio");
  m.seed = kv.get_u64("seed");
  const auto n = static_cast<std::size_t>(kv.get_int("clips"));
  for (std::size_t i = 0; i < n; ++i) {
    const std::string split = kv.get("split_" + std::to_string(i));
    Split s;
    if (split == "train") {
      s = Split::kTrain;
    } else if (split == "val") {
      s = Split::kVal;
    } else if (split == "test") {
      s = Split::kTest;
    } else {
      throw FormatError("dataset manifest: unknown split '" + split + "'");
    }
    m.clips.emplace_back(kv.get("clip_" + std::to_string(i)), s);
  }
  return m;
}

}  // namespace zoomsr
