#include "zoomsr/features.hpp"

#include <Eigen/Dense>

#include <cstring>
#include <fstream>

#include "zoomsr/errors.hpp"
#include "zoomsr/io.hpp"
#include "zoomsr/rng.hpp"

namespace zoomsr {

const char* group_name(GroupId g) { return g == GroupId::kPhi1 ? "phi1" : "phi2"; }

ExtractorSpec ExtractorSpec::defaults(std::uint64_t seed) {
  ExtractorSpec s;
  s.seed = seed;
  s.phi2_layers = {{16, 3, 1}, {32, 3, 2}, {64, 3, 2}};
  s.phi1_layers = {{96, 3, 2}, {96, 3, 2}};
  return s;
}

void ExtractorSpec::validate() const {
  if (phi2_layers.empty()) throw ConfigError("extractor spec: phi2 layer group is empty");
  if (phi1_layers.empty()) throw ConfigError("extractor spec: phi1 layer group is empty");
  for (const auto& l : stack()) {
    if (l.channels == 0) throw ConfigError("extractor spec: layer with zero channels");
    if (l.kernel == 0 || l.kernel % 2 == 0) {
      throw ConfigError("extractor spec: kernel size must be odd and positive");
    }
    if (l.stride == 0) throw ConfigError("extractor spec: zero stride");
  }
  // Phi1 must sit deeper (coarser) than every Phi2 tap.
  std::size_t phi2_max = 0;
  for (std::size_t i = 0; i < phi2_layers.size(); ++i) {
    phi2_max = std::max(phi2_max, cumulative_stride(GroupId::kPhi2, i));
  }
  if (cumulative_stride(GroupId::kPhi1, 0) <= phi2_max) {
    throw ConfigError("extractor spec: phi1 taps must have coarser cumulative stride than phi2");
  }
}

std::vector<LayerSpec> ExtractorSpec::stack() const {
  std::vector<LayerSpec> s = phi2_layers;
  s.insert(s.end(), phi1_layers.begin(), phi1_layers.end());
  return s;
}

std::size_t ExtractorSpec::cumulative_stride(GroupId group, std::size_t tap_index) const {
  std::size_t cum = 1;
  const std::size_t upto = group == GroupId::kPhi2 ? tap_index
                                                   : phi2_layers.size() + tap_index;
  const auto layers = stack();
  if (upto >= layers.size()) throw ConfigError("extractor spec: tap index out of range");
  for (std::size_t i = 0; i <= upto; ++i) cum *= layers[i].stride;
  return cum;
}

std::size_t ExtractorSpec::min_input_dim(GroupId group) const {
  const std::size_t taps = group == GroupId::kPhi2 ? phi2_layers.size() : phi1_layers.size();
  std::size_t m = 1;
  for (std::size_t i = 0; i < taps; ++i) m = std::max(m, cumulative_stride(group, i));
  return m;
}

std::size_t FeatureGrid::entry_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.count();
  return n;
}

namespace {

// Orthogonal init: QR of a seeded Gaussian, sign-corrected by diag(R) so the
// result is unique, reshaped to (rows, cols). If rows > cols the columns are
// orthonormal instead.
std::vector<double> orthogonal_matrix(std::size_t rows, std::size_t cols, double gain, Rng& rng) {
  const std::size_t big = std::max(rows, cols), small = std::min(rows, cols);
  Eigen::MatrixXd g(big, small);
  for (std::size_t i = 0; i < big; ++i)
    for (std::size_t j = 0; j < small; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  const Eigen::MatrixXd r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
  for (std::size_t j = 0; j < small; ++j) {
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  }
  Eigen::MatrixXd w = rows <= cols ? Eigen::MatrixXd(q.transpose()) : q;
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = gain * w(i, j);
  return out;
}

}  // namespace

std::vector<double> orthogonal_init(std::size_t rows, std::size_t cols, double gain,
                                    std::uint64_t seed) {
  Rng rng(seed);
  return orthogonal_matrix(rows, cols, gain, rng);
}

Extractor build_extractor(const ExtractorSpec& spec) {
  spec.validate();
  if (spec.source == FeatureSource::kExternalFile) {
    // External grids bypass the stack entirely; weights stay empty and
    // extract() refuses to run.
    Extractor ex;
    ex.spec_ = spec;
    return ex;
  }
  Extractor ex;
  ex.spec_ = spec;
  std::size_t in_ch = 3;
  const auto layers = spec.stack();
  constexpr double kReluGain = 1.4142135623730951;  // sqrt(2)
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& l = layers[li];
    Rng rng(mix_seed(spec.seed, li));
    std::vector<double> w =
        orthogonal_matrix(l.channels, in_ch * l.kernel * l.kernel, kReluGain, rng);
    ex.weights_.push_back(
        Tensor::constant({l.channels, in_ch, l.kernel, l.kernel}, std::move(w)));
    in_ch = l.channels;
  }
  return ex;
}

namespace {

FeatureLayer featureize(const Tensor& fmap, std::size_t layer_index) {
  // fmap (1,C,h,w) -> rows (h*w, C), channel-mean-centered, L2-normalized
  const std::size_t c = fmap.dim(1), h = fmap.dim(2), w = fmap.dim(3);
  Tensor rows = transpose(reshape(fmap, {c, h * w}));
  rows = row_normalize(center_columns(rows));
  FeatureLayer layer;
  layer.layer_index = layer_index;
  layer.fm_width = w;
  layer.fm_height = h;
  layer.coords.resize(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      layer.coords[y * w + x] = {static_cast<int>(x), static_cast<int>(y)};
  layer.feats = rows;
  return layer;
}

}  // namespace

FeatureGrid extract(const Extractor& ex, const Tensor& image, GroupId group) {
  if (ex.spec().source == FeatureSource::kExternalFile) {
    throw ConfigError("extractor with external-file source cannot run extract(); "
                      "use import_features()");
  }
  Tensor x = image;
  if (x.rank() == 3) x = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  if (x.rank() != 4 || x.dim(0) != 1 || x.dim(1) != 3) {
    throw DimensionError("extract: expects a (1,3,H,W) image, got " + shape_str(image.shape()));
  }
  const std::size_t min_dim = ex.spec().min_input_dim(group);
  if (x.dim(2) < min_dim || x.dim(3) < min_dim) {
    throw DimensionError("extract: image " + shape_str(image.shape()) +
                         " smaller than the deepest " + group_name(group) +
                         " tap's cumulative stride " + std::to_string(min_dim));
  }

  FeatureGrid grid;
  grid.group = group;
  grid.src_height = x.dim(2);
  grid.src_width = x.dim(3);

  const auto layers = ex.spec().stack();
  const std::size_t phi2_count = ex.spec().phi2_layers.size();
  const std::size_t first = group == GroupId::kPhi2 ? 0 : phi2_count;
  const std::size_t last = group == GroupId::kPhi2 ? phi2_count : layers.size();

  for (std::size_t li = 0; li < last; ++li) {
    const auto& l = layers[li];
    x = relu(conv2d(x, ex.weights()[li], l.stride, l.kernel / 2));
    if (li >= first) grid.layers.push_back(featureize(x, li));
  }
  return grid;
}

FeatureGrid extract(const Extractor& ex, const RgbImage& image, GroupId group) {
  std::vector<double> data(image.data);
  Tensor t = Tensor::constant({1, 3, image.height, image.width}, std::move(data));
  return extract(ex, t, group);
}

FeatureGrid subsample(const FeatureGrid& grid, std::size_t max_sites_per_layer) {
  if (max_sites_per_layer == 0) throw ConfigError("subsample: max_sites_per_layer must be >= 1");
  FeatureGrid out;
  out.group = grid.group;
  out.src_width = grid.src_width;
  out.src_height = grid.src_height;
  for (const auto& layer : grid.layers) {
    if (layer.count() <= max_sites_per_layer) {
      out.layers.push_back(layer);
      continue;
    }
    std::size_t s = 2;
    auto kept = [&](std::size_t stride) {
      return ((layer.fm_height + stride - 1) / stride) * ((layer.fm_width + stride - 1) / stride);
    };
    while (kept(s) > max_sites_per_layer) ++s;
    std::vector<std::size_t> idx;
    for (std::size_t y = 0; y < layer.fm_height; y += s)
      for (std::size_t x = 0; x < layer.fm_width; x += s) idx.push_back(y * layer.fm_width + x);
    FeatureLayer sl;
    sl.layer_index = layer.layer_index;
    sl.fm_width = layer.fm_width;
    sl.fm_height = layer.fm_height;
    sl.coords.reserve(idx.size());
    for (std::size_t i : idx) sl.coords.push_back(layer.coords[i]);
    sl.feats = gather_rows(layer.feats, idx);
    out.layers.push_back(std::move(sl));
  }
  return out;
}

// ------------------------------------------------------- feature files -----

namespace {

void put_u32le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw FormatError("coords sidecar: truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
  return v;
}

std::filesystem::path coords_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".coords");
}

}  // namespace

void export_feature_layer(const FeatureLayer& layer, const std::filesystem::path& path) {
  write_stnt(path, layer.feats);
  std::ofstream os(coords_path(path), std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + coords_path(path).string());
  put_u32le(os, static_cast<std::uint32_t>(layer.coords.size()));
  for (const auto& c : layer.coords) {
    put_u32le(os, static_cast<std::uint32_t>(c[0]));
    put_u32le(os, static_cast<std::uint32_t>(c[1]));
  }
  if (!os) throw IoError("write failed: " + coords_path(path).string());
}

FeatureLayer import_feature_layer(const std::filesystem::path& path) {
  Tensor feats = read_stnt(path);
  if (feats.rank() != 2) {
    throw FormatError("feature file must hold a rank-2 tensor, got " + shape_str(feats.shape()));
  }
  std::ifstream is(coords_path(path), std::ios::binary);
  if (!is) throw IoError("cannot open: " + coords_path(path).string());
  const std::uint32_t count = get_u32le(is);
  if (count != feats.dim(0)) {
    throw FormatError("coords sidecar count " + std::to_string(count) +
                      " does not match feature rows " + std::to_string(feats.dim(0)));
  }
  FeatureLayer layer;
  layer.coords.resize(count);
  int max_x = 0, max_y = 0;
  for (auto& c : layer.coords) {
    c[0] = static_cast<int>(get_u32le(is));
    c[1] = static_cast<int>(get_u32le(is));
    max_x = std::max(max_x, c[0]);
    max_y = std::max(max_y, c[1]);
  }
  layer.fm_width = static_cast<std::size_t>(max_x) + 1;
  layer.fm_height = static_cast<std::size_t>(max_y) + 1;
  layer.feats = feats;
  return layer;
}

void export_features(const FeatureGrid& grid, const std::filesystem::path& path) {
  if (grid.layers.size() != 1) {
    throw ConfigError("export_features handles single-layer grids; export layers individually");
  }
  export_feature_layer(grid.layers[0], path);
}

FeatureGrid import_features(const std::filesystem::path& path, GroupId group) {
  FeatureGrid grid;
  grid.group = group;
  grid.layers.push_back(import_feature_layer(path));
  grid.src_width = grid.layers[0].fm_width;
  grid.src_height = grid.layers[0].fm_height;
  return grid;
}

}  // namespace zoomsr
