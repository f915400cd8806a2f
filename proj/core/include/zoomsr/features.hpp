#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "zoomsr/image.hpp"
#include "zoomsr/tensor.hpp"

namespace zoomsr {

enum class GroupId : std::uint8_t { kPhi1, kPhi2 };

const char* group_name(GroupId g);

struct LayerSpec {
  std::size_t channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
};

enum class FeatureSource : std::uint8_t { kBuiltinRandom, kExternalFile };

// One convolutional stack; Phi2 taps the shallow layers, Phi1 taps the layers
// stacked after them (coarser cumulative stride).
struct ExtractorSpec {
  std::uint64_t seed = 0x7a5e;
  std::vector<LayerSpec> phi2_layers;  // stack prefix, one Phi2 tap per layer
  std::vector<LayerSpec> phi1_layers;  // stack continuation, one Phi1 tap per layer
  FeatureSource source = FeatureSource::kBuiltinRandom;

  // 16/32/64 channels at strides 1,2,2, then 96/96 at strides 2,2
  // (cumulative strides 1,2,4 for Phi2 and 8,16 for Phi1).
  static ExtractorSpec defaults(std::uint64_t seed = 0x7a5e);

  void validate() const;  // throws ConfigError
  std::vector<LayerSpec> stack() const;
  std::size_t cumulative_stride(GroupId group, std::size_t tap_index) const;
  std::size_t min_input_dim(GroupId group) const;  // deepest tap's cumulative stride
};

// Features of one tapped layer: matrix of unit-norm row vectors plus the
// feature-map coordinate of every row.
struct FeatureLayer {
  std::size_t layer_index = 0;  // index into the full stack
  std::size_t fm_width = 0;
  std::size_t fm_height = 0;
  std::vector<std::array<int, 2>> coords;  // (x, y) in feature-map units
  Tensor feats;                            // (K, C), rows L2-normalized

  std::size_t count() const { return coords.size(); }
  std::size_t dim() const { return feats.defined() ? feats.dim(1) : 0; }
};

struct FeatureGrid {
  GroupId group = GroupId::kPhi2;
  std::size_t src_width = 0;
  std::size_t src_height = 0;
  std::vector<FeatureLayer> layers;

  std::size_t entry_count() const;
};

class Extractor {
 public:
  const ExtractorSpec& spec() const { return spec_; }
  const std::vector<Tensor>& weights() const { return weights_; }  // per stack layer

 private:
  friend Extractor build_extractor(const ExtractorSpec&);
  ExtractorSpec spec_;
  std::vector<Tensor> weights_;  // constants (Co,Ci,k,k), orthogonal rows
};

// Deterministic: same spec -> bit-identical weights.
Extractor build_extractor(const ExtractorSpec& spec);

// Row-orthogonal (or column-orthogonal when rows > cols) matrix from a seeded
// Gaussian QR, sign-fixed by diag(R); shared by the extractor and SR model
// initializers.
std::vector<double> orthogonal_init(std::size_t rows, std::size_t cols, double gain,
                                    std::uint64_t seed);

// image is (1,3,H,W) or (3,H,W); gradient flows through to the image when it
// is a gradient-carrying tape tensor. H and W must each be >= the deepest
// tapped layer's cumulative stride.
FeatureGrid extract(const Extractor& ex, const Tensor& image, GroupId group);
FeatureGrid extract(const Extractor& ex, const RgbImage& image, GroupId group);

// Deterministic spatially-uniform reduction: keeps every s-th site per axis
// with the smallest s that brings each layer under max_sites_per_layer.
FeatureGrid subsample(const FeatureGrid& grid, std::size_t max_sites_per_layer);

// ----- external feature files -----------------------------------------------
// Feature matrix as STNT (K x C) at `path` plus a coordinate sidecar at
// `path + ".coords"`: u32 count, count x (u32 x, u32 y), little-endian.

void export_feature_layer(const FeatureLayer& layer, const std::filesystem::path& path);
FeatureLayer import_feature_layer(const std::filesystem::path& path);

// Single-layer convenience wrappers matching the grid-level interface.
void export_features(const FeatureGrid& grid, const std::filesystem::path& path);
FeatureGrid import_features(const std::filesystem::path& path, GroupId group);

}  // namespace zoomsr
