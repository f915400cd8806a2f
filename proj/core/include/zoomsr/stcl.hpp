#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "zoomsr/features.hpp"
#include "zoomsr/tensor.hpp"

namespace zoomsr {

enum class CxVariant : std::uint8_t {
  kMinForm,       // mean over rows of the per-row min cosine distance
  kNormalizedCx,  // softmax-normalized contextual similarity, -log score
};

struct StclConfig {
  double mu = 0.0;       // spatial kernel center, feature-map units
  double sigma = 2.0;    // spatial kernel width
  double lambda = 1.0;   // temporal weight
  int temporal_radius = 1;
  std::map<int, double> w = {{-1, 0.1}, {1, 0.1}};  // per-offset weights, t != 0
  CxVariant cx_variant = CxVariant::kMinForm;
  double cx_bandwidth = 0.5;

  void validate() const;  // throws ConfigError
  std::string to_kv() const;
  static StclConfig from_kv(const std::string& text);
};

// Losses are scalar tensors; gradient-carrying whenever the feature grids
// were extracted from gradient-carrying images.
struct LossBreakdown {
  Tensor loss_a;
  Tensor loss_r;
  std::map<int, Tensor> loss_c;
  Tensor loss_t;
  Tensor total;

  std::string to_kv() const;  // key=value lines, fixed order
};

// D[i][j] = 1 - <a_i, b_j> on unit rows; grids must share group and dim.
Tensor cosine_distance_matrix(const FeatureLayer& a, const FeatureLayer& b);

// kappa[i][j] = exp(-(||pa_i - pb_j|| - mu)^2 / (2 sigma^2)), constant tensor.
Tensor spatial_kernel_matrix(const std::vector<std::array<int, 2>>& coords_a,
                             const std::vector<std::array<int, 2>>& coords_b, double mu,
                             double sigma);

// Matrix-level forms (tested against hand-computed examples; the grid-level
// losses below reduce to these per layer).
Tensor loss_a_from_matrices(const Tensor& dist, const Tensor& kappa);
Tensor cx_min_form_from_matrix(const Tensor& dist);
Tensor cx_normalized_from_matrix(const Tensor& dist, double bandwidth);

// Alignment loss between LR features and downsampled-SR features (Phi1),
// averaged over the group's layers.
Tensor loss_a(const FeatureGrid& lr, const FeatureGrid& lr_prime, const StclConfig& cfg);

// Contextual distance between feature distributions; rows of the distance
// matrix are P (the reference side), the min runs over Q.
Tensor cx(const FeatureGrid& p, const FeatureGrid& q, const StclConfig& cfg);

// cx(H0, S) on Phi2 grids of the paired HR frame and the SR output.
Tensor loss_r(const FeatureGrid& h0, const FeatureGrid& s, const StclConfig& cfg);

// w_t * cx(Ht, S); t must be a nonzero configured offset.
Tensor loss_c(const FeatureGrid& ht, const FeatureGrid& s, int t, const StclConfig& cfg);

// Sum of loss_c over every t in [-T, T] \ {0}; neighbors must cover them all.
Tensor loss_t(const std::map<int, FeatureGrid>& neighbors, const FeatureGrid& s,
              const StclConfig& cfg);

// total = loss_a + loss_r + lambda * loss_t
LossBreakdown stcl_total(const FeatureGrid& lr, const FeatureGrid& lr_prime,
                         const FeatureGrid& h0, const FeatureGrid& s_phi2,
                         const std::map<int, FeatureGrid>& neighbors, const StclConfig& cfg);

}  // namespace zoomsr
