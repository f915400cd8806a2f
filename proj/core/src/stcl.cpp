#include "zoomsr/stcl.hpp"

#include <cmath>
#include <sstream>

#include "zoomsr/errors.hpp"
#include "zoomsr/io.hpp"

namespace zoomsr {

void StclConfig::validate() const {
  if (sigma <= 0.0) throw ConfigError("stcl: sigma must be > 0");
  if (temporal_radius < 0) throw ConfigError("stcl: temporal radius must be >= 0");
  if (cx_bandwidth <= 0.0) throw ConfigError("stcl: cx bandwidth must be > 0");
  for (int t = -temporal_radius; t <= temporal_radius; ++t) {
    if (t == 0) continue;
    auto it = w.find(t);
    if (it == w.end()) {
      throw ConfigError("stcl: missing weight w[" + std::to_string(t) + "]");
    }
    if (it->second < 0.0) {
      throw ConfigError("stcl: w[" + std::to_string(t) + "] must be >= 0");
    }
  }
}

std::string StclConfig::to_kv() const {
  KvFile kv;
  kv.set("mu", mu);
  kv.set("sigma", sigma);
  kv.set("lambda", lambda);
  kv.set("temporal_radius", std::int64_t(temporal_radius));
  for (const auto& [t, wt] : w) kv.set("w[" + std::to_string(t) + "]", wt);
  kv.set("cx_variant", cx_variant == CxVariant::kMinForm ? "min_form" : "normalized_cx");
  kv.set("cx_bandwidth", cx_bandwidth);
  return kv.serialize();
}

StclConfig StclConfig::from_kv(const std::string& text) {
  const KvFile kv = KvFile::parse(text);
  StclConfig cfg;
  cfg.mu = kv.get_double("mu");
  cfg.sigma = kv.get_double("sigma");
  cfg.lambda = kv.get_double("lambda");
  cfg.temporal_radius = static_cast<int>(kv.get_int("temporal_radius"));
  cfg.w.clear();
  for (const auto& [k, v] : kv.entries()) {
    if (k.size() > 3 && k.substr(0, 2) == "w[" && k.back() == ']') {
      cfg.w[std::stoi(k.substr(2, k.size() - 3))] = std::stod(v);
    }
  }
  const std::string variant = kv.get("cx_variant");
  if (variant == "min_form") {
    cfg.cx_variant = CxVariant::kMinForm;
  } else if (variant == "normalized_cx") {
    cfg.cx_variant = CxVariant::kNormalizedCx;
  } else {
    throw FormatError("stcl: unknown cx_variant '" + variant + "'");
  }
  cfg.cx_bandwidth = kv.get_double("cx_bandwidth");
  cfg.validate();
  return cfg;
}

std::string LossBreakdown::to_kv() const {
  std::ostringstream os;
  os << "loss_a = " << format_double(loss_a.value()) << "\n";
  os << "loss_r = " << format_double(loss_r.value()) << "\n";
  for (const auto& [t, lc] : loss_c) {
    os << "loss_c[" << t << "] = " << format_double(lc.value()) << "\n";
  }
  os << "loss_t = " << format_double(loss_t.value()) << "\n";
  os << "total = " << format_double(total.value()) << "\n";
  return os.str();
}

namespace {

void require_compatible(const char* op, const FeatureLayer& a, const FeatureLayer& b) {
  if (a.count() == 0 || b.count() == 0) {
    throw DimensionError(std::string(op) + ": empty feature layer");
  }
  if (a.dim() != b.dim()) {
    throw DimensionError(std::string(op) + ": feature dims differ, " + std::to_string(a.dim()) +
                         " vs " + std::to_string(b.dim()));
  }
}

void require_same_structure(const char* op, const FeatureGrid& a, const FeatureGrid& b) {
  if (a.group != b.group) {
    throw DimensionError(std::string(op) + ": grids from different groups (" +
                         group_name(a.group) + " vs " + group_name(b.group) + ")");
  }
  if (a.layers.empty() || b.layers.empty()) {
    throw DimensionError(std::string(op) + ": empty feature grid");
  }
  if (a.layers.size() != b.layers.size()) {
    throw DimensionError(std::string(op) + ": layer counts differ, " +
                         std::to_string(a.layers.size()) + " vs " +
                         std::to_string(b.layers.size()));
  }
}

Tensor average(const std::vector<Tensor>& xs) {
  Tensor acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = acc + xs[i];
  return acc * (1.0 / double(xs.size()));
}

}  // namespace

Tensor cosine_distance_matrix(const FeatureLayer& a, const FeatureLayer& b) {
  require_compatible("cosine_distance_matrix", a, b);
  // 0.5*||a-b||^2 == 1 - <a,b> on unit rows; the difference form keeps the
  // self-match distance exactly zero and the matrix in [0, 2]
  return half_sqdist_matrix(a.feats, b.feats);
}

Tensor spatial_kernel_matrix(const std::vector<std::array<int, 2>>& coords_a,
                             const std::vector<std::array<int, 2>>& coords_b, double mu,
                             double sigma) {
  if (sigma <= 0.0) throw ConfigError("spatial_kernel_matrix: sigma must be > 0");
  const std::size_t n = coords_a.size(), m = coords_b.size();
  std::vector<double> k(n * m);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double dx = double(coords_a[i][0] - coords_b[j][0]);
      const double dy = double(coords_a[i][1] - coords_b[j][1]);
      const double d = std::sqrt(dx * dx + dy * dy);
      k[i * m + j] = std::exp(-(d - mu) * (d - mu) * inv);
    }
  }
  return Tensor::constant({n, m}, std::move(k));
}

Tensor loss_a_from_matrices(const Tensor& dist, const Tensor& kappa) {
  if (dist.shape() != kappa.shape()) {
    throw DimensionError("loss_a: distance " + shape_str(dist.shape()) + " vs kernel " +
                         shape_str(kappa.shape()));
  }
  return mean(row_min(mul(dist, kappa)));
}

Tensor cx_min_form_from_matrix(const Tensor& dist) { return mean(row_min(dist)); }

Tensor cx_normalized_from_matrix(const Tensor& dist, double bandwidth) {
  // Softmax-normalized contextual similarity. Rows of `dist` are the
  // reference features; columns index the generated features. Each generated
  // feature's distances are normalized by its closest reference distance,
  // converted to bandwidth-scaled affinities and softmaxed over references;
  // the score averages, per reference, the best affinity over generated
  // features.
  constexpr double kEps = 1e-5;
  Tensor e = transpose(dist);                       // (gen, ref)
  Tensor dmin = row_min(e);                         // per generated feature
  Tensor dnorm = div_rows(e, dmin + kEps);
  Tensor w = exp(affine(dnorm, -1.0 / bandwidth, 1.0 / bandwidth));
  Tensor cxm = div_rows(w, row_sum(w));
  Tensor best = row_max(transpose(cxm));            // per reference feature
  return affine(log(mean(best)), -1.0, 0.0);
}

namespace {

Tensor cx_layer(const FeatureLayer& p, const FeatureLayer& q, const StclConfig& cfg) {
  Tensor d = cosine_distance_matrix(p, q);
  return cfg.cx_variant == CxVariant::kMinForm
             ? cx_min_form_from_matrix(d)
             : cx_normalized_from_matrix(d, cfg.cx_bandwidth);
}

}  // namespace

Tensor loss_a(const FeatureGrid& lr, const FeatureGrid& lr_prime, const StclConfig& cfg) {
  cfg.validate();
  require_same_structure("loss_a", lr, lr_prime);
  std::vector<Tensor> per_layer;
  for (std::size_t li = 0; li < lr.layers.size(); ++li) {
    const auto& a = lr.layers[li];
    const auto& b = lr_prime.layers[li];
    require_compatible("loss_a", a, b);
    Tensor d = cosine_distance_matrix(a, b);
    Tensor kappa = spatial_kernel_matrix(a.coords, b.coords, cfg.mu, cfg.sigma);
    per_layer.push_back(loss_a_from_matrices(d, kappa));
  }
  return average(per_layer);
}

Tensor cx(const FeatureGrid& p, const FeatureGrid& q, const StclConfig& cfg) {
  cfg.validate();
  require_same_structure("cx", p, q);
  std::vector<Tensor> per_layer;
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    require_compatible("cx", p.layers[li], q.layers[li]);
    per_layer.push_back(cx_layer(p.layers[li], q.layers[li], cfg));
  }
  return average(per_layer);
}

Tensor loss_r(const FeatureGrid& h0, const FeatureGrid& s, const StclConfig& cfg) {
  return cx(h0, s, cfg);
}

Tensor loss_c(const FeatureGrid& ht, const FeatureGrid& s, int t, const StclConfig& cfg) {
  if (t == 0) throw ContractError("loss_c: offset t must be nonzero (t=0 is the paired frame)");
  cfg.validate();
  auto it = cfg.w.find(t);
  if (it == cfg.w.end()) {
    throw ConfigError("loss_c: no weight configured for offset " + std::to_string(t));
  }
  return cx(ht, s, cfg) * it->second;
}

Tensor loss_t(const std::map<int, FeatureGrid>& neighbors, const FeatureGrid& s,
              const StclConfig& cfg) {
  cfg.validate();
  Tensor acc = Tensor::scalar(0.0);
  for (int t = -cfg.temporal_radius; t <= cfg.temporal_radius; ++t) {
    if (t == 0) continue;
    auto it = neighbors.find(t);
    if (it == neighbors.end()) {
      throw ConfigError("loss_t: missing neighbor grid for offset " + std::to_string(t));
    }
    acc = acc + loss_c(it->second, s, t, cfg);
  }
  return acc;
}

LossBreakdown stcl_total(const FeatureGrid& lr, const FeatureGrid& lr_prime,
                         const FeatureGrid& h0, const FeatureGrid& s_phi2,
                         const std::map<int, FeatureGrid>& neighbors, const StclConfig& cfg) {
  cfg.validate();
  LossBreakdown out;
  out.loss_a = loss_a(lr, lr_prime, cfg);
  out.loss_r = loss_r(h0, s_phi2, cfg);
  Tensor lt = Tensor::scalar(0.0);
  for (int t = -cfg.temporal_radius; t <= cfg.temporal_radius; ++t) {
    if (t == 0) continue;
    auto it = neighbors.find(t);
    if (it == neighbors.end()) {
      throw ConfigError("stcl_total: missing neighbor grid for offset " + std::to_string(t));
    }
    Tensor lc = loss_c(it->second, s_phi2, t, cfg);
    out.loss_c[t] = lc;
    lt = lt + lc;
  }
  out.loss_t = lt;
  out.total = out.loss_a + out.loss_r + out.loss_t * cfg.lambda;
  return out;
}

}  // namespace zoomsr
