#include "zoomsr/gradcheck.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "zoomsr/features.hpp"
#include "zoomsr/rawpipe.hpp"
#include "zoomsr/rng.hpp"
#include "zoomsr/stcl.hpp"
#include "zoomsr/tensor.hpp"
#include "zoomsr/trainer.hpp"

namespace zoomsr {

namespace {

constexpr double kFdStep = 1e-3;

double rel_err(double a, double b) {
  const double scale = std::max(std::fabs(a), std::fabs(b));
  if (scale < 1e-7) return 0.0;  // both effectively zero
  return std::fabs(a - b) / scale;
}

std::uint64_t name_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = seed;
  for (char c : name) h = mix_seed(h, static_cast<std::uint64_t>(c));
  return h;
}

struct Builder {
  std::string name;
  double tol = 1e-4;
  Shape shape;
  // data generator for the leaf; defaults to N(0,1)
  std::function<std::vector<double>(Rng&, std::size_t)> input;
  // graph from the gradient-carrying leaf; any output shape
  std::function<Tensor(Tape&, const Tensor&)> graph;
  std::size_t max_coords = 64;
  double fd_step = kFdStep;
};

std::vector<double> normal_input(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

std::vector<double> positive_input(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = std::fabs(rng.normal()) + 0.5;
  return v;
}

GradCheckResult check_builder(const Builder& b, const GradCheckOptions& opts) {
  GradCheckResult res;
  res.op = b.name;
  res.tolerance = b.tol;
  Rng rng(name_seed(opts.seed, b.name));
  const std::size_t n = numel(b.shape);
  const std::vector<double> x0 = b.input ? b.input(rng, n) : normal_input(rng, n);

  // probe forward to size the output-reduction weights
  std::vector<double> red_w;
  {
    Tape tape;
    Tensor leaf = tape.leaf(b.shape, x0, true);
    Tensor out = b.graph(tape, leaf);
    Rng wr(name_seed(opts.seed, b.name + "/red"));
    red_w = normal_input(wr, out.size());
  }

  auto eval = [&](const std::vector<double>& data, std::vector<double>* grad_out,
                  std::vector<std::size_t>* snapshot) {
    Tape tape;
    Tensor leaf = tape.leaf(b.shape, data, true);
    Tensor out = b.graph(tape, leaf);
    Tensor y = out.size() == 1
                   ? out
                   : sum(mul(out, Tensor::constant(out.shape(), red_w)));
    if (snapshot) *snapshot = tape.selection_snapshot();
    const double v = y.value();
    if (grad_out) {
      tape.backward(y);
      *grad_out = leaf.grad();
    }
    return v;
  };

  std::vector<double> analytic;
  std::vector<std::size_t> snap0;
  eval(x0, &analytic, &snap0);
  const bool inject =
      !opts.inject_bad_grad.empty() && b.name.rfind(opts.inject_bad_grad, 0) == 0;
  if (inject) {
    for (double& g : analytic) g *= 1.01;
  }

  const std::size_t stride = n <= b.max_coords ? 1 : (n + b.max_coords - 1) / b.max_coords;
  for (std::size_t i = 0; i < n; i += stride) {
    std::vector<double> xp = x0, xm = x0;
    xp[i] += b.fd_step;
    xm[i] -= b.fd_step;
    std::vector<std::size_t> sp, sm;
    const double yp = eval(xp, nullptr, &sp);
    const double ym = eval(xm, nullptr, &sm);
    if (sp != sm || sp != snap0) {
      ++res.skipped;
      continue;
    }
    const double fd = (yp - ym) / (2.0 * b.fd_step);
    res.max_rel_err = std::max(res.max_rel_err, rel_err(analytic[i], fd));
    ++res.checked;
  }
  res.pass = res.checked > 0 && res.max_rel_err < res.tolerance;
  return res;
}

}  // namespace

// --------------------------------------------------------- diffcore set ----

std::vector<GradCheckResult> run_diffcore_checks(const GradCheckOptions& opts) {
  std::vector<Builder> builders;
  const std::uint64_t seed = opts.seed;

  auto second_operand = [seed](const std::string& name, const Shape& shape, bool positive) {
    Rng r(name_seed(seed, name + "/other"));
    std::vector<double> v = positive ? positive_input(r, numel(shape))
                                     : normal_input(r, numel(shape));
    return Tensor::constant(shape, std::move(v));
  };

  const Shape e{3, 5};
  builders.push_back({"add", 1e-4, e, {}, [=](Tape&, const Tensor& x) {
                        return add(x, second_operand("add", e, false));
                      }});
  builders.push_back({"sub", 1e-4, e, {}, [=](Tape&, const Tensor& x) {
                        return sub(x, second_operand("sub", e, false));
                      }});
  builders.push_back({"mul", 1e-4, e, {}, [=](Tape&, const Tensor& x) {
                        return mul(x, second_operand("mul", e, false));
                      }});
  builders.push_back({"div.num", 1e-4, e, {}, [=](Tape&, const Tensor& x) {
                        return div(x, second_operand("div.num", e, true));
                      }});
  builders.push_back({"div.den", 1e-4, e, positive_input, [=](Tape&, const Tensor& x) {
                        return div(second_operand("div.den", e, false), x);
                      }});
  builders.push_back({"affine", 1e-4, e, {}, [](Tape&, const Tensor& x) {
                        return affine(x, -1.7, 0.3);
                      }});
  builders.push_back({"exp", 1e-4, e, {}, [](Tape&, const Tensor& x) {
                        return exp(affine(x, 0.5, 0.0));
                      }});
  builders.push_back({"log", 1e-4, e, positive_input, [](Tape&, const Tensor& x) {
                        return log(x);
                      }});
  builders.push_back({"sqrt", 1e-4, e, positive_input, [](Tape&, const Tensor& x) {
                        return sqrt(x);
                      }});
  builders.push_back({"relu", 1e-4, e, {}, [](Tape&, const Tensor& x) { return relu(x); }});
  builders.push_back({"sum", 1e-4, e, {}, [](Tape&, const Tensor& x) { return sum(x); }});
  builders.push_back({"mean", 1e-4, e, {}, [](Tape&, const Tensor& x) { return mean(x); }});

  const Shape conv_in{1, 2, 6, 6};
  const Shape conv_w{3, 2, 3, 3};
  builders.push_back({"conv2d.input", 1e-4, conv_in, {}, [=](Tape&, const Tensor& x) {
                        return conv2d(x, second_operand("conv2d.input", conv_w, false), 1, 1);
                      }});
  builders.push_back({"conv2d.weights", 1e-4, conv_w, {}, [=](Tape&, const Tensor& w) {
                        return conv2d(second_operand("conv2d.weights", conv_in, false), w, 2, 1);
                      }});
  builders.push_back({"add_channel_bias.x", 1e-4, conv_in, {}, [=](Tape&, const Tensor& x) {
                        return add_channel_bias(x, second_operand("add_channel_bias.x",
                                                                  Shape{2}, false));
                      }});
  builders.push_back({"add_channel_bias.b", 1e-4, Shape{2}, {}, [=](Tape&, const Tensor& b) {
                        return add_channel_bias(second_operand("add_channel_bias.b", conv_in,
                                                               false),
                                                b);
                      }});
  builders.push_back({"pixel_shuffle", 1e-4, Shape{1, 8, 3, 3}, {}, [](Tape&, const Tensor& x) {
                        return pixel_shuffle(x, 2);
                      }});
  builders.push_back({"pixel_unshuffle", 1e-4, Shape{1, 2, 6, 6}, {}, [](Tape&, const Tensor& x) {
                        return pixel_unshuffle(x, 2);
                      }});
  builders.push_back({"downsample_bicubic", 1e-4, Shape{1, 2, 8, 8}, {},
                      [](Tape&, const Tensor& x) { return downsample_bicubic(x, 2); }});

  const Shape ma{4, 3}, mb{3, 5};
  builders.push_back({"matmul.a", 1e-4, ma, {}, [=](Tape&, const Tensor& a) {
                        return matmul(a, second_operand("matmul.a", mb, false));
                      }});
  builders.push_back({"matmul.b", 1e-4, mb, {}, [=](Tape&, const Tensor& b) {
                        return matmul(second_operand("matmul.b", ma, false), b);
                      }});
  builders.push_back({"half_sqdist_matrix.a", 1e-4, Shape{4, 6}, {}, [=](Tape&, const Tensor& a) {
                        return half_sqdist_matrix(a, second_operand("half_sqdist_matrix.a",
                                                                    Shape{5, 6}, false));
                      }});
  builders.push_back({"half_sqdist_matrix.b", 1e-4, Shape{5, 6}, {}, [=](Tape&, const Tensor& b) {
                        return half_sqdist_matrix(second_operand("half_sqdist_matrix.b",
                                                                 Shape{4, 6}, false),
                                                  b);
                      }});
  builders.push_back({"transpose", 1e-4, ma, {}, [](Tape&, const Tensor& x) {
                        return transpose(x);
                      }});
  builders.push_back({"reshape", 1e-4, ma, {}, [](Tape&, const Tensor& x) {
                        return reshape(x, {2, 6});
                      }});
  builders.push_back({"permute", 1e-4, Shape{2, 3, 4}, {}, [](Tape&, const Tensor& x) {
                        return permute(x, {2, 0, 1});
                      }});
  builders.push_back({"center_columns", 1e-4, Shape{6, 4}, {}, [](Tape&, const Tensor& x) {
                        return center_columns(x);
                      }});
  builders.push_back({"row_normalize", 1e-4, Shape{6, 4}, {}, [](Tape&, const Tensor& x) {
                        return row_normalize(x);
                      }});
  builders.push_back({"row_min", 1e-4, Shape{5, 7}, {}, [](Tape&, const Tensor& x) {
                        return row_min(x);
                      }});
  builders.push_back({"row_max", 1e-4, Shape{5, 7}, {}, [](Tape&, const Tensor& x) {
                        return row_max(x);
                      }});
  builders.push_back({"row_sum", 1e-4, Shape{5, 7}, {}, [](Tape&, const Tensor& x) {
                        return row_sum(x);
                      }});
  builders.push_back({"div_rows.x", 1e-4, Shape{5, 7}, {}, [=](Tape&, const Tensor& x) {
                        return div_rows(x, second_operand("div_rows.x", Shape{5}, true));
                      }});
  builders.push_back({"div_rows.v", 1e-4, Shape{5}, positive_input, [=](Tape&, const Tensor& v) {
                        return div_rows(second_operand("div_rows.v", Shape{5, 7}, false), v);
                      }});
  builders.push_back({"gather_rows", 1e-4, Shape{6, 4}, {}, [](Tape&, const Tensor& x) {
                        return gather_rows(x, {0, 2, 2, 5});
                      }});

  std::vector<GradCheckResult> results;
  results.reserve(builders.size());
  for (const auto& b : builders) results.push_back(check_builder(b, opts));
  return results;
}

// -------------------------------------------------------------- stcl set ----

namespace {

FeatureGrid grid_from_matrix(const Tensor& feats, GroupId group) {
  FeatureLayer layer;
  layer.layer_index = 0;
  const std::size_t k = feats.dim(0);
  layer.fm_width = k;
  layer.fm_height = 1;
  for (std::size_t i = 0; i < k; ++i) layer.coords.push_back({int(i), 0});
  layer.feats = row_normalize(feats);
  FeatureGrid g;
  g.group = group;
  g.src_width = k;
  g.src_height = 1;
  g.layers.push_back(std::move(layer));
  return g;
}

}  // namespace

std::vector<GradCheckResult> run_stcl_checks(const GradCheckOptions& opts) {
  std::vector<Builder> builders;
  const std::uint64_t seed = opts.seed;

  auto const_grid = [seed](const std::string& name, std::size_t k, std::size_t c, GroupId g) {
    Rng r(name_seed(seed, name));
    return grid_from_matrix(Tensor::constant({k, c}, normal_input(r, k * c)), g);
  };

  const StclConfig cfg;  // defaults: mu 0, sigma 2, lambda 1, T1, w 0.1
  builders.push_back({"stcl.loss_a", 1e-3, Shape{6, 8}, {}, [=](Tape&, const Tensor& x) {
                        FeatureGrid lp = grid_from_matrix(x, GroupId::kPhi1);
                        return loss_a(const_grid("stcl.loss_a/L", 5, 8, GroupId::kPhi1), lp, cfg);
                      }});
  builders.push_back({"stcl.cx_min", 1e-3, Shape{6, 8}, {}, [=](Tape&, const Tensor& x) {
                        FeatureGrid q = grid_from_matrix(x, GroupId::kPhi2);
                        return cx(const_grid("stcl.cx_min/P", 5, 8, GroupId::kPhi2), q, cfg);
                      }});
  builders.push_back({"stcl.cx_normalized", 1e-3, Shape{6, 8}, {}, [=](Tape&, const Tensor& x) {
                        StclConfig c2 = cfg;
                        c2.cx_variant = CxVariant::kNormalizedCx;
                        FeatureGrid q = grid_from_matrix(x, GroupId::kPhi2);
                        return cx(const_grid("stcl.cx_normalized/P", 5, 8, GroupId::kPhi2), q,
                                  c2);
                      }});

  // full loss through the extractor, gradient w.r.t. the SR image
  {
    const ExtractorSpec spec = ExtractorSpec::defaults(name_seed(seed, "stcl.full/ex"));
    auto ex = std::make_shared<Extractor>(build_extractor(spec));
    auto make_image = [seed](const std::string& name, std::size_t hw) {
      Rng r(name_seed(seed, name));
      std::vector<double> v(3 * hw * hw);
      for (auto& x : v) x = 0.5 + 0.2 * r.normal();
      return Tensor::constant({1, 3, hw, hw}, std::move(v));
    };
    constexpr std::size_t kCap = 48;
    auto h0 = std::make_shared<FeatureGrid>(
        subsample(extract(*ex, make_image("stcl.full/h0", 64), GroupId::kPhi2), kCap));
    auto hm = std::make_shared<FeatureGrid>(
        subsample(extract(*ex, make_image("stcl.full/hm", 64), GroupId::kPhi2), kCap));
    auto hp = std::make_shared<FeatureGrid>(
        subsample(extract(*ex, make_image("stcl.full/hp", 64), GroupId::kPhi2), kCap));
    auto lgrid = std::make_shared<FeatureGrid>(
        subsample(extract(*ex, make_image("stcl.full/lr", 16), GroupId::kPhi1), kCap));
    Builder b;
    b.name = "stcl.total_through_extractor";
    b.tol = 1e-3;
    b.fd_step = 1e-4;
    b.shape = {1, 3, 64, 64};
    b.max_coords = 40;
    b.input = [](Rng& r, std::size_t n) {
      std::vector<double> v(n);
      for (auto& x : v) x = 0.5 + 0.2 * r.normal();
      return v;
    };
    b.graph = [=](Tape&, const Tensor& img) {
      FeatureGrid s = subsample(extract(*ex, img, GroupId::kPhi2), kCap);
      FeatureGrid lp = subsample(extract(*ex, downsample_bicubic(img, 4), GroupId::kPhi1), kCap);
      std::map<int, FeatureGrid> neighbors{{-1, *hm}, {1, *hp}};
      return stcl_total(*lgrid, lp, *h0, s, neighbors, cfg).total;
    };
    builders.push_back(std::move(b));
  }

  std::vector<GradCheckResult> results;
  results.reserve(builders.size());
  for (const auto& b : builders) results.push_back(check_builder(b, opts));
  return results;
}

// ------------------------------------------------------------ trainer set ---

std::vector<GradCheckResult> run_trainer_checks(const GradCheckOptions& opts) {
  GradCheckResult res;
  res.op = "trainer.e2e_params";
  res.tolerance = 1e-3;

  SrModelConfig mcfg;
  mcfg.width = 4;
  mcfg.blocks = 1;
  mcfg.seed = name_seed(opts.seed, "trainer/model");
  ModelParams model = init_sr_model(mcfg);

  const ExtractorSpec spec = ExtractorSpec::defaults(name_seed(opts.seed, "trainer/ex"));
  const Extractor ex = build_extractor(spec);
  const StclConfig cfg;
  constexpr std::size_t kCap = 48;

  Rng r(name_seed(opts.seed, "trainer/data"));
  std::vector<double> packed_data(4 * 8 * 8);
  for (auto& v : packed_data) v = 0.4 + 0.2 * r.uniform();
  const Tensor packed = Tensor::constant({1, 4, 8, 8}, packed_data);
  auto make_image = [&](std::size_t hw) {
    std::vector<double> v(3 * hw * hw);
    for (auto& x : v) x = 0.5 + 0.2 * r.normal();
    return Tensor::constant({1, 3, hw, hw}, std::move(v));
  };
  // SR output for a 16 px mosaic patch is 64x64; LR-scale features live at 16
  const FeatureGrid h0 = subsample(extract(ex, make_image(64), GroupId::kPhi2), kCap);
  const FeatureGrid hm = subsample(extract(ex, make_image(64), GroupId::kPhi2), kCap);
  const FeatureGrid hp = subsample(extract(ex, make_image(64), GroupId::kPhi2), kCap);
  const FeatureGrid lgrid = subsample(extract(ex, make_image(16), GroupId::kPhi1), kCap);

  struct Eval {
    double value;
    std::vector<std::size_t> snapshot;
  };
  // leaves are created even for value-only evaluations so every forward is
  // recorded and the selection snapshots stay comparable
  auto forward = [&](bool with_grads, std::vector<std::vector<double>>* grads) {
    Tape tape;
    std::vector<Tensor> leaves;
    Tensor sr = sr_forward(model, tape, packed, &leaves);
    FeatureGrid s = subsample(extract(ex, sr, GroupId::kPhi2), kCap);
    FeatureGrid lp = subsample(extract(ex, downsample_bicubic(sr, 4), GroupId::kPhi1), kCap);
    std::map<int, FeatureGrid> neighbors{{-1, hm}, {1, hp}};
    Tensor total = stcl_total(lgrid, lp, h0, s, neighbors, cfg).total;
    Eval e;
    e.value = total.value();
    e.snapshot = tape.selection_snapshot();
    if (with_grads) {
      tape.backward(total);
      grads->clear();
      for (const auto& leaf : leaves) grads->push_back(leaf.grad());
    }
    return e;
  };

  // a composite graph this size flips some relu unit under a 1e-3 step on
  // almost every weight; a smaller step keeps the selection snapshot stable
  // while FD rounding noise stays orders of magnitude under the tolerance
  constexpr double kParamStep = 1e-5;
  std::vector<std::vector<double>> analytic;
  const Eval base = forward(true, &analytic);
  const bool inject =
      !opts.inject_bad_grad.empty() && res.op.rfind(opts.inject_bad_grad, 0) == 0;

  // sample roughly 1% of coordinates, at least one per parameter tensor
  Rng pick(name_seed(opts.seed, "trainer/pick"));
  for (std::size_t pi = 0; pi < model.params.size(); ++pi) {
    const std::size_t n = model.params[pi].value.size();
    const std::size_t count = std::max<std::size_t>(1, n / 100);
    for (std::size_t k = 0; k < count && res.checked + res.skipped < 48; ++k) {
      const std::size_t j = pick.below(n);
      const double saved = model.params[pi].value[j];
      model.params[pi].value[j] = saved + kParamStep;
      const Eval ep = forward(false, nullptr);
      model.params[pi].value[j] = saved - kParamStep;
      const Eval em = forward(false, nullptr);
      model.params[pi].value[j] = saved;
      if (ep.snapshot != em.snapshot) {
        ++res.skipped;
        continue;
      }
      const double fd = (ep.value - em.value) / (2.0 * kParamStep);
      double a = analytic[pi][j];
      if (inject) a *= 1.01;
      res.max_rel_err = std::max(res.max_rel_err, rel_err(a, fd));
      ++res.checked;
    }
  }
  res.pass = res.checked > 0 && res.max_rel_err < res.tolerance;
  return {res};
}

bool all_passed(const std::vector<GradCheckResult>& results) {
  for (const auto& r : results) {
    if (!r.pass) return false;
  }
  return !results.empty();
}

std::string format_gradcheck_report(const std::vector<GradCheckResult>& results) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-32s %12s %10s %8s %8s %6s\n", "op", "max_rel_err", "tol",
                "checked", "skipped", "pass");
  os << buf;
  for (const auto& r : results) {
    std::snprintf(buf, sizeof(buf), "%-32s %12.3e %10.0e %8zu %8zu %6s\n", r.op.c_str(),
                  r.max_rel_err, r.tolerance, r.checked, r.skipped, r.pass ? "PASS" : "FAIL");
    os << buf;
  }
  return os.str();
}

}  // namespace zoomsr
