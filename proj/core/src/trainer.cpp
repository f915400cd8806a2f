#include "zoomsr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "zoomsr/errors.hpp"
#include "zoomsr/io.hpp"
#include "zoomsr/rng.hpp"
#include "zoomsr/synthcam.hpp"

namespace zoomsr {

namespace {

Tensor tensor_from_image(const RgbImage& img) {
  std::vector<double> d(img.data);
  return Tensor::constant({1, 3, img.height, img.width}, std::move(d));
}

RgbImage image_from_tensor(const Tensor& t, bool clamp01) {
  if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 3) {
    throw DimensionError("image_from_tensor: expects (1,3,H,W), got " + shape_str(t.shape()));
  }
  RgbImage img(t.dim(3), t.dim(2), PixelOrigin::kSynthetic);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    img.data[i] = clamp01 ? std::clamp(t.data()[i], 0.0, 1.0) : t.data()[i];
  }
  return img;
}

}  // namespace

// ------------------------------------------------------------- SR model ----

std::size_t ModelParams::total_values() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

Param& ModelParams::find(const std::string& name) {
  for (auto& p : params) {
    if (p.name == name) return p;
  }
  throw ContractError("no parameter named '" + name + "'");
}

namespace {

void push_conv(ModelParams& mp, const std::string& name, std::size_t co, std::size_t ci,
               std::size_t k, double gain, std::uint64_t seed) {
  Param w;
  w.name = name + ".w";
  w.shape = {co, ci, k, k};
  w.value = orthogonal_init(co, ci * k * k, gain, seed);
  w.m.assign(w.value.size(), 0.0);
  w.v.assign(w.value.size(), 0.0);
  mp.params.push_back(std::move(w));
  Param b;
  b.name = name + ".b";
  b.shape = {co};
  b.value.assign(co, 0.0);
  b.m.assign(co, 0.0);
  b.v.assign(co, 0.0);
  mp.params.push_back(std::move(b));
}

constexpr double kConvGain = 1.4142135623730951;  // sqrt(2) for relu stacks
constexpr double kTailGain = 0.1;

}  // namespace

ModelParams init_sr_model(const SrModelConfig& cfg) {
  if (cfg.width == 0 || cfg.blocks == 0) throw ConfigError("sr model: width/blocks must be >= 1");
  ModelParams mp;
  mp.config = cfg;
  std::uint64_t s = 0;
  push_conv(mp, "head", cfg.width, 4, 3, kConvGain, mix_seed(cfg.seed, s++));
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string base = "block" + std::to_string(b);
    push_conv(mp, base + ".conv1", cfg.width, cfg.width, 3, kConvGain, mix_seed(cfg.seed, s++));
    push_conv(mp, base + ".conv2", cfg.width, cfg.width, 3, kConvGain, mix_seed(cfg.seed, s++));
  }
  for (std::size_t u = 0; u < 3; ++u) {
    push_conv(mp, "up" + std::to_string(u), cfg.width * 4, cfg.width, 3, kConvGain,
              mix_seed(cfg.seed, s++));
  }
  push_conv(mp, "tail", 3, cfg.width, 3, kTailGain, mix_seed(cfg.seed, s++));
  return mp;
}

std::size_t sr_param_count(const SrModelConfig& cfg) {
  const std::size_t w = cfg.width;
  std::size_t n = w * 4 * 9 + w;                     // head
  n += cfg.blocks * 2 * (w * w * 9 + w);             // residual blocks
  n += 3 * (4 * w * w * 9 + 4 * w);                  // upsample stages
  n += 3 * w * 9 + 3;                                // tail
  return n;
}

Tensor sr_forward(const ModelParams& model, Tape& tape, const Tensor& packed_lr,
                  std::vector<Tensor>* leaves) {
  if (packed_lr.rank() != 4 || packed_lr.dim(0) != 1 || packed_lr.dim(1) != 4) {
    throw DimensionError("sr_forward: expects packed (1,4,H/2,W/2) input, got " +
                         shape_str(packed_lr.shape()));
  }
  std::vector<Tensor> p;
  p.reserve(model.params.size());
  for (const auto& param : model.params) {
    if (leaves) {
      p.push_back(tape.leaf(param.shape, param.value, true));
    } else {
      p.push_back(Tensor::constant(param.shape, param.value));
    }
  }
  if (leaves) *leaves = p;

  std::size_t i = 0;
  auto conv = [&](const Tensor& x) {
    const Tensor w = p[i], b = p[i + 1];
    i += 2;
    return add_channel_bias(conv2d(x, w, 1, 1), b);
  };

  Tensor x = relu(conv(packed_lr));  // head
  for (std::size_t blk = 0; blk < model.config.blocks; ++blk) {
    Tensor y = conv(x);
    y = conv(relu(y));
    x = add(x, y);
  }
  for (std::size_t u = 0; u < 3; ++u) {
    x = relu(pixel_shuffle(conv(x), 2));
  }
  return conv(x);  // tail
}

RgbImage sr_infer_window(const ModelParams& model, const BayerFrame& lr, const FovWindow& win) {
  FovWindow w = win;
  w.x &= ~std::size_t(1);  // keep RGGB phase
  w.y &= ~std::size_t(1);
  w.width &= ~std::size_t(1);
  w.height &= ~std::size_t(1);
  BayerFrame patch(w.width, w.height);
  patch.black_level = lr.black_level;
  patch.r_red = lr.r_red;
  patch.r_blue = lr.r_blue;
  for (std::size_t y = 0; y < w.height; ++y)
    for (std::size_t x = 0; x < w.width; ++x) patch.at(y, x) = lr.at(w.y + y, w.x + x);
  Tensor packed = pack_mosaic(photometric_align(patch));
  packed = reshape(packed, {1, 4, packed.dim(1), packed.dim(2)});
  Tape tape;
  Tensor sr = sr_forward(model, tape, packed, nullptr);
  return image_from_tensor(sr, true);
}

// ----------------------------------------------------------------- Adam ----

void adam_step(ModelParams& model, const std::vector<std::vector<double>>& grads,
               const AdamConfig& cfg) {
  if (grads.size() != model.params.size()) {
    throw DimensionError("adam_step: got " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(model.params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != model.params[i].value.size()) {
      throw DimensionError("adam_step: gradient size mismatch for '" + model.params[i].name + "'");
    }
    for (double g : grads[i]) {
      if (!std::isfinite(g)) {
        throw ContractError("adam_step: non-finite gradient in parameter '" +
                            model.params[i].name + "' at step " +
                            std::to_string(model.step + 1));
      }
    }
  }
  model.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(model.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(model.step));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Param& p = model.params[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = grads[i][j];
      p.m[j] = cfg.beta1 * p.m[j] + (1.0 - cfg.beta1) * g;
      p.v[j] = cfg.beta2 * p.v[j] + (1.0 - cfg.beta2) * g * g;
      const double mhat = p.m[j] / bc1;
      const double vhat = p.v[j] / bc2;
      p.value[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// ----------------------------------------------------------- loss modes ----

const char* loss_mode_name(LossMode m) {
  switch (m) {
    case LossMode::kL2: return "l2";
    case LossMode::kCx: return "cx";
    case LossMode::kSpatial: return "spatial";
    default: return "stcl";
  }
}

LossMode parse_loss_mode(const std::string& name) {
  if (name == "l2") return LossMode::kL2;
  if (name == "cx") return LossMode::kCx;
  if (name == "spatial") return LossMode::kSpatial;
  if (name == "stcl") return LossMode::kStcl;
  throw ConfigError("unknown loss mode '" + name + "' (expected l2|cx|spatial|stcl)");
}

namespace {

struct IterationLoss {
  double loss_a = 0.0, loss_r = 0.0, loss_t = 0.0, total = 0.0;
  Tensor total_tensor;
};

// Loss evaluation for one sample; sr is the unclamped (1,3,P,P) output.
IterationLoss compute_loss(const Tensor& sr, const PatchSample& ps, const Extractor& ex,
                           const TrainConfig& cfg, std::size_t zoom) {
  IterationLoss out;
  const std::size_t center = std::size_t(ps.t_radius);
  const RgbImage& hr0 = ps.hr_patches[center];

  if (cfg.mode == LossMode::kL2) {
    RgbImage target = hr0;
    if (target.width != sr.dim(3) || target.height != sr.dim(2)) {
      target = resize_bicubic(target, sr.dim(3), sr.dim(2));
    }
    Tensor diff = sub(sr, tensor_from_image(target));
    out.total_tensor = mean(mul(diff, diff));
    out.total = out.total_tensor.value();
    return out;
  }

  const FeatureGrid s_phi2 = subsample(extract(ex, sr, GroupId::kPhi2), cfg.max_feature_sites);
  const FeatureGrid h0_phi2 =
      subsample(extract(ex, hr0, GroupId::kPhi2), cfg.max_feature_sites);

  if (cfg.mode == LossMode::kCx) {
    out.total_tensor = loss_r(h0_phi2, s_phi2, cfg.stcl);
    out.loss_r = out.total_tensor.value();
    out.total = out.loss_r;
    return out;
  }

  // spatial part: align downsampled SR against the LR's half-resolution RGB
  const MosaicImage aligned = photometric_align(ps.lr_patch);
  const RgbImage lr_rgb = half_res_rgb(aligned);
  const Tensor lr_prime_img = downsample_bicubic(sr, 2 * zoom);
  const FeatureGrid l_grid =
      subsample(extract(ex, tensor_from_image(lr_rgb), GroupId::kPhi1), cfg.max_feature_sites);
  const FeatureGrid lp_grid =
      subsample(extract(ex, lr_prime_img, GroupId::kPhi1), cfg.max_feature_sites);

  if (cfg.mode == LossMode::kSpatial) {
    Tensor la = loss_a(l_grid, lp_grid, cfg.stcl);
    Tensor lr_ = loss_r(h0_phi2, s_phi2, cfg.stcl);
    out.total_tensor = add(la, lr_);
    out.loss_a = la.value();
    out.loss_r = lr_.value();
    out.total = out.total_tensor.value();
    return out;
  }

  std::map<int, FeatureGrid> neighbors;
  for (int t = -cfg.stcl.temporal_radius; t <= cfg.stcl.temporal_radius; ++t) {
    if (t == 0) continue;
    const RgbImage& ht = ps.hr_patches[std::size_t(int(center) + t)];
    neighbors.emplace(t, subsample(extract(ex, ht, GroupId::kPhi2), cfg.max_feature_sites));
  }
  LossBreakdown bd = stcl_total(l_grid, lp_grid, h0_phi2, s_phi2, neighbors, cfg.stcl);
  out.loss_a = bd.loss_a.value();
  out.loss_r = bd.loss_r.value();
  out.loss_t = bd.loss_t.value();
  out.total = bd.total.value();
  out.total_tensor = bd.total;
  return out;
}

}  // namespace

// ----------------------------------------------------------- TrainConfig ---

void TrainConfig::validate() const {
  stcl.validate();
  extractor.validate();
  if (iterations == 0) throw ConfigError("train: iterations must be >= 1");
  if (batch != 1) throw ConfigError("train: the protocol fixes batch size 1");
  if (val_every == 0) throw ConfigError("train: val_every must be >= 1");
  if (lr_patch < 16 || lr_patch % 2 != 0) {
    throw ConfigError("train: lr_patch must be even and >= 16");
  }
  if (max_feature_sites == 0) throw ConfigError("train: max_feature_sites must be >= 1");
  if (adam.lr <= 0.0) throw ConfigError("train: learning rate must be > 0");
}

namespace {

std::string layers_to_string(const std::vector<LayerSpec>& layers) {
  std::ostringstream os;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) os << ",";
    os << layers[i].channels << ":" << layers[i].kernel << ":" << layers[i].stride;
  }
  return os.str();
}

std::vector<LayerSpec> layers_from_string(const std::string& s) {
  std::vector<LayerSpec> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    LayerSpec l;
    if (std::sscanf(item.c_str(), "%zu:%zu:%zu", &l.channels, &l.kernel, &l.stride) != 3) {
      throw FormatError("bad layer descriptor '" + item + "' (want channels:kernel:stride)");
    }
    out.push_back(l);
  }
  return out;
}

}  // namespace

std::string TrainConfig::to_kv() const {
  KvFile kv;
  kv.set("mode", loss_mode_name(mode));
  kv.set("iterations", std::int64_t(iterations));
  kv.set("val_every", std::int64_t(val_every));
  kv.set("batch", std::int64_t(batch));
  kv.set_u64("seed", seed);
  kv.set("lr_patch", std::int64_t(lr_patch));
  kv.set("max_feature_sites", std::int64_t(max_feature_sites));
  kv.set("adam_lr", adam.lr);
  kv.set("adam_beta1", adam.beta1);
  kv.set("adam_beta2", adam.beta2);
  kv.set("adam_eps", adam.eps);
  kv.set("model_width", std::int64_t(model.width));
  kv.set("model_blocks", std::int64_t(model.blocks));
  kv.set_u64("model_seed", model.seed);
  kv.set_u64("ex_seed", extractor.seed);
  kv.set("ex_phi2", layers_to_string(extractor.phi2_layers));
  kv.set("ex_phi1", layers_to_string(extractor.phi1_layers));
  kv.set("ex_source",
         extractor.source == FeatureSource::kBuiltinRandom ? "builtin_random" : "external_file");
  kv.set("stcl_mu", stcl.mu);
  kv.set("stcl_sigma", stcl.sigma);
  kv.set("stcl_lambda", stcl.lambda);
  kv.set("stcl_T", std::int64_t(stcl.temporal_radius));
  for (const auto& [t, wt] : stcl.w) kv.set("stcl_w[" + std::to_string(t) + "]", wt);
  kv.set("stcl_cx_variant",
         stcl.cx_variant == CxVariant::kMinForm ? "min_form" : "normalized_cx");
  kv.set("stcl_cx_bandwidth", stcl.cx_bandwidth);
  return kv.serialize();
}

TrainConfig TrainConfig::from_kv(const std::string& text) {
  const KvFile kv = KvFile::parse(text);
  TrainConfig cfg;
  cfg.mode = parse_loss_mode(kv.get("mode"));
  cfg.iterations = static_cast<std::size_t>(kv.get_int("iterations"));
  cfg.val_every = static_cast<std::size_t>(kv.get_int("val_every"));
  cfg.batch = static_cast<std::size_t>(kv.get_int("batch"));
  cfg.seed = kv.get_u64("seed");
  cfg.lr_patch = static_cast<std::size_t>(kv.get_int("lr_patch"));
  cfg.max_feature_sites = static_cast<std::size_t>(kv.get_int("max_feature_sites"));
  cfg.adam.lr = kv.get_double("adam_lr");
  cfg.adam.beta1 = kv.get_double("adam_beta1");
  cfg.adam.beta2 = kv.get_double("adam_beta2");
  cfg.adam.eps = kv.get_double("adam_eps");
  cfg.model.width = static_cast<std::size_t>(kv.get_int("model_width"));
  cfg.model.blocks = static_cast<std::size_t>(kv.get_int("model_blocks"));
  cfg.model.seed = kv.get_u64("model_seed");
  cfg.extractor.seed = kv.get_u64("ex_seed");
  cfg.extractor.phi2_layers = layers_from_string(kv.get("ex_phi2"));
  cfg.extractor.phi1_layers = layers_from_string(kv.get("ex_phi1"));
  cfg.extractor.source = kv.get("ex_source") == "external_file" ? FeatureSource::kExternalFile
                                                                : FeatureSource::kBuiltinRandom;
  cfg.stcl.mu = kv.get_double("stcl_mu");
  cfg.stcl.sigma = kv.get_double("stcl_sigma");
  cfg.stcl.lambda = kv.get_double("stcl_lambda");
  cfg.stcl.temporal_radius = static_cast<int>(kv.get_int("stcl_T"));
  cfg.stcl.w.clear();
  for (const auto& [k, v] : kv.entries()) {
    if (k.rfind("stcl_w[", 0) == 0 && k.back() == ']') {
      cfg.stcl.w[std::stoi(k.substr(7, k.size() - 8))] = std::stod(v);
    }
  }
  cfg.stcl.cx_variant = kv.get("stcl_cx_variant") == "normalized_cx" ? CxVariant::kNormalizedCx
                                                                     : CxVariant::kMinForm;
  cfg.stcl.cx_bandwidth = kv.get_double("stcl_cx_bandwidth");
  return cfg;
}

// ------------------------------------------------------------ checkpoint ---

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << "ZSRCKPT1\n";
  os << ckpt.config.to_kv();
  os << "step = " << ckpt.model.step << "\n";
  os << "iterations_done = " << ckpt.iterations_done << "\n";
  for (int i = 0; i < 4; ++i) os << "rng_" << i << " = " << ckpt.rng_state[i] << "\n";
  os << "param_count = " << ckpt.model.params.size() << "\n";
  os << "ENDCONFIG\n";
  for (const auto& p : ckpt.model.params) {
    os << "PARAM " << p.name << "\n";
    write_stnt(os, p.shape, p.value);
    write_stnt(os, p.shape, p.m);
    write_stnt(os, p.shape, p.v);
  }
  os << "END\n";
  if (!os) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "ZSRCKPT1") {
    throw FormatError("checkpoint: bad magic in " + path.string());
  }
  std::ostringstream cfg_text;
  while (std::getline(is, line) && line != "ENDCONFIG") cfg_text << line << "\n";
  if (line != "ENDCONFIG") throw FormatError("checkpoint: missing ENDCONFIG");
  const KvFile kv = KvFile::parse(cfg_text.str());

  Checkpoint ckpt;
  ckpt.config = TrainConfig::from_kv(cfg_text.str());
  ckpt.iterations_done = static_cast<std::size_t>(kv.get_int("iterations_done"));
  for (int i = 0; i < 4; ++i) ckpt.rng_state[i] = kv.get_u64("rng_" + std::to_string(i));
  ckpt.model.config = ckpt.config.model;
  ckpt.model.step = static_cast<std::size_t>(kv.get_int("step"));
  const auto n = static_cast<std::size_t>(kv.get_int("param_count"));
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(is, line) || line.rfind("PARAM ", 0) != 0) {
      throw FormatError("checkpoint: expected PARAM header");
    }
    Param p;
    p.name = line.substr(6);
    Tensor value = read_stnt(is);
    Tensor m = read_stnt(is);
    Tensor v = read_stnt(is);
    p.shape = value.shape();
    p.value = value.data();
    p.m = m.data();
    p.v = v.data();
    ckpt.model.params.push_back(std::move(p));
  }
  if (!std::getline(is, line) || line != "END") throw FormatError("checkpoint: missing END");
  return ckpt;
}

// -------------------------------------------------------------- training ---

namespace {

double quick_val_psnr(const ModelParams& model,
                      const std::vector<std::filesystem::path>& val_clips, double zoom) {
  if (val_clips.empty()) return 0.0;
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& path : val_clips) {
    const ClipPair clip = load_clip(path);
    if (clip.gt_frames.empty()) continue;
    const FovWindow win =
        fov_window(clip.lr_frames[0].width, clip.lr_frames[0].height, zoom);
    const RgbImage sr = sr_infer_window(model, clip.lr_frames[0], win);
    acc += psnr(sr, clip.gt_frames[0], 255.0);
    ++n;
  }
  return n == 0 ? 0.0 : acc / double(n);
}

}  // namespace

TrainResult train(const std::filesystem::path& dataset_manifest, const TrainConfig& cfg_in,
                  const std::filesystem::path& out_dir) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  const DatasetManifest dm = DatasetManifest::load(dataset_manifest);
  if (dm.zoom_ratio != 4.0) {
    throw ConfigError("train: the SR model is x4; dataset zoom ratio is " +
                      format_double(dm.zoom_ratio));
  }
  const auto zoom = static_cast<std::size_t>(dm.zoom_ratio);
  const auto train_paths = dm.clip_paths(dataset_manifest, Split::kTrain);
  const auto val_paths = dm.clip_paths(dataset_manifest, Split::kVal);
  if (train_paths.empty()) throw ConfigError("train: dataset has no train clips");

  if (cfg.mode == LossMode::kSpatial || cfg.mode == LossMode::kStcl) {
    const std::size_t need = 2 * cfg.extractor.min_input_dim(GroupId::kPhi1);
    if (cfg.lr_patch < need) {
      throw ConfigError("train: lr_patch " + std::to_string(cfg.lr_patch) +
                        " is too small for the phi1 feature path; need >= " +
                        std::to_string(need));
    }
  }

  const int t_radius = cfg.mode == LossMode::kStcl ? cfg.stcl.temporal_radius : 0;
  std::vector<ClipPair> clips;
  for (const auto& p : train_paths) {
    clips.push_back(load_clip(p));
    if (clips.back().frame_count() < std::size_t(2 * t_radius + 1)) {
      throw ConfigError("train: clip '" + clips.back().name + "' has " +
                        std::to_string(clips.back().frame_count()) +
                        " frames; stcl mode needs " + std::to_string(2 * t_radius + 1) +
                        " consecutive frames");
    }
  }

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  ModelParams model;
  Rng rng(cfg.seed);
  std::size_t start_iter = 0;
  if (!cfg.resume_from.empty()) {
    Checkpoint ckpt = load_checkpoint(cfg.resume_from);
    if (ckpt.config.model.width != cfg.model.width ||
        ckpt.config.model.blocks != cfg.model.blocks) {
      throw ConfigError("train: resume checkpoint has a different model architecture");
    }
    model = std::move(ckpt.model);
    rng.load_state(ckpt.rng_state);
    start_iter = ckpt.iterations_done;
  } else {
    model = init_sr_model(cfg.model);
  }

  const Extractor ex = build_extractor(cfg.extractor);

  // reproducibility record
  {
    KvFile rec = KvFile::parse(cfg.to_kv());
    rec.set("dataset", dataset_manifest.string());
    rec.set("version", "zoomsr-0.1.0");
    rec.save(out_dir / "run.manifest");
  }

  const auto log_path = out_dir / "train.log";
  std::ofstream log(log_path, start_iter == 0 ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot open for write: " + log_path.string());
  if (start_iter == 0) log << "# iter loss_a loss_r loss_t total\n";

  double first_sum = 0.0, last_sum = 0.0;
  std::size_t first_n = 0, last_n = 0;
  const std::size_t window = std::min<std::size_t>(100, cfg.iterations);

  for (std::size_t iter = start_iter; iter < cfg.iterations; ++iter) {
    const std::size_t clip_idx = rng.below(clips.size());
    const std::uint64_t patch_seed = rng.next_u64();
    const auto samples =
        crop_patches(clips[clip_idx], cfg.lr_patch, zoom, t_radius, 1, patch_seed);
    const PatchSample& ps = samples[0];

    Tape tape;
    std::vector<Tensor> leaves;
    Tensor packed = pack_mosaic(photometric_align(ps.lr_patch));
    packed = reshape(packed, {1, 4, packed.dim(1), packed.dim(2)});
    Tensor sr = sr_forward(model, tape, packed, &leaves);
    IterationLoss loss = compute_loss(sr, ps, ex, cfg, zoom);
    tape.backward(loss.total_tensor);

    std::vector<std::vector<double>> grads;
    grads.reserve(leaves.size());
    for (const auto& leaf : leaves) grads.push_back(leaf.grad());
    adam_step(model, grads, cfg.adam);

    log << iter << " " << format_double(loss.loss_a) << " " << format_double(loss.loss_r) << " "
        << format_double(loss.loss_t) << " " << format_double(loss.total) << "\n";
    if (iter < window) {
      first_sum += loss.total;
      ++first_n;
    }
    if (iter + window >= cfg.iterations) {
      last_sum += loss.total;
      ++last_n;
    }
    if ((iter + 1) % cfg.val_every == 0 && !val_paths.empty()) {
      log << "# val " << (iter + 1) << " psnr " << format_double(quick_val_psnr(model, val_paths, dm.zoom_ratio))
          << "\n";
      log.flush();
    }
  }

  Checkpoint ckpt;
  ckpt.model = std::move(model);
  ckpt.config = cfg;
  ckpt.rng_state = rng.save_state();
  ckpt.iterations_done = cfg.iterations;
  const auto ckpt_path = out_dir / (std::string("checkpoint_") + loss_mode_name(cfg.mode) + ".zsr");
  save_checkpoint(ckpt_path, ckpt);

  TrainResult res;
  res.checkpoint = ckpt_path;
  res.log = log_path;
  res.first_window_mean = first_n ? first_sum / double(first_n) : 0.0;
  res.last_window_mean = last_n ? last_sum / double(last_n) : 0.0;
  return res;
}

std::vector<LossLogLine> parse_training_log(const std::filesystem::path& log_path) {
  std::ifstream is(log_path);
  if (!is) throw IoError("cannot open: " + log_path.string());
  std::vector<LossLogLine> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    LossLogLine l;
    std::istringstream ls(line);
    if (!(ls >> l.iter >> l.loss_a >> l.loss_r >> l.loss_t >> l.total)) {
      throw FormatError("training log: bad line '" + line + "'");
    }
    out.push_back(l);
  }
  return out;
}

// -------------------------------------------------------------- evaluate ---

namespace {

MethodEval evaluate_method(const std::string& method,
                           const std::function<RgbImage(const ClipPair&, std::size_t,
                                                        const FovWindow&)>& infer,
                           const std::filesystem::path& dataset_manifest, const EvalOptions& opts,
                           const Extractor* ex) {
  const DatasetManifest dm = DatasetManifest::load(dataset_manifest);
  const auto test_paths = dm.clip_paths(dataset_manifest, Split::kTest);
  if (test_paths.empty()) throw ConfigError("evaluate: dataset has no test clips");

  MethodEval ev;
  ev.method = method;
  ev.overall_aligned.label = method;
  ev.overall_aligned.peak = 255.0;
  ev.overall_captured.label = method;
  ev.overall_captured.peak = 255.0;

  for (const auto& path : test_paths) {
    const ClipPair clip = load_clip(path);
    if (clip.gt_frames.empty()) {
      throw ConfigError("evaluate: clip '" + clip.name + "' has no aligned ground-truth frames");
    }
    SceneEval scene;
    scene.scene = clip.name;
    scene.vs_aligned.label = method;
    scene.vs_aligned.peak = 255.0;
    scene.vs_captured.label = method;
    scene.vs_captured.peak = 255.0;
    const FovWindow win = fov_window(clip.lr_frames[0].width, clip.lr_frames[0].height,
                                     clip.zoom_ratio);
    std::size_t frames = clip.frame_count();
    if (opts.max_frames_per_clip > 0) frames = std::min(frames, opts.max_frames_per_clip);
    for (std::size_t t = 0; t < frames; ++t) {
      const RgbImage sr = infer(clip, t, win);
      FrameMetrics fm;
      fm.psnr_db = psnr(sr, clip.gt_frames[t], 255.0);
      fm.ssim = ssim(sr, clip.gt_frames[t]);
      if (opts.with_feat_dist && ex) fm.feat_dist = feat_dist(sr, clip.gt_frames[t], *ex);
      scene.vs_aligned.per_frame.push_back(fm);
      ev.overall_aligned.per_frame.push_back(fm);

      FrameMetrics fc;
      fc.psnr_db = psnr(sr, clip.hr_frames[t], 255.0);
      fc.ssim = ssim(sr, clip.hr_frames[t]);
      scene.vs_captured.per_frame.push_back(fc);
      ev.overall_captured.per_frame.push_back(fc);
    }
    ev.scenes.push_back(std::move(scene));
  }
  return ev;
}

}  // namespace

MethodEval evaluate_checkpoint(const std::filesystem::path& checkpoint,
                               const std::filesystem::path& dataset_manifest,
                               const EvalOptions& opts) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const Extractor ex = build_extractor(ckpt.config.extractor);
  const ModelParams& model = ckpt.model;
  return evaluate_method(
      loss_mode_name(ckpt.config.mode),
      [&model](const ClipPair& clip, std::size_t t, const FovWindow& win) {
        return sr_infer_window(model, clip.lr_frames[t], win);
      },
      dataset_manifest, opts, &ex);
}

MethodEval evaluate_bicubic(const std::filesystem::path& dataset_manifest,
                            const EvalOptions& opts) {
  const Extractor ex = build_extractor(ExtractorSpec::defaults());
  return evaluate_method(
      "bicubic",
      [](const ClipPair& clip, std::size_t t, const FovWindow& win) {
        FovWindow w = win;
        w.x &= ~std::size_t(1);
        w.y &= ~std::size_t(1);
        w.width &= ~std::size_t(1);
        w.height &= ~std::size_t(1);
        BayerFrame patch(w.width, w.height);
        const BayerFrame& lr = clip.lr_frames[t];
        patch.black_level = lr.black_level;
        patch.r_red = lr.r_red;
        patch.r_blue = lr.r_blue;
        for (std::size_t y = 0; y < w.height; ++y)
          for (std::size_t x = 0; x < w.width; ++x) patch.at(y, x) = lr.at(w.y + y, w.x + x);
        const RgbImage half = half_res_rgb(photometric_align(patch));
        return resize_bicubic(half, w.width * 4, w.height * 4);
      },
      dataset_manifest, opts, &ex);
}

std::string format_eval_table(const std::vector<MethodEval>& rows) {
  std::ostringstream os;
  char buf[160];
  os << "== vs aligned ground truth ==\n";
  std::snprintf(buf, sizeof(buf), "%-10s %-12s %10s %8s %10s\n", "method", "scene", "PSNR^",
                "SSIM^", "FeatDist_v");
  os << buf;
  auto fmt_row = [&](const std::string& method, const std::string& scene,
                     const MetricReport& r) {
    if (auto fd = r.mean_feat_dist()) {
      std::snprintf(buf, sizeof(buf), "%-10s %-12s %10.4f %8.4f %10.4f\n", method.c_str(),
                    scene.c_str(), r.mean_psnr(), r.mean_ssim(), *fd);
    } else {
      std::snprintf(buf, sizeof(buf), "%-10s %-12s %10.4f %8.4f %10s\n", method.c_str(),
                    scene.c_str(), r.mean_psnr(), r.mean_ssim(), "-");
    }
    os << buf;
  };
  for (const auto& m : rows) {
    for (const auto& s : m.scenes) fmt_row(m.method, s.scene, s.vs_aligned);
    fmt_row(m.method, "overall", m.overall_aligned);
  }
  os << "== vs captured (misaligned) HR ==\n";
  std::snprintf(buf, sizeof(buf), "%-10s %-12s %10s %8s\n", "method", "scene", "PSNR^", "SSIM^");
  os << buf;
  for (const auto& m : rows) {
    for (const auto& s : m.scenes) {
      std::snprintf(buf, sizeof(buf), "%-10s %-12s %10.4f %8.4f\n", m.method.c_str(),
                    s.scene.c_str(), s.vs_captured.mean_psnr(), s.vs_captured.mean_ssim());
      os << buf;
    }
    std::snprintf(buf, sizeof(buf), "%-10s %-12s %10.4f %8.4f\n", m.method.c_str(), "overall",
                  m.overall_captured.mean_psnr(), m.overall_captured.mean_ssim());
    os << buf;
  }
  return os.str();
}

std::string eval_to_kv(const MethodEval& row) {
  KvFile kv;
  kv.set("method", row.method);
  kv.set("psnr_aligned", row.overall_aligned.mean_psnr());
  kv.set("ssim_aligned", row.overall_aligned.mean_ssim());
  if (auto fd = row.overall_aligned.mean_feat_dist()) kv.set("feat_dist_aligned", *fd);
  kv.set("psnr_captured", row.overall_captured.mean_psnr());
  kv.set("ssim_captured", row.overall_captured.mean_ssim());
  for (const auto& s : row.scenes) {
    kv.set("psnr_aligned[" + s.scene + "]", s.vs_aligned.mean_psnr());
    kv.set("ssim_aligned[" + s.scene + "]", s.vs_aligned.mean_ssim());
    if (auto fd = s.vs_aligned.mean_feat_dist()) kv.set("feat_dist_aligned[" + s.scene + "]", *fd);
    kv.set("psnr_captured[" + s.scene + "]", s.vs_captured.mean_psnr());
    kv.set("ssim_captured[" + s.scene + "]", s.vs_captured.mean_ssim());
  }
  return kv.serialize();
}

}  // namespace zoomsr
