#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "zoomsr/features.hpp"
#include "zoomsr/metrics.hpp"
#include "zoomsr/rawpipe.hpp"
#include "zoomsr/stcl.hpp"
#include "zoomsr/tensor.hpp"

namespace zoomsr {

// ----- SR model ---------------------------------------------------------------
// Packed-Bayer residual SR net: head conv, B residual blocks
// (conv-relu-conv + identity skip, no normalization), three x2
// pixel-shuffle upsample stages (x8 from packed half resolution, i.e. x4
// versus the mosaic), tail conv to RGB.

struct SrModelConfig {
  std::size_t width = 32;
  std::size_t blocks = 3;
  std::uint64_t seed = 1;
};

struct Param {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> m;  // Adam first moment
  std::vector<double> v;  // Adam second moment
};

struct ModelParams {
  SrModelConfig config;
  std::vector<Param> params;
  std::size_t step = 0;  // Adam step counter

  std::size_t total_values() const;
  Param& find(const std::string& name);
};

ModelParams init_sr_model(const SrModelConfig& cfg);
std::size_t sr_param_count(const SrModelConfig& cfg);  // closed form

// Builds the forward graph; packed_lr is (1,4,H/2,W/2), output (1,3,4H,4W)
// in mosaic units. When leaves is given it receives one gradient-carrying
// leaf per parameter, aligned with model.params.
Tensor sr_forward(const ModelParams& model, Tape& tape, const Tensor& packed_lr,
                  std::vector<Tensor>* leaves = nullptr);

// Inference on one LR frame restricted to its FoV window; output clamped to
// [0,1], sized window*4 in mosaic units.
RgbImage sr_infer_window(const ModelParams& model, const BayerFrame& lr, const FovWindow& win);

// ----- Adam ---------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard bias-corrected update; grads are aligned with model.params.
// NaN/Inf gradients abort with the parameter name.
void adam_step(ModelParams& model, const std::vector<std::vector<double>>& grads,
               const AdamConfig& cfg);

// ----- training --------------------------------------------------------------------

enum class LossMode : std::uint8_t { kL2, kCx, kSpatial, kStcl };
const char* loss_mode_name(LossMode m);
LossMode parse_loss_mode(const std::string& name);

struct TrainConfig {
  LossMode mode = LossMode::kStcl;
  StclConfig stcl;
  AdamConfig adam;
  SrModelConfig model;
  ExtractorSpec extractor = ExtractorSpec::defaults();
  std::size_t iterations = 2000;
  std::size_t val_every = 100;
  std::size_t batch = 1;  // the protocol trains with batch 1
  std::uint64_t seed = 1;
  std::size_t lr_patch = 48;            // LR mosaic patch edge, pixels
  std::size_t max_feature_sites = 512;  // per-layer cap fed to the CX losses
  std::string resume_from;              // checkpoint path, optional

  void validate() const;
  std::string to_kv() const;
  static TrainConfig from_kv(const std::string& text);
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  double first_window_mean = 0.0;  // mean total loss over the first 100 iters
  double last_window_mean = 0.0;   // and over the last 100
};

// Runs the training loop on the manifest's train split, logging one
// `iter loss_a loss_r loss_t total` line per iteration plus `# val` lines at
// the validation cadence. Deterministic given config + seed.
TrainResult train(const std::filesystem::path& dataset_manifest, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir);

// One parsed training-log line.
struct LossLogLine {
  std::size_t iter = 0;
  double loss_a = 0.0, loss_r = 0.0, loss_t = 0.0, total = 0.0;
};
std::vector<LossLogLine> parse_training_log(const std::filesystem::path& log_path);

// ----- checkpoints -------------------------------------------------------------------

struct Checkpoint {
  ModelParams model;
  TrainConfig config;
  std::array<std::uint64_t, 4> rng_state{};
  std::size_t iterations_done = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ----- evaluation ---------------------------------------------------------------------

struct EvalOptions {
  bool with_feat_dist = true;
  std::size_t max_frames_per_clip = 0;  // 0 = all
};

struct SceneEval {
  std::string scene;
  MetricReport vs_aligned;   // against the true aligned ground truth
  MetricReport vs_captured;  // against the misaligned captured HR
};

struct MethodEval {
  std::string method;
  std::vector<SceneEval> scenes;
  MetricReport overall_aligned;
  MetricReport overall_captured;
};

MethodEval evaluate_checkpoint(const std::filesystem::path& checkpoint,
                               const std::filesystem::path& dataset_manifest,
                               const EvalOptions& opts = {});

// The digital-zoom reference row: x8 bicubic upsample of the half-resolution
// RGB view of the FoV window.
MethodEval evaluate_bicubic(const std::filesystem::path& dataset_manifest,
                            const EvalOptions& opts = {});

std::string format_eval_table(const std::vector<MethodEval>& rows);
std::string eval_to_kv(const MethodEval& row);

}  // namespace zoomsr
