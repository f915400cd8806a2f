#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "zoomsr/gradcheck.hpp"
#include "zoomsr/rng.hpp"
#include "zoomsr/synthcam.hpp"
#include "zoomsr/trainer.hpp"

using namespace zoomsr;
namespace fs = std::filesystem;

namespace {

fs::path make_dataset(const fs::path& dir, std::size_t scenes, std::size_t frames,
                      std::size_t lr_size, double shift_lo, double shift_hi,
                      std::uint64_t seed) {
  std::vector<SceneSpec> specs;
  for (std::size_t i = 0; i < scenes; ++i) {
    specs.push_back(
        SceneSpec::random_scene(lr_size * 4, lr_size * 4, frames, mix_seed(seed, i)));
  }
  RigSpec rig;
  rig.shift_min = shift_lo;
  rig.shift_max = shift_hi;
  rig.read_noise = 0.002;
  return generate_dataset(specs, rig, dir, seed);
}

std::vector<unsigned char> slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(is), {});
}

TrainConfig small_config(LossMode mode, std::size_t iters, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.mode = mode;
  cfg.iterations = iters;
  cfg.seed = seed;
  cfg.adam.lr = 1e-3;
  cfg.lr_patch = 16;
  cfg.model.width = 8;
  cfg.model.blocks = 1;
  cfg.model.seed = 3;
  cfg.extractor.seed = 5;
  cfg.val_every = 50;
  cfg.max_feature_sites = 64;
  return cfg;
}

}  // namespace

TEST_CASE("forward maps a 160px mosaic to a 640px RGB image") {
  SrModelConfig cfg;
  cfg.width = 4;
  cfg.blocks = 1;
  cfg.seed = 1;
  const ModelParams model = init_sr_model(cfg);
  Tape tape;
  Rng rng(2);
  std::vector<double> packed(4 * 80 * 80);
  for (auto& v : packed) v = rng.uniform();
  Tensor out = sr_forward(model, tape, Tensor::constant({1, 4, 80, 80}, packed));
  CHECK(out.shape() == Shape{1, 3, 640, 640});
}

TEST_CASE("zero tail weights produce a constant image equal to the tail bias") {
  SrModelConfig cfg;
  cfg.width = 6;
  cfg.blocks = 2;
  cfg.seed = 4;
  ModelParams model = init_sr_model(cfg);
  auto& tw = model.find("tail.w");
  std::fill(tw.value.begin(), tw.value.end(), 0.0);
  auto& tb = model.find("tail.b");
  tb.value = {0.25, -0.5, 0.75};
  Tape tape;
  Rng rng(5);
  std::vector<double> packed(4 * 8 * 8);
  for (auto& v : packed) v = rng.uniform();
  Tensor out = sr_forward(model, tape, Tensor::constant({1, 4, 8, 8}, packed));
  REQUIRE(out.shape() == Shape{1, 3, 64, 64});
  const std::size_t hw = 64 * 64;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i) CHECK(out.at(c * hw + i) == tb.value[c]);
}

TEST_CASE("parameter count matches the closed form") {
  for (const auto& [w, b] : std::vector<std::pair<std::size_t, std::size_t>>{
           {4, 1}, {8, 2}, {32, 3}, {64, 3}}) {
    SrModelConfig cfg;
    cfg.width = w;
    cfg.blocks = b;
    const ModelParams model = init_sr_model(cfg);
    CHECK(model.total_values() == sr_param_count(cfg));
  }
  // doubling the width quadruples the conv terms per the formula
  SrModelConfig a, d;
  a.width = 16;
  d.width = 32;
  CHECK(sr_param_count(d) > 3 * sr_param_count(a));
}

TEST_CASE("adam: zero gradient leaves parameters, step increments") {
  ModelParams model;
  model.params.push_back({"w", {2}, {1.0, -2.0}, {0.0, 0.0}, {0.0, 0.0}});
  adam_step(model, {{0.0, 0.0}}, {});
  CHECK(model.step == 1);
  CHECK(model.params[0].value[0] == 1.0);
  CHECK(model.params[0].value[1] == -2.0);
}

TEST_CASE("adam: unit gradient at step 1 moves by about -lr") {
  ModelParams model;
  model.params.push_back({"w", {1}, {0.5}, {0.0}, {0.0}});
  AdamConfig cfg;  // lr 1e-4
  adam_step(model, {{1.0}}, cfg);
  // bias-corrected mhat = vhat = 1 -> update = lr / (1 + eps)
  CHECK(model.params[0].value[0] ==
        doctest::Approx(0.5 - 1e-4 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam matches an independent scalar trace for 10 steps") {
  ModelParams model;
  model.params.push_back({"w", {1}, {0.3}, {0.0}, {0.0}});
  AdamConfig cfg;
  cfg.lr = 0.01;

  double theta = 0.3, m = 0.0, v = 0.0;
  for (int t = 1; t <= 10; ++t) {
    const double g = std::sin(double(t)) + 0.3;
    adam_step(model, {{g}}, cfg);
    // reference update written from the standard formulas
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(cfg.beta1, t));
    const double vhat = v / (1.0 - std::pow(cfg.beta2, t));
    theta -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    CHECK(model.params[0].value[0] == doctest::Approx(theta).epsilon(1e-12));
  }
  CHECK(model.step == 10);
}

TEST_CASE("adam aborts on non-finite gradients with the parameter name") {
  ModelParams model;
  model.params.push_back({"block0.conv1.w", {1}, {0.0}, {0.0}, {0.0}});
  try {
    adam_step(model, {{std::nan("")}}, {});
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("block0.conv1.w") != std::string::npos);
  }
}

TEST_CASE("end-to-end parameter gradients pass finite differences") {
  const auto results = run_trainer_checks({.seed = 20240811, .inject_bad_grad = ""});
  REQUIRE(results.size() == 1);
  INFO("max_rel_err=", results[0].max_rel_err, " checked=", results[0].checked);
  CHECK(results[0].pass);
  CHECK(results[0].checked >= 5);
}

TEST_CASE("training is deterministic and losses descend") {
  const auto base = fs::temp_directory_path() / "zoomsr_tr_test";
  fs::remove_all(base);
  const auto manifest = make_dataset(base / "data", 3, 4, 96, 4.0, 8.0, 11);

  TrainConfig cfg = small_config(LossMode::kL2, 140, 7);
  const TrainResult r1 = train(manifest, cfg, base / "run1");
  const TrainResult r2 = train(manifest, cfg, base / "run2");
  CHECK(slurp(r1.checkpoint) == slurp(r2.checkpoint));
  CHECK(slurp(r1.log) == slurp(r2.log));
  CHECK(r1.last_window_mean < r1.first_window_mean);  // descent

  const auto lines = parse_training_log(r1.log);
  REQUIRE(lines.size() == 140);
  CHECK(lines.front().iter == 0);
  CHECK(lines.back().iter == 139);
  for (const auto& l : lines) {
    CHECK(l.total >= 0.0);
    CHECK(l.loss_a == 0.0);  // L2 mode logs zero feature components
  }
  fs::remove_all(base);
}

TEST_CASE("stcl mode trains with neighbors and logs the breakdown") {
  const auto base = fs::temp_directory_path() / "zoomsr_tr_stcl";
  fs::remove_all(base);
  const auto manifest = make_dataset(base / "data", 3, 3, 160, 4.0, 8.0, 13);
  TrainConfig cfg = small_config(LossMode::kStcl, 6, 9);
  cfg.lr_patch = 32;
  const TrainResult res = train(manifest, cfg, base / "run");
  const auto lines = parse_training_log(res.log);
  REQUIRE(lines.size() == 6);
  for (const auto& l : lines) {
    CHECK(l.total ==
          doctest::Approx(l.loss_a + l.loss_r + cfg.stcl.lambda * l.loss_t).epsilon(1e-12));
    CHECK(l.loss_a > 0.0);
    CHECK(l.loss_r > 0.0);
    CHECK(l.loss_t > 0.0);
  }
  fs::remove_all(base);
}

TEST_CASE("stcl mode refuses clips without neighbor frames") {
  const auto base = fs::temp_directory_path() / "zoomsr_tr_short";
  fs::remove_all(base);
  const auto manifest = make_dataset(base / "data", 3, 1, 160, 4.0, 8.0, 17);
  TrainConfig cfg = small_config(LossMode::kStcl, 4, 3);
  cfg.lr_patch = 32;
  CHECK_THROWS_AS(train(manifest, cfg, base / "run"), ConfigError);
  // the weak-spatial arm only consumes the paired frame, so it still trains
  TrainConfig l2 = small_config(LossMode::kL2, 4, 3);
  CHECK_NOTHROW(train(manifest, l2, base / "run_l2"));
  fs::remove_all(base);
}

TEST_CASE("checkpoints round trip and resume reproduces a straight run") {
  const auto base = fs::temp_directory_path() / "zoomsr_tr_ckpt";
  fs::remove_all(base);
  const auto manifest = make_dataset(base / "data", 3, 3, 160, 4.0, 8.0, 19);

  TrainConfig full = small_config(LossMode::kSpatial, 10, 21);
  full.lr_patch = 32;
  const TrainResult straight = train(manifest, full, base / "straight");

  TrainConfig half = full;
  half.iterations = 5;
  const TrainResult first = train(manifest, half, base / "half");
  TrainConfig second = full;
  second.resume_from = first.checkpoint.string();
  const TrainResult resumed = train(manifest, second, base / "resumed");

  const Checkpoint a = load_checkpoint(straight.checkpoint);
  const Checkpoint b = load_checkpoint(resumed.checkpoint);
  REQUIRE(a.model.params.size() == b.model.params.size());
  for (std::size_t i = 0; i < a.model.params.size(); ++i) {
    CHECK(a.model.params[i].name == b.model.params[i].name);
    CHECK(a.model.params[i].value == b.model.params[i].value);
    CHECK(a.model.params[i].m == b.model.params[i].m);
  }
  CHECK(a.model.step == b.model.step);
  CHECK(a.iterations_done == b.iterations_done);

  // config survives the container
  CHECK(b.config.mode == LossMode::kSpatial);
  CHECK(b.config.model.width == 8);
  fs::remove_all(base);
}

TEST_CASE("evaluation reports bicubic and checkpoint rows over the test split") {
  const auto base = fs::temp_directory_path() / "zoomsr_tr_eval";
  fs::remove_all(base);
  const auto manifest = make_dataset(base / "data", 3, 3, 96, 4.0, 8.0, 23);
  TrainConfig cfg = small_config(LossMode::kL2, 8, 25);
  const TrainResult res = train(manifest, cfg, base / "run");

  EvalOptions opts;
  opts.with_feat_dist = true;
  opts.max_frames_per_clip = 2;
  const MethodEval bicubic = evaluate_bicubic(manifest, opts);
  const MethodEval trained = evaluate_checkpoint(res.checkpoint, manifest, opts);
  CHECK(bicubic.method == "bicubic");
  CHECK(trained.method == "l2");
  REQUIRE(bicubic.scenes.size() == 1);  // 3 clips split 2/0/1
  CHECK(bicubic.overall_aligned.per_frame.size() == 2);
  CHECK(bicubic.overall_aligned.mean_psnr() > 5.0);
  CHECK(bicubic.overall_aligned.mean_psnr() < 99.0);
  CHECK(bicubic.overall_aligned.mean_feat_dist().has_value());
  CHECK(bicubic.overall_captured.per_frame.size() == 2);

  const std::string table = format_eval_table({bicubic, trained});
  CHECK(table.find("bicubic") != std::string::npos);
  CHECK(table.find("l2") != std::string::npos);
  CHECK(table.find("overall") != std::string::npos);
  const std::string kv = eval_to_kv(trained);
  CHECK(kv.find("psnr_aligned = ") != std::string::npos);
  fs::remove_all(base);
}

TEST_CASE("feature modes reject patches below the phi1 minimum") {
  const auto base = fs::temp_directory_path() / "zoomsr_tr_small_patch";
  fs::remove_all(base);
  const auto manifest = make_dataset(base / "data", 3, 3, 96, 4.0, 8.0, 29);
  TrainConfig cfg = small_config(LossMode::kSpatial, 2, 1);  // patch 16
  CHECK_THROWS_AS(train(manifest, cfg, base / "run"), ConfigError);
  fs::remove_all(base);
}

TEST_CASE("train config kv round trip") {
  TrainConfig cfg = small_config(LossMode::kCx, 77, 31);
  cfg.stcl.lambda = 0.25;
  cfg.stcl.w[-1] = 0.05;
  const TrainConfig back = TrainConfig::from_kv(cfg.to_kv());
  CHECK(back.mode == LossMode::kCx);
  CHECK(back.iterations == 77);
  CHECK(back.seed == 31);
  CHECK(back.adam.lr == cfg.adam.lr);
  CHECK(back.model.width == cfg.model.width);
  CHECK(back.extractor.phi2_layers.size() == 3);
  CHECK(back.extractor.phi2_layers[1].channels == 32);
  CHECK(back.stcl.lambda == 0.25);
  CHECK(back.stcl.w.at(-1) == 0.05);
  CHECK(back.max_feature_sites == cfg.max_feature_sites);
}
