// zoomsr: dataset generation, preprocessing, training, evaluation and
// verification for the raw-video zoom SR pipeline.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "zoomsr/gradcheck.hpp"
#include "zoomsr/io.hpp"
#include "zoomsr/metrics.hpp"
#include "zoomsr/rawpipe.hpp"
#include "zoomsr/rng.hpp"
#include "zoomsr/stcl.hpp"
#include "zoomsr/synthcam.hpp"
#include "zoomsr/trainer.hpp"

namespace fs = std::filesystem;
using namespace zoomsr;

namespace {

constexpr const char* kVersion = "zoomsr 0.1.0";

void write_repro_record(const fs::path& out_dir, const std::string& command,
                        const std::vector<std::pair<std::string, std::string>>& args) {
  KvFile kv;
  kv.set("command", command);
  kv.set("version", kVersion);
  for (const auto& [k, v] : args) kv.set(k, v);
  fs::create_directories(out_dir);
  kv.save(out_dir / (command + ".manifest"));
}

// ---------------------------------------------------------------- gen-data --

int cmd_gen_data(std::size_t scenes, std::size_t frames, std::size_t zoom,
                 const std::string& shift_px, std::uint64_t seed, const std::string& out,
                 std::size_t lr_size, double noise, std::size_t train_pct, std::size_t val_pct) {
  double lo = 0.0, hi = 0.0;
  if (std::sscanf(shift_px.c_str(), "%lf:%lf", &lo, &hi) != 2) {
    std::cerr << "error: --shift-px expects LO:HI, got '" << shift_px << "'\n";
    return 2;
  }
  RigSpec rig;
  rig.zoom_ratio = double(zoom);
  rig.shift_min = lo;
  rig.shift_max = hi;
  rig.read_noise = noise;
  std::vector<SceneSpec> specs;
  const std::size_t canvas = lr_size * zoom;
  for (std::size_t i = 0; i < scenes; ++i) {
    SceneSpec s = SceneSpec::random_scene(canvas, canvas, frames, mix_seed(seed, i));
    specs.push_back(std::move(s));
  }
  const fs::path manifest =
      generate_dataset(specs, rig, out, seed, {train_pct, val_pct});
  write_repro_record(out, "gen-data",
                     {{"scenes", std::to_string(scenes)},
                      {"frames", std::to_string(frames)},
                      {"zoom", std::to_string(zoom)},
                      {"shift_px", shift_px},
                      {"seed", std::to_string(seed)},
                      {"lr_size", std::to_string(lr_size)},
                      {"noise", format_double(noise)},
                      {"train_pct", std::to_string(train_pct)},
                      {"val_pct", std::to_string(val_pct)}});
  std::cout << "wrote " << manifest.string() << "\n";
  return 0;
}

// --------------------------------------------------------------- preprocess --

int cmd_preprocess(const std::string& manifest, const std::string& out) {
  const DatasetManifest dm = DatasetManifest::load(manifest);
  const fs::path src_root = fs::path(manifest).parent_path();
  const fs::path out_root = out;
  fs::create_directories(out_root);

  DatasetManifest out_dm = dm;
  KvFile report;
  for (std::size_t ci = 0; ci < dm.clips.size(); ++ci) {
    const fs::path clip_manifest = src_root / dm.clips[ci].first;
    const ClipPair clip = load_clip(clip_manifest);
    if (clip.corrs.empty()) {
      throw ConfigError("preprocess: clip '" + clip.name + "' has no correspondence file");
    }
    const HomographyEstimate est = estimate_homography(clip.corrs);

    // residual displacement of the estimate against the recorded homography,
    // sampled on the correspondence points
    double residual = 0.0;
    for (const auto& c : clip.corrs) {
      const Vec2 pe = est.h.apply({c.x, c.y});
      const Vec2 pg = clip.h_ideal_to_captured.apply({c.x, c.y});
      residual += std::hypot(pe.x - pg.x, pe.y - pg.y);
    }
    residual /= double(clip.corrs.size());

    const fs::path clip_out = out_root / clip.name;
    fs::create_directories(clip_out);
    ClipManifest cm = ClipManifest::load(clip_manifest);
    for (std::size_t t = 0; t < clip.frame_count(); ++t) {
      write_pgm16(clip_out / cm.lr_paths[t], clip.lr_frames[t].width, clip.lr_frames[t].height,
                  clip.lr_frames[t].samples);
      const RgbImage aligned =
          warp(clip.hr_frames[t], est.h, clip.hr_frames[t].width, clip.hr_frames[t].height);
      write_ppm8(clip_out / cm.hr_paths[t], aligned);
      if (!clip.gt_frames.empty()) {
        write_ppm8(clip_out / cm.gt_paths[t], clip.gt_frames[t]);
      }
    }
    // the aligned clip now carries an identity mapping
    cm.homography = Homography::identity().m;
    save_correspondences(clip_out / cm.correspondence_file, clip.corrs);
    cm.save(clip_out / "clip.manifest");
    report.set("rms[" + clip.name + "]", est.rms);
    report.set("residual_px[" + clip.name + "]", residual);
  }
  out_dm.save(out_root / "dataset.manifest");
  report.save(out_root / "preprocess.report");
  std::cout << report.serialize();
  return 0;
}

// -------------------------------------------------------------------- train --

int cmd_train(const std::string& manifest, const std::string& loss, std::size_t iters,
              std::uint64_t seed, const std::string& out, double lr, std::size_t patch,
              std::size_t width, std::size_t blocks, std::size_t val_every,
              std::size_t max_sites, double lambda, const std::string& resume,
              const std::string& cx_variant) {
  TrainConfig cfg;
  cfg.mode = parse_loss_mode(loss);
  cfg.iterations = iters;
  cfg.seed = seed;
  cfg.adam.lr = lr;
  cfg.lr_patch = patch;
  cfg.model.width = width;
  cfg.model.blocks = blocks;
  cfg.model.seed = mix_seed(seed, 0x5eed);
  cfg.extractor.seed = mix_seed(seed, 0xfea7);
  cfg.val_every = val_every;
  cfg.max_feature_sites = max_sites;
  cfg.stcl.lambda = lambda;
  cfg.resume_from = resume;
  if (cx_variant == "normalized") {
    cfg.stcl.cx_variant = CxVariant::kNormalizedCx;
  } else if (cx_variant != "min") {
    std::cerr << "error: --cx-variant expects min|normalized\n";
    return 2;
  }
  const TrainResult res = train(manifest, cfg, out);
  std::cout << "checkpoint " << res.checkpoint.string() << "\n";
  std::cout << "log " << res.log.string() << "\n";
  std::cout << "loss_first100 " << format_double(res.first_window_mean) << "\n";
  std::cout << "loss_last100 " << format_double(res.last_window_mean) << "\n";
  return 0;
}

// --------------------------------------------------------------------- eval --

int cmd_eval(const std::string& checkpoint, const std::string& test_manifest,
             const std::string& out, bool no_feat_dist, std::size_t max_frames) {
  EvalOptions opts;
  opts.with_feat_dist = !no_feat_dist;
  opts.max_frames_per_clip = max_frames;
  std::vector<MethodEval> rows;
  rows.push_back(evaluate_bicubic(test_manifest, opts));
  rows.push_back(evaluate_checkpoint(checkpoint, test_manifest, opts));
  const std::string table = format_eval_table(rows);
  std::cout << table;
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream ts(fs::path(out) / "eval.table");
    ts << table;
    std::ofstream ks(fs::path(out) / "eval.kv");
    for (const auto& r : rows) ks << eval_to_kv(r);
    write_repro_record(out, "eval",
                       {{"checkpoint", checkpoint}, {"test", test_manifest}});
  }
  return 0;
}

// ------------------------------------------------------------------ compare --

int cmd_compare(const std::vector<std::string>& checkpoints, const std::string& test_manifest,
                const std::string& out, bool no_feat_dist, std::size_t max_frames) {
  EvalOptions opts;
  opts.with_feat_dist = !no_feat_dist;
  opts.max_frames_per_clip = max_frames;
  std::vector<MethodEval> rows;
  rows.push_back(evaluate_bicubic(test_manifest, opts));
  for (const auto& c : checkpoints) {
    rows.push_back(evaluate_checkpoint(c, test_manifest, opts));
  }
  const std::string table = format_eval_table(rows);
  std::cout << table;
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream ts(fs::path(out) / "compare.table");
    ts << table;
    std::ofstream ks(fs::path(out) / "compare.kv");
    for (const auto& r : rows) ks << eval_to_kv(r);
    write_repro_record(out, "compare", {{"test", test_manifest}});
  }
  return 0;
}

// --------------------------------------------------------------- loss-check --

int cmd_loss_check(std::uint64_t seed) {
  std::size_t failures = 0;
  auto verdict = [&](const std::string& name, bool ok, double got, double want) {
    std::cout << (ok ? "[PASS] " : "[FAIL] ") << name << ": got " << format_double(got)
              << " want " << format_double(want) << "\n";
    if (!ok) ++failures;
  };

  const std::vector<std::array<int, 2>> ca{{0, 0}};
  const std::vector<std::array<int, 2>> cb{{0, 0}, {2, 0}, {4, 0}};
  const Tensor k = spatial_kernel_matrix(ca, cb, 0.0, 2.0);
  verdict("kernel(D'=0)", std::fabs(k.at(0) - 1.0) < 1e-12, k.at(0), 1.0);
  verdict("kernel(D'=2)", std::fabs(k.at(1) - std::exp(-0.5)) < 1e-12, k.at(1), std::exp(-0.5));
  verdict("kernel(D'=4)", std::fabs(k.at(2) - std::exp(-2.0)) < 1e-12, k.at(2), std::exp(-2.0));

  const Tensor d = Tensor::constant({2, 2}, {0.5, 0.2, 0.3, 0.4});
  const Tensor kap = Tensor::constant({2, 2}, {1.0, 0.1, 0.1, 1.0});
  const double la = loss_a_from_matrices(d, kap).value();
  verdict("loss_a hand example", std::fabs(la - 0.025) < 1e-15, la, 0.025);

  // identities over random feature grids
  Rng rng(seed);
  const StclConfig cfg;
  bool identities = true;
  double worst = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    auto grid = [&](std::size_t kk, std::size_t c, GroupId g) {
      std::vector<double> flat(kk * c);
      for (auto& v : flat) v = rng.normal();
      FeatureLayer layer;
      layer.layer_index = 0;
      layer.fm_width = kk;
      layer.fm_height = 1;
      for (std::size_t i = 0; i < kk; ++i) layer.coords.push_back({int(i), 0});
      layer.feats = row_normalize(Tensor::constant({kk, c}, flat));
      FeatureGrid fg;
      fg.group = g;
      fg.src_width = kk;
      fg.src_height = 1;
      fg.layers.push_back(std::move(layer));
      return fg;
    };
    const FeatureGrid l = grid(8, 6, GroupId::kPhi1), lp = grid(9, 6, GroupId::kPhi1);
    const FeatureGrid h0 = grid(10, 7, GroupId::kPhi2), s = grid(11, 7, GroupId::kPhi2);
    std::map<int, FeatureGrid> nb{{-1, grid(9, 7, GroupId::kPhi2)},
                                  {1, grid(8, 7, GroupId::kPhi2)}};
    const LossBreakdown bd = stcl_total(l, lp, h0, s, nb, cfg);
    double lt = 0.0;
    for (const auto& [t, lc] : bd.loss_c) lt += lc.value();
    const double e1 = std::fabs(bd.loss_t.value() - lt);
    const double e2 = std::fabs(
        bd.total.value() - (bd.loss_a.value() + bd.loss_r.value() + cfg.lambda * bd.loss_t.value()));
    worst = std::max({worst, e1, e2});
    identities = identities && e1 <= 1e-12 && e2 <= 1e-12 && bd.total.value() >= 0.0;
  }
  verdict("composition identities (50 random grids)", identities, worst, 0.0);

  // self-match: all grids from one image
  const Extractor ex = build_extractor(ExtractorSpec::defaults(seed));
  RgbImage hr(32, 32), lrimg(16, 16);
  for (auto& v : hr.data) v = 0.5 + 0.2 * rng.normal();
  for (auto& v : lrimg.data) v = 0.5 + 0.2 * rng.normal();
  const FeatureGrid lg = extract(ex, lrimg, GroupId::kPhi1);
  const FeatureGrid sg = extract(ex, hr, GroupId::kPhi2);
  std::map<int, FeatureGrid> nb{{-1, sg}, {1, sg}};
  const LossBreakdown self = stcl_total(lg, lg, sg, sg, nb, cfg);
  verdict("self-match total == 0", self.total.value() == 0.0, self.total.value(), 0.0);

  std::cout << (failures == 0 ? "loss-check: all checks passed\n"
                              : "loss-check: FAILURES detected\n");
  return failures == 0 ? 0 : 1;
}

// --------------------------------------------------------------- grad-check --

int cmd_grad_check(const std::string& module, std::uint64_t seed, const std::string& inject) {
  GradCheckOptions opts;
  opts.seed = seed;
  opts.inject_bad_grad = inject;
  std::vector<GradCheckResult> results;
  if (module == "diffcore") {
    results = run_diffcore_checks(opts);
  } else if (module == "stcl") {
    results = run_stcl_checks(opts);
  } else if (module == "trainer") {
    results = run_trainer_checks(opts);
  } else if (module == "all") {
    results = run_diffcore_checks(opts);
    auto s = run_stcl_checks(opts);
    results.insert(results.end(), s.begin(), s.end());
    auto t = run_trainer_checks(opts);
    results.insert(results.end(), t.begin(), t.end());
  } else {
    std::cerr << "error: --module expects diffcore|stcl|trainer|all\n";
    return 2;
  }
  std::cout << format_gradcheck_report(results);
  return all_passed(results) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"raw-video zoom super-resolution pipeline"};
  app.set_version_flag("--version", kVersion);
  app.set_config("--config", "", "flat key=value config file (flags take precedence)");
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic paired-capture dataset");
  std::size_t gd_scenes = 4, gd_frames = 20, gd_zoom = 4, gd_lr = 320;
  std::uint64_t gd_seed = 1;
  std::string gd_shift = "10:40", gd_out;
  double gd_noise = 0.002;
  std::size_t gd_train = 45, gd_val = 10;
  gen->add_option("--scenes", gd_scenes, "number of clips");
  gen->add_option("--frames", gd_frames, "frames per clip");
  gen->add_option("--zoom", gd_zoom, "zoom ratio");
  gen->add_option("--shift-px", gd_shift, "misalignment magnitude range LO:HI in HR px");
  gen->add_option("--seed", gd_seed, "master seed");
  gen->add_option("--out", gd_out, "output directory")->required();
  gen->add_option("--lr-size", gd_lr, "LR mosaic edge in px");
  gen->add_option("--noise", gd_noise, "read-noise sigma in normalized units");
  gen->add_option("--train-pct", gd_train, "train split percentage");
  gen->add_option("--val-pct", gd_val, "val split percentage");

  // preprocess
  auto* pre = app.add_subcommand("preprocess",
                                 "estimate homographies and warp HR frames onto the LR grid");
  std::string pp_manifest, pp_out;
  pre->add_option("--manifest", pp_manifest, "dataset manifest")->required();
  pre->add_option("--out", pp_out, "output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "train the SR model");
  std::string tr_manifest, tr_loss = "stcl", tr_out, tr_resume, tr_cx = "min";
  std::size_t tr_iters = 2000, tr_patch = 48, tr_width = 32, tr_blocks = 3, tr_val = 100,
              tr_sites = 512;
  std::uint64_t tr_seed = 1;
  double tr_lr = 1e-4, tr_lambda = 1.0;
  tr->add_option("--manifest", tr_manifest, "dataset manifest")->required();
  tr->add_option("--loss", tr_loss, "loss mode: l2|cx|spatial|stcl");
  tr->add_option("--iters", tr_iters, "training iterations");
  tr->add_option("--seed", tr_seed, "seed");
  tr->add_option("--out", tr_out, "run directory")->required();
  tr->add_option("--lr", tr_lr, "Adam learning rate");
  tr->add_option("--patch", tr_patch, "LR patch edge in px");
  tr->add_option("--width", tr_width, "model width");
  tr->add_option("--blocks", tr_blocks, "residual blocks");
  tr->add_option("--val-every", tr_val, "validation cadence");
  tr->add_option("--max-sites", tr_sites, "per-layer feature site cap for CX losses");
  tr->add_option("--lambda", tr_lambda, "temporal weight");
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");
  tr->add_option("--cx-variant", tr_cx, "cx form: min|normalized");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  std::string ev_ckpt, ev_test, ev_out;
  bool ev_nofd = false;
  std::size_t ev_max_frames = 0;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--test", ev_test, "dataset manifest")->required();
  ev->add_option("--out", ev_out, "output directory for table/kv");
  ev->add_flag("--no-feat-dist", ev_nofd, "skip the feature-distance column");
  ev->add_option("--max-frames", ev_max_frames, "cap frames per clip (0 = all)");

  // compare
  auto* cmp = app.add_subcommand("compare", "compare checkpoints against the bicubic baseline");
  std::vector<std::string> cmp_ckpts;
  std::string cmp_test, cmp_out;
  bool cmp_nofd = false;
  std::size_t cmp_max_frames = 0;
  cmp->add_option("--checkpoints", cmp_ckpts, "comma-separated checkpoint files")
      ->required()
      ->delimiter(',');
  cmp->add_option("--test", cmp_test, "dataset manifest")->required();
  cmp->add_option("--out", cmp_out, "output directory for table/kv");
  cmp->add_flag("--no-feat-dist", cmp_nofd, "skip the feature-distance column");
  cmp->add_option("--max-frames", cmp_max_frames, "cap frames per clip (0 = all)");

  // loss-check
  auto* lc = app.add_subcommand("loss-check", "run loss-unit diagnostics");
  std::uint64_t lc_seed = 20240811;
  lc->add_option("--seed", lc_seed, "seed");

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient verification");
  std::string gc_module = "all", gc_inject;
  std::uint64_t gc_seed = 20240811;
  gc->add_option("--module", gc_module, "diffcore|stcl|trainer|all");
  gc->add_option("--seed", gc_seed, "seed");
  gc->add_option("--inject-bad-grad", gc_inject, "test hook: corrupt this op's gradient")
      ->group("");  // hidden

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) {
      return cmd_gen_data(gd_scenes, gd_frames, gd_zoom, gd_shift, gd_seed, gd_out, gd_lr,
                          gd_noise, gd_train, gd_val);
    }
    if (pre->parsed()) return cmd_preprocess(pp_manifest, pp_out);
    if (tr->parsed()) {
      return cmd_train(tr_manifest, tr_loss, tr_iters, tr_seed, tr_out, tr_lr, tr_patch,
                       tr_width, tr_blocks, tr_val, tr_sites, tr_lambda, tr_resume, tr_cx);
    }
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_test, ev_out, ev_nofd, ev_max_frames);
    if (cmp->parsed()) {
      return cmd_compare(cmp_ckpts, cmp_test, cmp_out, cmp_nofd, cmp_max_frames);
    }
    if (lc->parsed()) return cmd_loss_check(lc_seed);
    if (gc->parsed()) return cmd_grad_check(gc_module, gc_seed, gc_inject);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
