// Command-line surface: synthetic dataset generation, ground-truth export,
// training, evaluation, prediction export, and the gradient-check suite.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "crowdcount/data.hpp"
#include "crowdcount/eval.hpp"
#include "crowdcount/gradcheck_suite.hpp"
#include "crowdcount/groundtruth.hpp"
#include "crowdcount/model.hpp"
#include "crowdcount/train.hpp"

namespace {

using namespace crowdcount;

void run_synth(const SynthConfig& cfg, int scenes, const std::string& out_dir) {
  Dataset ds = make_dataset(cfg, scenes);
  save_dataset(ds, out_dir);
  DatasetStats stats = dataset_stats(ds.scenes);
  std::printf("num=%d range_lo=%d range_hi=%d average=%.10g total=%ld\n", stats.num,
              stats.range_lo, stats.range_hi, stats.average, stats.total);
}

void write_density_exports(const std::filesystem::path& root, const DensityMap& density) {
  Tensor map = Tensor::zeros({1, density.h, density.w});
  std::copy(density.values.begin(), density.values.end(), map.data().begin());
  double max_value = 0.0;
  for (double v : density.values) max_value = std::max(max_value, v);
  Tensor scaled = Tensor::zeros(map.shape());
  if (max_value > 0.0)
    for (std::size_t i = 0; i < map.numel(); ++i)
      scaled.data()[i] = map.data()[i] / max_value;
  write_pnm((root / "density.pgm").string(), scaled, 65535);
  std::ofstream meta(root / "density_max.txt", std::ios::binary);
  char buf[64];
  std::snprintf(buf, sizeof buf, "max=%.17g\n", max_value);
  meta << buf;
  crowdcount::detail::write_raw_csv((root / "density.csv").string(), map);
}

void run_gt(const std::string& image_path, const std::string& points_path,
            const std::string& out_dir, int factor) {
  Scene scene = load_scene(image_path, points_path);
  if (scene.annotation.clip_warnings > 0)
    std::cerr << "gt: clipped " << scene.annotation.clip_warnings
              << " out-of-bounds points\n";
  DensityMap density =
      downsample_density(render_density(scene.annotation, scene.height(), scene.width()), factor);
  ConfidenceMask mask =
      downsample_mask(render_mask(scene.annotation, scene.height(), scene.width()), factor);

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path root(out_dir);
  write_density_exports(root, density);
  Tensor mask_map = Tensor::zeros({1, mask.h, mask.w});
  std::copy(mask.values.begin(), mask.values.end(), mask_map.data().begin());
  write_pnm((root / "mask.pgm").string(), mask_map, 255);
  std::printf("count=%.17g\n", density.sum());
}

void run_train(const std::string& data_dir, const std::string& out_path,
               const std::string& trace_path, const TrainConfig& cfg, const ArchConfig& arch) {
  Dataset ds = load_dataset(data_dir);
  TrainResult result = train(ds.scenes, cfg, arch);
  save_checkpoint(out_path, result.checkpoint);
  if (!trace_path.empty()) write_loss_trace(trace_path, result.trace);
  const double final_loss = result.trace.empty() ? 0.0 : result.trace.back().l_whole;
  std::printf("steps=%zu final_loss=%.10g checkpoint=%s\n", result.trace.size(), final_loss,
              out_path.c_str());
}

void run_eval(const std::string& data_dir, const std::string& checkpoint_path,
              const std::string& report_path) {
  Dataset ds = load_dataset(data_dir);
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  EvalReport report = evaluate(ds.scenes, ckpt.params, ckpt.arch);
  if (!report_path.empty()) write_eval_report(report_path, report);
  std::printf("MAE=%.10g MSE=%.10g\n", report.mae, report.mse);
}

int run_gradcheck(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<GradCheckEntry> results = run_gradient_suite(seed);
  double worst = 0.0;
  for (const GradCheckEntry& r : results) {
    std::printf("op=%s max_rel_error=%.3e\n", r.op.c_str(), r.worst);
    worst = std::max(worst, r.worst);
  }
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("worst=%.3e threshold=%.0e elapsed_s=%.2f\n", worst, kGradCheckThreshold,
              elapsed);
  return worst < kGradCheckThreshold ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"confidence-gated crowd counting: data, training, evaluation"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dot-annotated dataset");
  SynthConfig synth_cfg;
  int synth_scenes = 8;
  std::string synth_out;
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  synth->add_option("--scenes", synth_scenes, "number of scenes")->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_cfg.seed, "dataset seed");
  synth->add_option("--height", synth_cfg.height, "scene height (>= 32)");
  synth->add_option("--width", synth_cfg.width, "scene width (>= 32)");
  synth->add_option("--count-min", synth_cfg.count_min, "minimum heads per scene");
  synth->add_option("--count-max", synth_cfg.count_max, "maximum heads per scene");
  synth->add_option("--radius-min", synth_cfg.head_radius_min, "minimum head radius (px)");
  synth->add_option("--radius-max", synth_cfg.head_radius_max, "maximum head radius (px)");
  synth
      ->add_option("--background", synth_cfg.background,
                   "background style: flat, gradient, or clutter")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, SynthConfig::Background>{
              {"flat", SynthConfig::Background::flat},
              {"gradient", SynthConfig::Background::gradient},
              {"clutter", SynthConfig::Background::clutter}},
          CLI::ignore_case));
  synth->add_option("--distractors", synth_cfg.distractor_density,
                    "unannotated head-like blobs per 512 px");
  synth->set_config("--config", "", "read options from an INI file");
  synth->callback([&]() { run_synth(synth_cfg, synth_scenes, synth_out); });

  // gt
  auto* gt = app.add_subcommand("gt", "render ground-truth density and mask rasters");
  std::string gt_image, gt_points, gt_out;
  int gt_factor = 1;
  std::uint64_t gt_seed = 0;
  gt->add_option("--image", gt_image, "input image (PGM/PPM)")->required();
  gt->add_option("--points", gt_points, "dot annotation file")->required();
  gt->add_option("--out", gt_out, "output directory")->required();
  gt->add_option("--factor", gt_factor, "downsampling factor")->check(CLI::PositiveNumber);
  gt->add_option("--seed", gt_seed, "unused; accepted for interface uniformity");
  gt->set_config("--config", "", "read options from an INI file");
  gt->callback([&]() { run_gt(gt_image, gt_points, gt_out, gt_factor); });

  // train
  auto* tr = app.add_subcommand("train", "train a model on a dataset directory");
  std::string train_data, train_out = "model.ckpt", train_trace;
  TrainConfig train_cfg;
  ArchConfig arch;
  std::string fm_output = "both";
  bool no_confidence = false, no_cross_layer = false;
  tr->add_option("--data", train_data, "dataset directory (manifest.csv)")->required();
  tr->add_option("--out", train_out, "checkpoint output path");
  tr->add_option("--trace", train_trace, "per-step loss CSV output path");
  tr->add_option("--seed", train_cfg.seed, "training seed");
  tr->add_option("--lr", train_cfg.lr, "Adam learning rate");
  tr->add_option("--lambda1", train_cfg.lambda1, "confidence loss weight");
  tr->add_option("--lambda2", train_cfg.lambda2, "classification loss weight");
  tr->add_option("--epochs", train_cfg.epochs, "epochs over the dataset");
  tr->add_option("--steps", train_cfg.max_steps, "stop after this many optimizer steps");
  tr->add_option("--patches", train_cfg.crop_patches, "augmented patches per scene");
  tr->add_option("--flip-p", train_cfg.flip_p, "horizontal flip probability");
  tr->add_option("--noise-p", train_cfg.noise_p, "uniform noise probability");
  tr->add_option("--noise-amplitude", train_cfg.noise_amplitude, "noise amplitude on [0,1]");
  tr->add_option("--checkpoint-interval", train_cfg.checkpoint_interval,
                 "steps between checkpoint snapshots (0 = none)");
  tr->add_option("--checkpoint-dir", train_cfg.checkpoint_dir, "snapshot directory");
  tr->add_option("--in-channels", arch.in_channels, "input image channels (1 or 3)");
  tr->add_option("--base-channels", arch.base_channels, "channels per front-end branch");
  tr->add_option("--dilations", arch.dilation_set, "front-end dilation set");
  tr->add_option("--k-groups", arch.k_groups, "number of count groups");
  tr->add_option("--c1", arch.c1, "fused feature width");
  tr->add_option("--trunk-w1", arch.trunk_w1, "trunk width after the branches");
  tr->add_option("--trunk-w2", arch.trunk_w2, "trunk width at the first tap");
  tr->add_option("--trunk-w3", arch.trunk_w3, "trunk width at the second tap");
  tr->add_flag("--no-confidence", no_confidence, "ablate the confidence module");
  tr->add_flag("--no-cross-layer", no_cross_layer, "ablate the cross-layer connection");
  tr->add_option("--fm-output", fm_output, "module output: fm1, fm2, or both")
      ->check(CLI::IsMember({"fm1", "fm2", "both"}, CLI::ignore_case));
  tr->set_config("--config", "", "read options from an INI file");
  tr->callback([&]() {
    arch.use_confidence = !no_confidence;
    arch.use_cross_layer = !no_cross_layer;
    arch.fm_output = fm_output == "fm1"   ? ArchConfig::FmOutput::fm1_only
                     : fm_output == "fm2" ? ArchConfig::FmOutput::fm2_only
                                          : ArchConfig::FmOutput::both;
    run_train(train_data, train_out, train_trace, train_cfg, arch);
  });

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string eval_data, eval_ckpt, eval_report;
  std::uint64_t eval_seed = 0;
  ev->add_option("--data", eval_data, "dataset directory")->required();
  ev->add_option("--checkpoint", eval_ckpt, "trained checkpoint")->required();
  ev->add_option("--report", eval_report, "per-scene report CSV output path");
  ev->add_option("--seed", eval_seed, "unused; accepted for interface uniformity");
  ev->set_config("--config", "", "read options from an INI file");
  ev->callback([&]() { run_eval(eval_data, eval_ckpt, eval_report); });

  // predict
  auto* pr = app.add_subcommand("predict", "run a checkpoint on one image and export maps");
  std::string pred_image, pred_ckpt, pred_out;
  std::uint64_t pred_seed = 0;
  pr->add_option("--image", pred_image, "input image (PGM/PPM)")->required();
  pr->add_option("--checkpoint", pred_ckpt, "trained checkpoint")->required();
  pr->add_option("--out", pred_out, "output directory")->required();
  pr->add_option("--seed", pred_seed, "unused; accepted for interface uniformity");
  pr->set_config("--config", "", "read options from an INI file");
  pr->callback([&]() {
    PredictResult result = predict(pred_image, pred_ckpt, pred_out);
    std::printf("count=%.17g\n", result.count);
  });

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "verify every adjoint against finite differences");
  std::uint64_t gc_seed = 0;
  gc->add_option("--seed", gc_seed, "suite seed");
  gc->set_config("--config", "", "read options from an INI file");
  int exit_code = 0;
  gc->callback([&]() { exit_code = run_gradcheck(gc_seed); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::flush;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}
