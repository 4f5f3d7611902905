#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "echoseg/commands.hpp"

namespace {

using namespace echoseg;

void print_epoch(const EpochRecord& e) {
  std::printf("epoch %3zu  train %.4f  val %.4f  dice %.4f  lr %.2e", e.epoch, e.train_loss, e.val_loss, e.val_dice,
              e.lr);
  if (e.train_dice) std::printf("  train dice %.4f", *e.train_dice);
  std::printf("\n");
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"echoseg: lightweight U-Net segmentation of apical echocardiography frames"};
  app.require_subcommand(1);

  std::string config, out, checkpoint, dataset, image, plan, report_a, report_b, metric = "dice", model_a, model_b;
  std::optional<std::uint64_t> seed;
  bool use_postprocess = false, thick = false, quiet = false;
  BenchOptions bench;
  std::size_t phantom_count = 100, phantom_size = 256;

  auto* train = app.add_subcommand("train", "train a model from a run config");
  train->add_option("--config", config, "run config file, or a preset name")->required();
  train->add_option("--seed", seed, "override train.seed");
  train->add_option("--out", out, "override output directory");
  train->add_flag("--quiet", quiet, "suppress per-epoch lines");

  auto* eval = app.add_subcommand("eval", "score a checkpoint and write a metrics report");
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval->add_option("--data", dataset, "dataset directory (default: test split of the checkpoint's data)");
  eval->add_flag("--postprocess", use_postprocess, "keep the largest component per class");
  eval->add_option("--out", out, "report path")->required();

  auto* infer = app.add_subcommand("infer", "segment one PGM frame");
  infer->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  infer->add_option("--image", image, "input PGM")->required();
  infer->add_option("--out", out, "output prefix")->required();
  bool raw = false;
  infer->add_flag("--raw", raw, "skip postprocessing");

  auto* benchc = app.add_subcommand("bench", "latency of two models at batch size 1");
  benchc->add_option("a", model_a, "checkpoint or preset")->required();
  benchc->add_option("b", model_b, "checkpoint or preset")->required();
  benchc->add_option("--frames", bench.frames, "timed frames (>= 100)");
  benchc->add_option("--warmup", bench.warmup, "untimed frames (>= 10)");
  benchc->add_option("--threads", bench.threads, "operator threads");
  benchc->add_option("--seed", seed, "init seed for preset models");
  benchc->add_option("--out", out, "also write the report here");

  auto* compare = app.add_subcommand("compare", "Wilcoxon signed-rank test between two reports");
  compare->add_option("a", report_a, "first report")->required();
  compare->add_option("b", report_b, "second report")->required();
  compare->add_option("--metric", metric, "dice or hausdorff")->check(CLI::IsMember({"dice", "hausdorff"}));

  auto* ablate = app.add_subcommand("ablate", "run an ablation plan");
  ablate->add_option("--config", plan, "plan file")->required();
  ablate->add_option("--seed", seed, "shared seed for every row");
  ablate->add_option("--out", out, "output directory")->required();

  auto* phantoms = app.add_subcommand("phantoms", "write a synthetic dataset");
  phantoms->add_option("--count", phantom_count, "number of frames");
  phantoms->add_option("--size", phantom_size, "image side");
  phantoms->add_option("--seed", seed, "generator seed");
  phantoms->add_flag("--thick", thick, "thick-myocardium domain");
  phantoms->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help exits 0; every other parse failure is a usage error.
    return app.exit(e) == 0 ? 0 : static_cast<int>(ErrorCategory::usage);
  }

  try {
    if (*train) {
      RunConfig cfg = std::filesystem::exists(config) ? load_run_config(config) : run_presets::by_name(config);
      if (seed) cfg.train.seed = *seed;
      if (!out.empty()) cfg.output_dir = out;
      const TrainResult r = cmd_train(cfg, quiet ? EpochCallback{} : EpochCallback{print_epoch});
      std::cout << detail::read_file(r.summary.string());
      std::cout << "checkpoint " << r.checkpoint.string() << "\n";
    } else if (*eval) {
      const MetricsReport r = cmd_eval(checkpoint, dataset, use_postprocess);
      write_report(out, r);
      const MetricsSummary s = r.summary();
      std::printf("samples %zu  dice %.4f %.4f %.4f  hausdorff %.3f %.3f %.3f  outliers %zu\n", s.samples,
                  s.mean_dice[0], s.mean_dice[1], s.mean_dice[2], s.mean_hausdorff[0], s.mean_hausdorff[1],
                  s.mean_hausdorff[2], s.outliers);
    } else if (*infer) {
      const InferResult r = cmd_infer(checkpoint, image, out, !raw);
      std::cout << r.label.string() << "\n" << r.overlay.string() << "\n";
    } else if (*benchc) {
      if (seed) bench.seed = *seed;
      const std::string text = format_bench(cmd_bench(model_a, model_b, bench));
      std::cout << text;
      if (!out.empty()) detail::write_file(out, text);
    } else if (*compare) {
      const auto m = metric == "dice" ? CompareMetric::dice : CompareMetric::hausdorff;
      std::cout << format_wilcoxon(cmd_compare(read_report(report_a), read_report(report_b), m));
    } else if (*ablate) {
      const auto results = cmd_ablate(load_plan(plan), out, seed);
      std::cout << format_ablation(results);
    } else if (*phantoms) {
      PhantomOptions o;
      o.size = phantom_size;
      if (thick) o = thick_myocardium(o);
      save_dataset(out, generate_phantoms(phantom_count, seed.value_or(1), o));
      std::cout << "wrote " << phantom_count << " frames to " << out << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorCategory::internal);
  }
  return 0;
}
