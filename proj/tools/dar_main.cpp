// dar: command-line driver for dataset generation, training, retraining,
// sweeps, metric evaluation and figure-data export.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "dar/error.hpp"
#include "harness/config.hpp"
#include "harness/files.hpp"
#include "harness/pipeline.hpp"

namespace fs = std::filesystem;
using namespace dar;
using namespace dar::harness;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kInvalidConfig = 2, kNonFinite = 3, kMissingFile = 4 };

fs::path output_dir(const ExperimentConfig& cfg, const std::string& override_dir) {
  return resolve_output(override_dir.empty() ? cfg.output_dir : override_dir);
}

int guarded(const std::function<void()>& body) {
  try {
    body();
    return kOk;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "invalid config: %s\n", e.what());
    return kInvalidConfig;
  } catch (const NonFiniteError& e) {
    std::fprintf(stderr, "training diverged: %s\n", e.what());
    return kNonFinite;
  } catch (const MissingFileError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kMissingFile;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spurious-correlation experiments: synthetic dominoes, ERM, post-hoc retraining, diagnostics"};
  app.require_subcommand(1);

  std::string config_path, out_override, checkpoint, dataset_out;
  std::size_t jobs = 1;
  bool verbose = false;
  std::vector<std::string> run_dirs;
  std::size_t bins = 10;

  auto* gen = app.add_subcommand("gen-data", "Generate the dataset of a config and dump it to a binary file");
  gen->add_option("-c,--config", config_path, "Experiment config")->required();
  gen->add_option("-o,--out", dataset_out, "Output file")->required();

  auto* run = app.add_subcommand("run", "Train, retrain, evaluate and export every configured seed");
  run->add_option("-c,--config", config_path, "Experiment config")->required();
  run->add_option("-o,--output", out_override, "Run directory (default: run.output_dir)");
  run->add_flag("-v,--verbose", verbose, "Per-epoch progress on stderr");

  auto* retrain = app.add_subcommand("retrain", "Post-hoc retraining of a saved base model");
  retrain->add_option("-c,--config", config_path, "Experiment config (post-hoc method)")->required();
  retrain->add_option("--from-checkpoint", checkpoint, "Base model checkpoint")->required();
  retrain->add_option("-o,--output", out_override, "Run directory");
  retrain->add_flag("-v,--verbose", verbose, "Per-epoch progress on stderr");

  auto* sweep = app.add_subcommand("sweep", "Grid search over [grid] on the first seed (resumable)");
  sweep->add_option("-c,--config", config_path, "Experiment config with a [grid] section")->required();
  sweep->add_option("-o,--output", out_override, "Sweep directory");
  sweep->add_option("-j,--jobs", jobs, "Cells trained concurrently")->check(CLI::PositiveNumber);
  sweep->add_flag("-v,--verbose", verbose, "Per-epoch progress on stderr");

  auto* metrics = app.add_subcommand("metrics", "Evaluate a saved model on the config's dataset");
  metrics->add_option("-c,--config", config_path, "Experiment config")->required();
  metrics->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  metrics->add_option("-o,--output", out_override, "Output directory");

  auto* figures = app.add_subcommand("figures", "CEP histograms, ablation table and heatmap grids from run dirs");
  figures->add_option("runs", run_dirs, "Run directories")->required();
  figures->add_option("-o,--output", out_override, "Figure-data directory")->required();
  figures->add_option("--bins", bins, "Histogram bins")->check(CLI::Range(2, 1000));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalidConfig;
  }

  return guarded([&] {
    if (*gen) {
      const auto cfg = load_config(config_path);
      save_dataset(make_dataset(cfg), dataset_out);
      std::printf("wrote %s\n", dataset_out.c_str());
    } else if (*run) {
      const auto cfg = load_config(config_path);
      const auto dir = output_dir(cfg, out_override);
      TrainOptions opt;
      opt.verbose = verbose;
      const auto report = run_experiment(cfg, dir, opt);
      std::printf("wrote %s\n", (dir / "report.json").c_str());
    } else if (*retrain) {
      const auto cfg = load_config(config_path);
      if (!is_posthoc(cfg.method))
        throw ConfigError("model.method", config_path, "retrain needs a post-hoc method, got " + to_string(cfg.method));
      require_file(checkpoint);
      const auto dir = output_dir(cfg, out_override);
      TrainOptions opt;
      opt.verbose = verbose;
      opt.checkpoint = checkpoint;
      run_experiment(cfg, dir, opt);
      std::printf("wrote %s\n", (dir / "report.json").c_str());
    } else if (*sweep) {
      const auto cfg = load_config(config_path);
      const auto dir = output_dir(cfg, out_override);
      const auto result = run_sweep(cfg, dir, jobs, verbose);
      std::printf("best cell %zu (%s); table %s\n", result.at("best_index").get<std::size_t>(),
                  result.at("best").at("hash").get<std::string>().c_str(), (dir / "grid.csv").c_str());
    } else if (*metrics) {
      const auto cfg = load_config(config_path);
      const auto dir = output_dir(cfg, out_override);
      evaluate_checkpoint(cfg, checkpoint, dir);
      std::printf("wrote %s\n", (dir / "metrics.json").c_str());
    } else if (*figures) {
      std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
      const auto out = resolve_output(out_override);
      const auto manifest = make_figures(dirs, out, bins);
      std::printf("wrote %zu files under %s\n", manifest.at("files").size(), out.c_str());
    }
  });
}
