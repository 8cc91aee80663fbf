#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dar/checkpoint.hpp"
#include "dar/train.hpp"
#include "harness/config.hpp"

namespace dar::harness {

/// Identifier of the source tree the binary was built from.
std::string source_hash();

/// Output root: $DAR_OUTPUT_ROOT if set, else the current directory.
std::filesystem::path output_root();
/// Resolves a configured output directory against output_root().
std::filesystem::path resolve_output(const std::string& dir);

DatasetSplits make_dataset(const ExperimentConfig& config);

/// Checkpoint echo entries tying a model to its dataset and seed.
ConfigEcho provenance_echo(const ExperimentConfig& config, std::uint64_t seed);

struct SeedModels {
  TrainedBundle final;
  /// Post-hoc methods: the ERM base the head was retrained on.
  std::optional<TrainedBundle> base;
};

struct TrainOptions {
  bool verbose = false;
  /// Replaces config.checkpoint for post-hoc methods.
  std::string checkpoint;
  /// Overrides the hyperparameters of the tuned stage.
  std::optional<HyperParams> stage_hp;
};

/// Base checkpoint for a post-hoc method as a bundle (GAP model, no history).
TrainedBundle load_base(const ExperimentConfig& config, const std::filesystem::path& path, std::uint64_t seed);

/// ERM base for post-hoc methods: train on train only (target held out).
TrainedBundle train_base(const ExperimentConfig& config, const DatasetSplits& data, std::uint64_t seed, bool verbose);

/// Trains (or loads and retrains) the configured method for one seed.
SeedModels train_seed(const ExperimentConfig& config, const DatasetSplits& data, std::uint64_t seed,
                      const TrainOptions& options);

struct EvalOptions {
  bool cep_all_probes = true;
  bool write_files = true;
};

/// Test-split group accuracies, CEP (prediction, feature, feature map,
/// pixel), CAP and CGP (stacked mode only). Writes per-metric CSVs and
/// heatmaps into `dir` when requested.
SeedMetrics evaluate_seed(const ExperimentConfig& config, const SeedModels& models, const DatasetSplits& data,
                          const std::filesystem::path& dir, const EvalOptions& options = {});

void write_history_csv(const TrainedBundle& bundle, const std::filesystem::path& path);

/// generate -> train/load -> retrain -> evaluate -> export for every seed.
/// Writes report.json into `out_dir` and returns it.
nlohmann::json run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                              const TrainOptions& options = {});

/// Report without the wall-clock section (for reproducibility comparisons).
nlohmann::json without_timing(nlohmann::json report);

/// Grid search over config.grid on the first seed. Cells live in
/// out_dir/cells/<hash of the hp tuple>; finished cells are reused.
nlohmann::json run_sweep(const ExperimentConfig& config, const std::filesystem::path& out_dir, std::size_t jobs,
                         bool verbose = false);

/// Metrics of a saved model on the configured dataset.
nlohmann::json evaluate_checkpoint(const ExperimentConfig& config, const std::filesystem::path& checkpoint,
                                   const std::filesystem::path& out_dir);

/// CEP histograms, ablation table and heatmap grids from finished runs.
nlohmann::json make_figures(const std::vector<std::filesystem::path>& run_dirs, const std::filesystem::path& out_dir,
                            std::size_t bins = 10);

}  // namespace dar::harness
