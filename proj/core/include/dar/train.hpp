#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dar/data.hpp"
#include "dar/metrics.hpp"
#include "dar/model.hpp"
#include "dar/optim.hpp"

namespace dar {

enum class RegType { l1, l2 };
enum class Sampler { plain, subsample, reweight };
enum class RetrainVariant { dfr, dfr_fc, dfr_cnn, dar, dar_spu };

std::string to_string(RegType reg);
std::string to_string(Sampler sampler);
std::string to_string(RetrainVariant variant);
RegType parse_reg_type(const std::string& text);
Sampler parse_sampler(const std::string& text);
RetrainVariant parse_retrain_variant(const std::string& text);

struct HyperParams {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t batch_size = 64;
  std::size_t epochs = 40;
  RegType reg_type = RegType::l1;
  /// Penalty on the classifier weight matrices (retraining only).
  double reg_strength = 0.0;
  /// Spectral decoupling: sd_lambda/2 · mean over the batch of ||logits||².
  double sd_lambda = 0.0;

  void validate() const;
  /// Compact, stable text form ("lr=0.001,wd=0.0001,...").
  std::string key() const;
};

/// Lexicographic order on (lr, weight_decay, batch_size, reg_strength,
/// epochs, sd_lambda, reg_type); used to break grid-search ties.
bool hp_less(const HyperParams& a, const HyperParams& b);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  GroupAccuracy val;
  double score = 0.0;  // the early-stopping criterion
};

struct TrainedBundle {
  Model<float> model;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  std::uint64_t seed = 0;
  HyperParams hp;
  std::string method;
  /// DAR_Spu heads predict the spurious attribute instead of the label.
  bool predicts_attribute = false;
};

struct ErmOptions {
  BackbonePreset preset = BackbonePreset::small;
  Sampler sampler = Sampler::plain;
  /// Train on train ∪ target (the standard ERM baseline).
  bool merge_target = false;
  std::string method = "ERM";
  /// Log one line per epoch to stderr.
  bool verbose = false;
};

/// End-to-end training of backbone + GAP + linear classifier with Adam.
/// The returned model holds the parameters of the epoch with the best
/// minority-group validation accuracy (first one on ties).
TrainedBundle train_erm(const DatasetSplits& data, const HyperParams& hp, const ErmOptions& options,
                        std::uint64_t seed);

struct RetrainOptions {
  DarConfig dar;
  /// DFR only: start from the base classifier instead of a fresh one.
  bool warm_start = false;
  bool verbose = false;
};

/// Names of the parameters a variant updates.
std::vector<std::string> trainable_parameter_names(RetrainVariant variant, const Model<float>& model);

/// Post-hoc retraining on the (group-balanced) target split. The base model
/// is not modified; frozen parts of the returned model are bitwise copies.
TrainedBundle retrain_posthoc(const TrainedBundle& base, RetrainVariant variant, const DatasetSplits& data,
                              const HyperParams& hp, std::uint64_t seed, const RetrainOptions& options = {});

// ---------------------------------------------------------------------------
// Model selection and multi-seed aggregation

struct GridCell {
  HyperParams hp;
  double minority_val = 0.0;  // -inf when training diverged
  double average_val = 0.0;
  bool diverged = false;
  std::string error;
};

struct GridResult {
  std::size_t best_index = 0;
  HyperParams best;
  std::vector<GridCell> cells;
};

/// Index of the winning cell under the grid-search ordering.
std::size_t select_best(const std::vector<GridCell>& cells);

using GridRunFn = std::function<TrainedBundle(const HyperParams&)>;

/// Trains every configuration, scores it by best-epoch minority validation
/// accuracy and returns the argmax. Ties: higher average validation
/// accuracy, then the smaller hyperparameter tuple.
GridResult grid_search(const GridRunFn& run, const std::vector<HyperParams>& grid);

/// Cartesian product over the listed values (others taken from `base`).
std::vector<HyperParams> expand_grid(const HyperParams& base, const std::vector<double>& lrs,
                                     const std::vector<double>& weight_decays,
                                     const std::vector<std::size_t>& batch_sizes,
                                     const std::vector<double>& reg_strengths);

struct SeedStat {
  std::vector<double> values;
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

using SeedMetrics = std::map<std::string, double>;

/// Mean ± std of every metric across seeds. Requires at least two seeds.
std::map<std::string, SeedStat> aggregate_seeds(const std::vector<SeedMetrics>& per_seed);

std::map<std::string, SeedStat> run_seeds(const std::function<SeedMetrics(std::uint64_t)>& run,
                                          const std::vector<std::uint64_t>& seeds);

}  // namespace dar
