#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dar/data.hpp"
#include "dar/model.hpp"

namespace dar {

// ---------------------------------------------------------------------------
// Group accuracy

struct GroupAccuracy {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;     // C×C, rows y, columns a
  std::vector<double> per_group;       // NaN for empty groups
  std::vector<std::size_t> empty_groups;
  double minority = 0.0;  // over examples with y != a
  double majority = 0.0;  // over examples with y == a
  double average = 0.0;   // over all examples
};

/// Accuracy of `predictions` against the label (or, with attribute_target,
/// against the spurious attribute). Values are percentages.
GroupAccuracy group_accuracy(std::span<const std::int32_t> predictions, const Split& split, std::size_t classes,
                             bool attribute_target = false);

std::vector<std::int32_t> argmax_rows(const Tensor& logits);

/// Batched no-grad inference.
std::vector<std::int32_t> predict(const Model<float>& model, const Split& split, const DatasetConfig& config);

GroupAccuracy group_accuracy(const Model<float>& model, const Split& split, const DatasetConfig& config,
                             bool attribute_target = false);

// ---------------------------------------------------------------------------
// Core Effect Percentage

enum class ProbeKind { prediction, feature, feature_map, pixel };

std::string to_string(ProbeKind kind);

/// Probe values for a batch, laid out [B × elements × entries]. An element's
/// effect is the L1 distance over its entries.
struct ProbeOutput {
  std::size_t elements = 0;
  std::size_t entries = 0;
  std::vector<double> values;
};

using ProbeFn = std::function<ProbeOutput(const Tensor& images)>;

/// prediction: softmax probabilities (or logits) as one element;
/// feature: each aggregated feature h[j];
/// feature_map: each channel's flattened map;
/// pixel: each (channel, row, column) activation.
ProbeFn make_probe(const Model<float>& model, ProbeKind kind, bool use_logits = false);

struct CepConfig {
  std::size_t donors = 5;
  std::uint64_t seed = 0;
  /// 0 = every example of the split.
  std::size_t max_examples = 0;
  /// Exchange the roles of the two components (CEP -> 100 - CEP).
  bool swap_components = false;
  double epsilon = 1e-9;
};

struct ElementEffect {
  double e_core = 0.0;  // mean over examples
  double e_spu = 0.0;
  double cep = 0.0;     // mean over examples where defined; NaN if never defined
  std::size_t defined = 0;
};

struct CepResult {
  double aggregate = 0.0;
  std::vector<ElementEffect> elements;
  std::size_t excluded = 0;  // (example, element) pairs with E_core+E_spu < epsilon
  std::size_t evaluated = 0;
};

/// For every example: E = mean over donors of the L1 change of each probed
/// element under do(core) and do(spurious); CEP = 100·E_core/(E_core+E_spu).
CepResult cep(const ProbeFn& probe, const Split& split, const DatasetConfig& config, const CepConfig& options);

/// Per-element CEP values (elements that were never defined are skipped).
std::vector<double> element_ceps(const CepResult& result);

void write_cep_csv(const CepResult& result, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Core Activation Percentage

struct CapResult {
  std::vector<double> per_channel;      // percentage per channel, NaN if always excluded
  std::vector<std::size_t> excluded;    // per channel: examples with zero total activation
};

/// Bottom-half share of |A| per channel from activations [N×d×H×W].
CapResult cap_from_activations(const Tensor& activations);

CapResult cap(const Model<float>& model, const Split& split, const DatasetConfig& config);

// ---------------------------------------------------------------------------
// GradCAM and Core GradCAM Percentage

struct Heatmap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // relu(Σ_j w_j A[j]), row-major
  std::vector<double> channel_weights;
  std::int32_t target_class = 0;
  bool all_zero = false;
};

/// GradCAM at the activation map feeding the aggregator. `classes` selects
/// the target logit per example; empty means the predicted class.
template <typename T>
std::vector<Heatmap> gradcam_from_activation(const Model<T>& model, const BasicTensor<T>& activation,
                                             std::span<const std::int32_t> classes = {});

std::vector<Heatmap> gradcam(const Model<float>& model, const Tensor& images, std::span<const std::int32_t> classes = {});

struct CgpResult {
  double value = 0.0;
  std::size_t excluded = 0;  // all-zero heatmaps
};

/// Expected bottom-half share of heatmap mass.
CgpResult cgp(const std::vector<Heatmap>& heatmaps);
CgpResult cgp(const Model<float>& model, const Split& split, const DatasetConfig& config);

/// Nearest-neighbour upsampling to h×w.
std::vector<double> upsample_nearest(const Heatmap& map, std::size_t height, std::size_t width);

/// Plain-text PGM (P2), max value 255, linear in value / max(map).
void write_pgm(const std::vector<double>& values, std::size_t height, std::size_t width,
               const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Histograms

struct Histogram {
  std::vector<double> edges;  // bins + 1
  std::vector<std::size_t> counts;
};

/// Uniform bins on [lo, hi]; right-open except the last bin.
Histogram histogram(std::span<const double> values, std::size_t bins, double lo = 0.0, double hi = 100.0);

void write_histogram_csv(const Histogram& hist, const std::filesystem::path& path);

}  // namespace dar
