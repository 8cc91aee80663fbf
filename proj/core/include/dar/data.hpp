#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "dar/rng.hpp"
#include "dar/tensor.hpp"

namespace dar {

/// stacked: spurious panel on top, core panel below, one channel.
/// overlap: a single panel whose core shape is tinted by a spurious colour
/// (three channels, both cues occupy the same pixels).
enum class DataMode { stacked, overlap };

enum class Component { core, spurious };

std::string to_string(DataMode mode);
DataMode parse_data_mode(const std::string& text);
std::string to_string(Component component);

struct DatasetConfig {
  std::size_t classes = 4;
  std::size_t image_height = 32;
  std::size_t image_width = 16;
  std::size_t train = 4000;
  std::size_t target = 400;
  std::size_t val = 400;
  std::size_t test = 1600;
  double spurious_strength = 0.95;
  double noise_core = 0.9;
  double noise_spu = 0.10;
  /// Maximum translation (pixels) of the core glyph inside its panel.
  std::size_t core_jitter = 3;
  DataMode mode = DataMode::stacked;

  std::size_t channels() const { return mode == DataMode::overlap ? 3 : 1; }
  std::size_t image_size() const { return channels() * image_height * image_width; }
  Shape image_shape() const { return {channels(), image_height, image_width}; }

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Maximum number of classes the glyph families can render.
inline constexpr std::size_t kMaxClasses = 8;

struct DominoExample {
  std::vector<float> image;  // channels × H × W, values in [0,1]
  std::int32_t label = 0;
  std::int32_t attribute = 0;
  // Overlap mode keeps the two factors so interventions can recombine them.
  std::vector<float> shape_layer;  // H × W
  std::array<float, 3> tint{};

  bool majority() const { return label == attribute; }
  std::size_t group(std::size_t classes) const {
    return static_cast<std::size_t>(label) * classes + static_cast<std::size_t>(attribute);
  }
};

struct Split {
  std::vector<DominoExample> examples;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
};

struct DatasetSplits {
  DatasetConfig config;
  std::uint64_t seed = 0;
  Split train;
  Split target;
  Split val;
  Split test;
};

/// Deterministic given (config, seed); each split draws from its own substream.
DatasetSplits generate(const DatasetConfig& config, std::uint64_t seed);

/// Concatenation (order: a then b).
Split merge(const Split& a, const Split& b);

/// Clean class template (no noise, no jitter) of a core or spurious glyph on
/// an h×w panel.
std::vector<float> glyph_template(Component family, std::size_t cls, std::size_t height, std::size_t width,
                                  long shift_x = 0, long shift_y = 0);

/// RGB tint of a spurious attribute in overlap mode.
std::array<float, 3> attribute_colour(std::size_t attribute);

/// Rebuilds an overlap-mode image from a shape layer and a tint.
std::vector<float> render_overlap(const std::vector<float>& shape_layer, const std::array<float, 3>& tint,
                                  const DatasetConfig& config);

/// Image of x with `component` replaced by the donor's.
std::vector<float> apply_intervention(const DominoExample& x, const DominoExample& donor, Component component,
                                      const DatasetConfig& config);

struct InterventionSpec {
  Component component = Component::core;
  std::size_t donors = 5;
};

inline constexpr std::size_t kNotInPool = std::numeric_limits<std::size_t>::max();

/// Draws spec.donors distinct donors uniformly from `pool` (skipping
/// position `self_index`) and returns the counterfactual images of x.
std::vector<std::vector<float>> intervene(const DominoExample& x, std::size_t self_index, const Split& pool,
                                          const InterventionSpec& spec, const DatasetConfig& config, Rng& rng);

/// Indices of the chosen donors; the same draw intervene() uses.
std::vector<std::size_t> draw_donors(std::size_t pool_size, std::size_t self_index, std::size_t count, Rng& rng);

/// Row-major C×C matrix, rows = label y, columns = attribute a.
std::vector<std::size_t> group_counts(const Split& split, std::size_t classes);

bool is_group_balanced(const Split& split, std::size_t classes);

struct SubsampleResult {
  Split split;
  std::vector<std::size_t> excluded_groups;  // group ids with zero members
};

/// Downsamples every nonempty group to the smallest nonempty group count.
SubsampleResult subsample_balanced(const Split& split, std::size_t classes, Rng& rng);

/// Per-example weights proportional to 1/group_count, normalised to mean 1.
std::vector<double> reweight_weights(const Split& split, std::size_t classes);

/// Batch tensor [B×C×H×W] of the selected examples.
Tensor batch_images(const Split& split, std::span<const std::size_t> indices, const DatasetConfig& config);
std::vector<std::int32_t> batch_labels(const Split& split, std::span<const std::size_t> indices, bool attributes);

/// Flat binary dump: magic, version, key=value config echo, then per split
/// the float32 images followed by int32 labels and attributes.
void save_dataset(const DatasetSplits& splits, const std::filesystem::path& path);
DatasetSplits load_dataset(const std::filesystem::path& path);

/// key=value lines describing the config (and seed) for file headers.
std::string dataset_echo(const DatasetConfig& config, std::uint64_t seed);

}  // namespace dar
