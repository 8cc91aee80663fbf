#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dar/data.hpp"
#include "dar/model.hpp"
#include "dar/train.hpp"

namespace dar::harness {

/// Raw `section.key -> value` pairs with the line each came from.
struct KeyValueFile {
  struct Entry {
    std::string value;
    std::size_t line = 0;
  };
  std::string origin;
  std::map<std::string, Entry> entries;
};

/// Flat TOML-style text: `[section]` headers, `key = value` lines, `#`
/// comments, quoted strings and one-level `[a, b, c]` lists.
KeyValueFile parse_key_values(const std::string& text, const std::string& origin);

enum class Method { erm, erm_core, sub, rw, dfr, dfr_fc, dfr_cnn, dar, dar_spu };

std::string to_string(Method method);
Method parse_method(const std::string& text);
bool is_posthoc(Method method);
RetrainVariant retrain_variant(Method method);

struct GridSpec {
  std::vector<double> lr;
  std::vector<double> weight_decay;
  std::vector<std::size_t> batch_size;
  std::vector<double> reg_strength;

  bool empty() const { return lr.empty() && weight_decay.empty() && batch_size.empty() && reg_strength.empty(); }
};

struct ExperimentConfig {
  DatasetConfig data;
  std::uint64_t data_seed = 0;
  BackbonePreset preset = BackbonePreset::small;
  Method method = Method::erm;
  DarConfig dar;
  HyperParams erm = default_erm_hp();
  HyperParams retrain = default_retrain_hp();
  bool warm_start = false;
  /// Tunes the retraining stage for post-hoc methods, ERM otherwise.
  GridSpec grid;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "runs/default";
  /// Base-model checkpoint for post-hoc methods; empty = train one.
  std::string checkpoint;
  std::size_t cep_donors = 5;
  std::size_t cep_examples = 0;  // 0 = whole test split
  bool cep_logits = false;
  std::uint64_t cep_seed = 0;
  std::size_t heatmaps = 16;

  static HyperParams default_erm_hp();
  static HyperParams default_retrain_hp();

  /// The dataset actually generated (ERM_Core: spurious panel independent of the label).
  DatasetConfig effective_data() const;
  /// Throws ConfigError whose field is the full `section.key`.
  void validate() const;
  /// Complete effective config in the input syntax (defaults materialised).
  std::string echo() const;
};

/// Parses and validates; errors are ConfigError with "origin:line: key: ...".
ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace dar::harness
