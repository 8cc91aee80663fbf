#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "dar/model.hpp"

namespace dar {

using ConfigEcho = std::map<std::string, std::string>;

/// Architecture description of a model as key=value pairs (model.*, dar.*).
ConfigEcho architecture_echo(const Model<float>& model);

/// Flat binary checkpoint: magic, version, key=value echo (architecture plus
/// `extra`), then named parameter blocks each carrying its shape and a
/// float32 payload.
void save_checkpoint(const Model<float>& model, const ConfigEcho& extra, const std::filesystem::path& path);

struct LoadedCheckpoint {
  Model<float> model;
  ConfigEcho echo;
};

/// Rebuilds the model. Every key in `expected` must be present in the stored
/// echo with an identical value; otherwise ConfigError names the key.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ConfigEcho& expected = {});

}  // namespace dar
