#include "dar/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "binary_io.hpp"

namespace dar {

namespace {

constexpr char kCheckpointMagic[9] = "DARCKPT\0";
constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_blocks(const std::vector<BlockSpec>& blocks) {
  std::ostringstream out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (i) out << ',';
    out << blocks[i].out_channels << ':' << blocks[i].kernel << ':' << (blocks[i].pool ? 1 : 0);
  }
  return out.str();
}

std::vector<BlockSpec> decode_blocks(const std::string& text) {
  std::vector<BlockSpec> blocks;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    BlockSpec spec;
    char sep1 = 0, sep2 = 0;
    int pool = 0;
    std::istringstream fields(item);
    fields >> spec.out_channels >> sep1 >> spec.kernel >> sep2 >> pool;
    if (!fields || sep1 != ':' || sep2 != ':') throw FormatError("bad block spec '" + item + "'");
    spec.pool = pool != 0;
    blocks.push_back(spec);
  }
  if (blocks.empty()) throw FormatError("checkpoint has no backbone blocks");
  return blocks;
}

const std::string& lookup(const ConfigEcho& echo, const std::string& key) {
  auto it = echo.find(key);
  if (it == echo.end()) throw FormatError("checkpoint header lacks '" + key + "'");
  return it->second;
}

}  // namespace

ConfigEcho architecture_echo(const Model<float>& model) {
  ConfigEcho echo;
  echo["model.in_channels"] = std::to_string(model.backbone.in_channels);
  echo["model.blocks"] = encode_blocks(model.backbone.blocks);
  echo["model.aggregator"] = model.aggregator == Aggregator::gap ? "gap" : "dar";
  echo["model.classes"] = std::to_string(model.classifier.weight.dim(1));
  echo["model.hidden"] = model.classifier.has_hidden() ? "1" : "0";
  if (model.aggregator == Aggregator::dar) {
    echo["dar.queries"] = std::to_string(model.dar.config.queries);
    echo["dar.heads"] = std::to_string(model.dar.config.heads);
    echo["dar.layers"] = std::to_string(model.dar.config.layers);
    echo["dar.positional"] = model.dar.config.positional ? "1" : "0";
    if (model.dar.positional.defined()) echo["dar.spatial"] = std::to_string(model.dar.positional.dim(0));
  }
  return echo;
}

void save_checkpoint(const Model<float>& model, const ConfigEcho& extra, const std::filesystem::path& path) {
  ConfigEcho echo = extra;
  for (auto& [k, v] : architecture_echo(model)) echo[k] = v;
  std::ostringstream header;
  for (const auto& [k, v] : echo) header << k << '=' << v << '\n';

  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(kCheckpointMagic, 8);
  detail::write_pod(out, kCheckpointVersion);
  detail::write_string(out, header.str());
  const auto params = model.named_parameters();
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail::write_string(out, name);
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t extent : t.shape()) detail::write_pod<std::uint64_t>(out, extent);
    detail::write_array(out, std::vector<float>(t.data().begin(), t.data().end()));
  }
  if (!out) throw FormatError("write failed for " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ConfigEcho& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  detail::expect_magic(in, kCheckpointMagic, path.string());
  const auto version = detail::read_pod<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  LoadedCheckpoint result;
  result.echo = detail::parse_echo(detail::read_string(in, "checkpoint header"));
  for (const auto& [key, value] : expected) {
    auto it = result.echo.find(key);
    if (it == result.echo.end() || it->second != value) {
      throw ConfigError(key, "checkpoint was written with " +
                                 (it == result.echo.end() ? std::string("no value") : "'" + it->second + "'") +
                                 ", configuration has '" + value + "'");
    }
  }

  // Skeleton with the right shapes; values are overwritten below.
  const auto& echo = result.echo;
  Rng rng(0);
  Model<float>& model = result.model;
  model.backbone = Backbone<float>::init(std::stoul(lookup(echo, "model.in_channels")),
                                         decode_blocks(lookup(echo, "model.blocks")), rng);
  const std::size_t d = model.backbone.out_channels();
  if (lookup(echo, "model.aggregator") == "dar") {
    model.aggregator = Aggregator::dar;
    DarConfig cfg;
    cfg.queries = std::stoul(lookup(echo, "dar.queries"));
    cfg.heads = std::stoul(lookup(echo, "dar.heads"));
    cfg.layers = std::stoul(lookup(echo, "dar.layers"));
    cfg.positional = lookup(echo, "dar.positional") == "1";
    const std::size_t spatial = cfg.positional ? std::stoul(lookup(echo, "dar.spatial")) : 0;
    model.dar = DarHead<float>::init(cfg, d, spatial, rng);
  }
  model.classifier = Classifier<float>::init(d, std::stoul(lookup(echo, "model.classes")),
                                             lookup(echo, "model.hidden") == "1", rng);

  auto params = model.named_parameters();
  const auto count = detail::read_pod<std::uint32_t>(in, "parameter count");
  if (count != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " parameters, architecture expects " +
                      std::to_string(params.size()));
  }
  for (auto& [name, tensor] : params) {
    const std::string stored = detail::read_string(in, "parameter name");
    if (stored != name) throw FormatError("expected parameter '" + name + "', found '" + stored + "'");
    const auto ndim = detail::read_pod<std::uint32_t>(in, name + " rank");
    Shape shape(ndim);
    for (auto& extent : shape) extent = detail::read_pod<std::uint64_t>(in, name + " shape");
    if (shape != tensor.shape()) {
      throw FormatError("parameter '" + name + "' has shape " + shape_string(shape) + ", expected " +
                        shape_string(tensor.shape()));
    }
    std::vector<float> values;
    detail::read_array(in, values, tensor.size(), name);
    std::copy(values.begin(), values.end(), tensor.data().begin());
  }
  return result;
}

}  // namespace dar
