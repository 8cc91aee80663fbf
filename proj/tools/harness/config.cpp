#include "harness/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "dar/error.hpp"
#include "harness/files.hpp"

namespace dar::harness {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Removes a trailing comment that is not inside quotes.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

std::string unquote(const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a number, got '" + v + "'");
  }
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  const auto* end = v.data() + v.size();
  const auto res = std::from_chars(v.data(), end, x);
  if (res.ec != std::errc() || res.ptr != end) throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

std::vector<std::string> to_list(const std::string& key, const std::string& v) {
  if (v.size() < 2 || v.front() != '[' || v.back() != ']') throw ConfigError(key, "expected a list [a, b, ...]");
  std::vector<std::string> out;
  std::stringstream body(v.substr(1, v.size() - 2));
  std::string item;
  while (std::getline(body, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(unquote(item));
  }
  return out;
}

template <typename F>
auto map_list(const std::string& key, const std::string& v, F convert) {
  std::vector<decltype(convert(key, std::string{}))> out;
  for (const auto& item : to_list(key, v)) out.push_back(convert(key, item));
  return out;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

template <typename V>
std::string fmt_list(const std::vector<V>& values) {
  std::string out = "[";
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ", ";
    if constexpr (std::is_floating_point_v<V>)
      out += fmt(values[i]);
    else
      out += std::to_string(values[i]);
  }
  return out + "]";
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

void add_hp_setters(std::map<std::string, Setter>& s, const std::string& section, HyperParams ExperimentConfig::*hp) {
  s[section + ".lr"] = [hp](auto& c, auto& k, auto& v) { (c.*hp).lr = to_double(k, v); };
  s[section + ".weight_decay"] = [hp](auto& c, auto& k, auto& v) { (c.*hp).weight_decay = to_double(k, v); };
  s[section + ".batch_size"] = [hp](auto& c, auto& k, auto& v) { (c.*hp).batch_size = to_uint(k, v); };
  s[section + ".epochs"] = [hp](auto& c, auto& k, auto& v) { (c.*hp).epochs = to_uint(k, v); };
  s[section + ".reg_type"] = [hp](auto& c, auto& k, auto& v) {
    try {
      (c.*hp).reg_type = parse_reg_type(v);
    } catch (const ConfigError&) {
      throw ConfigError(k, "expected l1 or l2, got '" + v + "'");
    }
  };
  s[section + ".reg_strength"] = [hp](auto& c, auto& k, auto& v) { (c.*hp).reg_strength = to_double(k, v); };
  s[section + ".sd_lambda"] = [hp](auto& c, auto& k, auto& v) { (c.*hp).sd_lambda = to_double(k, v); };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> s;
    s["data.classes"] = [](auto& c, auto& k, auto& v) { c.data.classes = to_uint(k, v); };
    s["data.image_height"] = [](auto& c, auto& k, auto& v) { c.data.image_height = to_uint(k, v); };
    s["data.image_width"] = [](auto& c, auto& k, auto& v) { c.data.image_width = to_uint(k, v); };
    s["data.train"] = [](auto& c, auto& k, auto& v) { c.data.train = to_uint(k, v); };
    s["data.target"] = [](auto& c, auto& k, auto& v) { c.data.target = to_uint(k, v); };
    s["data.val"] = [](auto& c, auto& k, auto& v) { c.data.val = to_uint(k, v); };
    s["data.test"] = [](auto& c, auto& k, auto& v) { c.data.test = to_uint(k, v); };
    s["data.spurious_strength"] = [](auto& c, auto& k, auto& v) { c.data.spurious_strength = to_double(k, v); };
    s["data.noise_core"] = [](auto& c, auto& k, auto& v) { c.data.noise_core = to_double(k, v); };
    s["data.noise_spu"] = [](auto& c, auto& k, auto& v) { c.data.noise_spu = to_double(k, v); };
    s["data.core_jitter"] = [](auto& c, auto& k, auto& v) { c.data.core_jitter = to_uint(k, v); };
    s["data.mode"] = [](auto& c, auto& k, auto& v) {
      if (v != "stacked" && v != "overlap") throw ConfigError(k, "expected stacked or overlap, got '" + v + "'");
      c.data.mode = parse_data_mode(v);
    };
    s["data.seed"] = [](auto& c, auto& k, auto& v) { c.data_seed = to_uint(k, v); };

    s["model.preset"] = [](auto& c, auto& k, auto& v) {
      if (v != "small" && v != "medium" && v != "large")
        throw ConfigError(k, "expected small, medium or large, got '" + v + "'");
      c.preset = parse_preset(v);
    };
    s["model.method"] = [](auto& c, auto& k, auto& v) {
      try {
        c.method = parse_method(v);
      } catch (const ConfigError& e) {
        throw ConfigError(k, e.message());
      }
    };

    s["dar.queries"] = [](auto& c, auto& k, auto& v) { c.dar.queries = to_uint(k, v); };
    s["dar.heads"] = [](auto& c, auto& k, auto& v) { c.dar.heads = to_uint(k, v); };
    s["dar.layers"] = [](auto& c, auto& k, auto& v) { c.dar.layers = to_uint(k, v); };
    s["dar.positional"] = [](auto& c, auto& k, auto& v) { c.dar.positional = to_bool(k, v); };

    add_hp_setters(s, "erm", &ExperimentConfig::erm);
    add_hp_setters(s, "retrain", &ExperimentConfig::retrain);
    s["retrain.warm_start"] = [](auto& c, auto& k, auto& v) { c.warm_start = to_bool(k, v); };

    s["grid.lr"] = [](auto& c, auto& k, auto& v) { c.grid.lr = map_list(k, v, to_double); };
    s["grid.weight_decay"] = [](auto& c, auto& k, auto& v) { c.grid.weight_decay = map_list(k, v, to_double); };
    s["grid.batch_size"] = [](auto& c, auto& k, auto& v) {
      c.grid.batch_size = map_list(k, v, [](const std::string& kk, const std::string& x) { return static_cast<std::size_t>(to_uint(kk, x)); });
    };
    s["grid.reg_strength"] = [](auto& c, auto& k, auto& v) { c.grid.reg_strength = map_list(k, v, to_double); };

    s["run.seeds"] = [](auto& c, auto& k, auto& v) { c.seeds = map_list(k, v, to_uint); };
    s["run.output_dir"] = [](auto& c, auto&, auto& v) { c.output_dir = v; };
    s["run.checkpoint"] = [](auto& c, auto&, auto& v) { c.checkpoint = v; };

    s["metrics.cep_donors"] = [](auto& c, auto& k, auto& v) { c.cep_donors = to_uint(k, v); };
    s["metrics.cep_examples"] = [](auto& c, auto& k, auto& v) { c.cep_examples = to_uint(k, v); };
    s["metrics.cep_logits"] = [](auto& c, auto& k, auto& v) { c.cep_logits = to_bool(k, v); };
    s["metrics.cep_seed"] = [](auto& c, auto& k, auto& v) { c.cep_seed = to_uint(k, v); };
    s["metrics.heatmaps"] = [](auto& c, auto& k, auto& v) { c.heatmaps = to_uint(k, v); };
    return s;
  }();
  return table;
}

void validate_section(const std::string& section, const std::function<void()>& check) {
  try {
    check();
  } catch (const ConfigError& e) {
    throw ConfigError(section + "." + (e.field().empty() ? std::string("?") : e.field()), e.message());
  }
}

}  // namespace

KeyValueFile parse_key_values(const std::string& text, const std::string& origin) {
  KeyValueFile out;
  out.origin = origin;
  std::istringstream lines(text);
  std::string raw, section;
  std::size_t number = 0;
  auto fail = [&](const std::string& msg) { throw ConfigError("", origin + ":" + std::to_string(number), msg); };
  while (std::getline(lines, raw)) {
    ++number;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) fail("malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = unquote(trim(line.substr(eq + 1)));
    if (key.empty()) fail("missing key");
    const std::string full = section.empty() ? key : section + "." + key;
    if (out.entries.count(full)) fail(full + ": duplicate key (first set on line " + std::to_string(out.entries[full].line) + ")");
    out.entries[full] = {value, number};
  }
  return out;
}

std::string to_string(Method method) {
  switch (method) {
    case Method::erm: return "ERM";
    case Method::erm_core: return "ERM_Core";
    case Method::sub: return "SUB";
    case Method::rw: return "RW";
    case Method::dfr: return "DFR";
    case Method::dfr_fc: return "DFR_FC";
    case Method::dfr_cnn: return "DFR_CNN";
    case Method::dar: return "DAR";
    case Method::dar_spu: return "DAR_Spu";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  for (auto m : {Method::erm, Method::erm_core, Method::sub, Method::rw, Method::dfr, Method::dfr_fc,
                 Method::dfr_cnn, Method::dar, Method::dar_spu})
    if (text == to_string(m)) return m;
  throw ConfigError("method", "unknown method '" + text + "' (ERM, ERM_Core, SUB, RW, DFR, DFR_FC, DFR_CNN, DAR, DAR_Spu)");
}

bool is_posthoc(Method method) {
  return method == Method::dfr || method == Method::dfr_fc || method == Method::dfr_cnn || method == Method::dar ||
         method == Method::dar_spu;
}

RetrainVariant retrain_variant(Method method) {
  switch (method) {
    case Method::dfr: return RetrainVariant::dfr;
    case Method::dfr_fc: return RetrainVariant::dfr_fc;
    case Method::dfr_cnn: return RetrainVariant::dfr_cnn;
    case Method::dar: return RetrainVariant::dar;
    case Method::dar_spu: return RetrainVariant::dar_spu;
    default: throw ContractError(to_string(method) + " is not a post-hoc method");
  }
}

HyperParams ExperimentConfig::default_erm_hp() {
  HyperParams hp;
  hp.lr = 1e-3;
  hp.weight_decay = 1e-4;
  hp.batch_size = 64;
  hp.epochs = 40;
  hp.reg_strength = 0.0;
  return hp;
}

HyperParams ExperimentConfig::default_retrain_hp() {
  HyperParams hp;
  hp.lr = 1e-3;
  hp.weight_decay = 0.0;
  hp.batch_size = 32;
  hp.epochs = 60;
  hp.reg_type = RegType::l1;
  hp.reg_strength = 1e-3;
  return hp;
}

DatasetConfig ExperimentConfig::effective_data() const {
  DatasetConfig d = data;
  // Spurious panels stay but carry no label information.
  if (method == Method::erm_core) d.spurious_strength = 1.0 / static_cast<double>(d.classes);
  return d;
}

void ExperimentConfig::validate() const {
  validate_section("data", [&] { data.validate(); });
  validate_section("erm", [&] { erm.validate(); });
  validate_section("retrain", [&] { retrain.validate(); });
  if (is_posthoc(method) && (method == Method::dar || method == Method::dar_spu)) {
    const auto channels = preset_blocks(preset).back().out_channels;
    validate_section("dar", [&] { dar.validate(channels); });
  }
  if (warm_start && method != Method::dfr) throw ConfigError("retrain.warm_start", "only DFR supports warm start");
  if (seeds.empty()) throw ConfigError("run.seeds", "need at least one seed");
  if (cep_donors == 0) throw ConfigError("metrics.cep_donors", "need at least one donor");
  if (!checkpoint.empty() && !is_posthoc(method))
    throw ConfigError("run.checkpoint", "only post-hoc methods start from a checkpoint");
  for (double v : grid.lr)
    if (!(v > 0.0)) throw ConfigError("grid.lr", "learning rates must be positive");
  for (auto v : grid.batch_size)
    if (v == 0) throw ConfigError("grid.batch_size", "batch sizes must be positive");
}

std::string ExperimentConfig::echo() const {
  std::ostringstream s;
  const auto d = effective_data();
  s << "[data]\n"
    << "classes = " << d.classes << "\nimage_height = " << d.image_height << "\nimage_width = " << d.image_width
    << "\ntrain = " << d.train << "\ntarget = " << d.target << "\nval = " << d.val << "\ntest = " << d.test
    << "\nspurious_strength = " << fmt(d.spurious_strength) << "\nnoise_core = " << fmt(d.noise_core)
    << "\nnoise_spu = " << fmt(d.noise_spu) << "\ncore_jitter = " << d.core_jitter << "\nmode = " << to_string(d.mode)
    << "\nseed = " << data_seed << "\n\n";
  s << "[model]\npreset = " << to_string(preset) << "\nmethod = " << to_string(method) << "\n\n";
  s << "[dar]\nqueries = " << dar.queries << "\nheads = " << dar.heads << "\nlayers = " << dar.layers
    << "\npositional = " << (dar.positional ? "true" : "false") << "\n\n";
  auto hp_block = [&](const char* name, const HyperParams& hp) {
    s << "[" << name << "]\nlr = " << fmt(hp.lr) << "\nweight_decay = " << fmt(hp.weight_decay)
      << "\nbatch_size = " << hp.batch_size << "\nepochs = " << hp.epochs << "\nreg_type = " << to_string(hp.reg_type)
      << "\nreg_strength = " << fmt(hp.reg_strength) << "\nsd_lambda = " << fmt(hp.sd_lambda) << "\n";
  };
  hp_block("erm", erm);
  s << "\n";
  hp_block("retrain", retrain);
  s << "warm_start = " << (warm_start ? "true" : "false") << "\n\n";
  s << "[grid]\nlr = " << fmt_list(grid.lr) << "\nweight_decay = " << fmt_list(grid.weight_decay)
    << "\nbatch_size = " << fmt_list(grid.batch_size) << "\nreg_strength = " << fmt_list(grid.reg_strength) << "\n\n";
  s << "[run]\nseeds = " << fmt_list(seeds) << "\noutput_dir = \"" << output_dir << "\"\ncheckpoint = \"" << checkpoint
    << "\"\n\n";
  s << "[metrics]\ncep_donors = " << cep_donors << "\ncep_examples = " << cep_examples
    << "\ncep_logits = " << (cep_logits ? "true" : "false") << "\ncep_seed = " << cep_seed
    << "\nheatmaps = " << heatmaps << "\n";
  return s.str();
}

ExperimentConfig parse_config(const std::string& text, const std::string& origin) {
  const auto kv = parse_key_values(text, origin);
  ExperimentConfig cfg;
  auto at = [&](const std::string& key) {
    const auto it = kv.entries.find(key);
    return it == kv.entries.end() ? origin : origin + ":" + std::to_string(it->second.line);
  };
  const auto& table = setters();
  for (const auto& [key, entry] : kv.entries) {
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError(key, at(key), "unknown key");
    try {
      it->second(cfg, key, entry.value);
    } catch (const ConfigError& e) {
      throw ConfigError(key, at(key), e.message());
    }
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(e.field(), at(e.field()), e.message());
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_text_file(path), path.string());
}

}  // namespace dar::harness
