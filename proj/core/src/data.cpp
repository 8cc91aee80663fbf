#include "dar/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"

namespace dar {

namespace {

constexpr char kDatasetMagic[9] = "DARDATA\0";
constexpr std::uint32_t kDatasetVersion = 1;

enum SplitStream : std::uint64_t { kTrainStream = 1, kTargetStream = 2, kValStream = 3, kTestStream = 4 };

float clip01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

// Core family: filled disk, hollow square, X-cross, horizontal stripes,
// then plus, ring, diamond, triangle for larger class counts.
bool core_pixel(std::size_t cls, double dx, double dy, double half) {
  const double r = std::sqrt(dx * dx + dy * dy);
  const double cheb = std::max(std::abs(dx), std::abs(dy));
  const double box = 0.72 * half;  // ~5.75 px on a 16 px panel
  switch (cls) {
    case 0: return r <= 0.66 * half;
    case 1: return cheb <= box && cheb >= box - 2.0;
    case 2: return cheb <= box && std::abs(std::abs(dx) - std::abs(dy)) <= 0.9;
    case 3: return cheb <= box && static_cast<long>(std::floor(dy + box)) % 4 < 2;
    case 4: return cheb <= box && (std::abs(dx) <= 1.0 || std::abs(dy) <= 1.0);
    case 5: return r <= 0.72 * half && r >= 0.72 * half - 2.0;
    case 6: return std::abs(dx) + std::abs(dy) <= box;
    case 7: return dy >= -box && dy <= box && std::abs(dx) <= (dy + box) / 2.0;
    default: return false;
  }
}

// Spurious family: vertical bars (1, 2, 3), coarse checker, then four bars,
// horizontal frame, fine checker, diagonal stripes.
bool spurious_pixel(std::size_t cls, std::size_t row, std::size_t col, std::size_t height, std::size_t width) {
  const std::size_t margin = std::max<std::size_t>(1, height / 8);
  const bool in_rows = row >= margin && row + margin < height;
  auto bars = [&](std::size_t count) {
    if (!in_rows) return false;
    const double slot = static_cast<double>(width) / static_cast<double>(count + 1);
    for (std::size_t b = 1; b <= count; ++b) {
      const double centre = slot * static_cast<double>(b) - 0.5;
      if (std::abs(static_cast<double>(col) - centre) <= 0.9) return true;
    }
    return false;
  };
  switch (cls) {
    case 0: return bars(1);
    case 1: return bars(2);
    case 2: return bars(3);
    case 3: return ((row / 4) + (col / 4)) % 2 == 0;
    case 4: return bars(4);
    case 5: return row < margin + 2 || row + margin + 2 >= height;
    case 6: return ((row / 2) + (col / 2)) % 2 == 0;
    case 7: return (row + col) % 6 < 2;
    default: return false;
  }
}

void add_noise(std::vector<float>& pixels, double sigma, Rng& rng) {
  for (auto& p : pixels) p = clip01(p + sigma * gaussian(rng));
}

long draw_shift(std::size_t jitter, Rng& rng) {
  if (jitter == 0) return 0;
  return static_cast<long>(rng() % (2 * jitter + 1)) - static_cast<long>(jitter);
}

DominoExample render(std::int32_t label, std::int32_t attribute, const DatasetConfig& cfg, Rng& rng) {
  DominoExample ex;
  ex.label = label;
  ex.attribute = attribute;
  const std::size_t h = cfg.image_height, w = cfg.image_width;
  const long sx = draw_shift(cfg.core_jitter, rng);
  const long sy = draw_shift(cfg.core_jitter, rng);
  if (cfg.mode == DataMode::stacked) {
    const std::size_t ph = h / 2;
    auto spu = glyph_template(Component::spurious, static_cast<std::size_t>(attribute), ph, w);
    auto core = glyph_template(Component::core, static_cast<std::size_t>(label), ph, w, sx, sy);
    add_noise(spu, cfg.noise_spu, rng);
    add_noise(core, cfg.noise_core, rng);
    ex.image.resize(h * w);
    std::copy(spu.begin(), spu.end(), ex.image.begin());
    std::copy(core.begin(), core.end(), ex.image.begin() + static_cast<long>(ph * w));
  } else {
    ex.shape_layer = glyph_template(Component::core, static_cast<std::size_t>(label), h, w, sx, sy);
    add_noise(ex.shape_layer, cfg.noise_core, rng);
    const auto base = attribute_colour(static_cast<std::size_t>(attribute));
    for (std::size_t c = 0; c < 3; ++c) ex.tint[c] = clip01(base[c] + cfg.noise_spu * gaussian(rng));
    ex.image = render_overlap(ex.shape_layer, ex.tint, cfg);
  }
  return ex;
}

Split render_split(const std::vector<std::pair<std::int32_t, std::int32_t>>& groups, const DatasetConfig& cfg,
                   Rng& rng) {
  auto order = groups;
  shuffle_in_place(order, rng);
  Split split;
  split.examples.reserve(order.size());
  for (const auto& [y, a] : order) split.examples.push_back(render(y, a, cfg, rng));
  return split;
}

std::vector<std::pair<std::int32_t, std::int32_t>> balanced_groups(std::size_t count, std::size_t classes) {
  std::vector<std::pair<std::int32_t, std::int32_t>> out;
  const std::size_t per_group = count / (classes * classes);
  for (std::size_t y = 0; y < classes; ++y) {
    for (std::size_t a = 0; a < classes; ++a) {
      for (std::size_t i = 0; i < per_group; ++i) out.emplace_back(static_cast<std::int32_t>(y), static_cast<std::int32_t>(a));
    }
  }
  return out;
}

// Majority total = round(s·n), spread evenly over classes; each class's
// minority examples are spread evenly over its C-1 off-diagonal attributes.
std::vector<std::pair<std::int32_t, std::int32_t>> correlated_groups(std::size_t count, std::size_t classes,
                                                                     double strength) {
  std::vector<std::pair<std::int32_t, std::int32_t>> out;
  const std::size_t per_class = count / classes;
  const auto majority_total = static_cast<std::size_t>(std::llround(strength * static_cast<double>(count)));
  for (std::size_t y = 0; y < classes; ++y) {
    const std::size_t majority = majority_total / classes + (y < majority_total % classes ? 1 : 0);
    const std::size_t minority = per_class - majority;
    for (std::size_t i = 0; i < majority; ++i) out.emplace_back(static_cast<std::int32_t>(y), static_cast<std::int32_t>(y));
    if (classes < 2) continue;
    const std::size_t others = classes - 1;
    std::size_t slot = 0;
    for (std::size_t a = 0; a < classes; ++a) {
      if (a == y) continue;
      const std::size_t n = minority / others + (slot < minority % others ? 1 : 0);
      for (std::size_t i = 0; i < n; ++i) out.emplace_back(static_cast<std::int32_t>(y), static_cast<std::int32_t>(a));
      ++slot;
    }
  }
  return out;
}

}  // namespace

std::string to_string(DataMode mode) { return mode == DataMode::stacked ? "stacked" : "overlap"; }

DataMode parse_data_mode(const std::string& text) {
  if (text == "stacked") return DataMode::stacked;
  if (text == "overlap") return DataMode::overlap;
  throw ConfigError("mode", "expected 'stacked' or 'overlap', got '" + text + "'");
}

std::string to_string(Component component) { return component == Component::core ? "core" : "spurious"; }

void DatasetConfig::validate() const {
  if (classes < 2 || classes > kMaxClasses) {
    throw ConfigError("classes", "must be in [2," + std::to_string(kMaxClasses) + "]");
  }
  if (!(spurious_strength >= 0.0 && spurious_strength <= 1.0)) {
    throw ConfigError("spurious_strength", "must lie in [0,1], got " + std::to_string(spurious_strength));
  }
  if (!(noise_core >= 0.0)) throw ConfigError("noise_core", "must be >= 0");
  if (!(noise_spu >= 0.0)) throw ConfigError("noise_spu", "must be >= 0");
  if (image_height < 4 || image_width < 4) throw ConfigError("image_height", "image must be at least 4x4");
  if (mode == DataMode::stacked && image_height % 2 != 0) {
    throw ConfigError("image_height", "must be even in stacked mode");
  }
  if (train == 0 || train % classes != 0) {
    throw ConfigError("train", "must be a positive multiple of the class count");
  }
  const std::size_t groups = classes * classes;
  if (target == 0 || target % groups != 0) throw ConfigError("target", "must be a positive multiple of classes^2");
  if (val == 0 || val % groups != 0) throw ConfigError("val", "must be a positive multiple of classes^2");
  if (test == 0 || test % groups != 0) throw ConfigError("test", "must be a positive multiple of classes^2");
}

std::vector<float> glyph_template(Component family, std::size_t cls, std::size_t height, std::size_t width,
                                  long shift_x, long shift_y) {
  std::vector<float> panel(height * width, 0.0f);
  const double cx = (static_cast<double>(width) - 1.0) / 2.0 + static_cast<double>(shift_x);
  const double cy = (static_cast<double>(height) - 1.0) / 2.0 + static_cast<double>(shift_y);
  const double half = static_cast<double>(std::min(height, width)) / 2.0;
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const bool on = family == Component::core
                          ? core_pixel(cls, static_cast<double>(c) - cx, static_cast<double>(r) - cy, half)
                          : spurious_pixel(cls, r, c, height, width);
      panel[r * width + c] = on ? 1.0f : 0.0f;
    }
  }
  return panel;
}

std::array<float, 3> attribute_colour(std::size_t attribute) {
  static constexpr std::array<std::array<float, 3>, kMaxClasses> kColours{{
      {1.0f, 0.0f, 0.0f},
      {0.0f, 1.0f, 0.0f},
      {0.0f, 0.0f, 1.0f},
      {1.0f, 1.0f, 0.0f},
      {1.0f, 0.0f, 1.0f},
      {0.0f, 1.0f, 1.0f},
      {1.0f, 1.0f, 1.0f},
      {1.0f, 0.5f, 0.0f},
  }};
  if (attribute >= kColours.size()) throw IndexError("attribute colour index out of range");
  return kColours[attribute];
}

std::vector<float> render_overlap(const std::vector<float>& shape_layer, const std::array<float, 3>& tint,
                                  const DatasetConfig& config) {
  const std::size_t plane = config.image_height * config.image_width;
  if (shape_layer.size() != plane) throw DimensionError("overlap shape layer has the wrong size");
  std::vector<float> image(3 * plane);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) image[c * plane + i] = shape_layer[i] * tint[c];
  }
  return image;
}

DatasetSplits generate(const DatasetConfig& config, std::uint64_t seed) {
  config.validate();
  DatasetSplits out;
  out.config = config;
  out.seed = seed;
  const std::size_t c = config.classes;
  {
    Rng rng = make_rng(seed, kTrainStream);
    out.train = render_split(correlated_groups(config.train, c, config.spurious_strength), config, rng);
  }
  {
    Rng rng = make_rng(seed, kTargetStream);
    out.target = render_split(balanced_groups(config.target, c), config, rng);
  }
  {
    Rng rng = make_rng(seed, kValStream);
    out.val = render_split(balanced_groups(config.val, c), config, rng);
  }
  {
    Rng rng = make_rng(seed, kTestStream);
    out.test = render_split(balanced_groups(config.test, c), config, rng);
  }
  return out;
}

Split merge(const Split& a, const Split& b) {
  Split out;
  out.examples.reserve(a.size() + b.size());
  out.examples.insert(out.examples.end(), a.examples.begin(), a.examples.end());
  out.examples.insert(out.examples.end(), b.examples.begin(), b.examples.end());
  return out;
}

std::vector<float> apply_intervention(const DominoExample& x, const DominoExample& donor, Component component,
                                      const DatasetConfig& config) {
  if (config.mode == DataMode::overlap) {
    if (x.shape_layer.empty() || donor.shape_layer.empty()) {
      throw DataError("overlap-mode intervention needs the shape layer of both examples");
    }
    return component == Component::spurious ? render_overlap(x.shape_layer, donor.tint, config)
                                            : render_overlap(donor.shape_layer, x.tint, config);
  }
  const std::size_t w = config.image_width, half = config.image_height / 2;
  std::vector<float> image = x.image;
  const std::size_t begin = component == Component::core ? half * w : 0;
  const std::size_t end = component == Component::core ? config.image_height * w : half * w;
  std::copy(donor.image.begin() + static_cast<long>(begin), donor.image.begin() + static_cast<long>(end),
            image.begin() + static_cast<long>(begin));
  return image;
}

std::vector<std::size_t> draw_donors(std::size_t pool_size, std::size_t self_index, std::size_t count, Rng& rng) {
  std::vector<std::size_t> candidates;
  candidates.reserve(pool_size);
  for (std::size_t i = 0; i < pool_size; ++i) {
    if (i != self_index) candidates.push_back(i);
  }
  if (candidates.empty()) throw DataError("donor pool is empty");
  if (count == 0) throw ConfigError("donors", "must be >= 1");
  count = std::min(count, candidates.size());
  // Partial Fisher-Yates: the first `count` slots are a uniform draw without replacement.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (candidates.size() - i));
    std::swap(candidates[i], candidates[j]);
  }
  candidates.resize(count);
  return candidates;
}

std::vector<std::vector<float>> intervene(const DominoExample& x, std::size_t self_index, const Split& pool,
                                          const InterventionSpec& spec, const DatasetConfig& config, Rng& rng) {
  std::vector<std::vector<float>> out;
  for (std::size_t d : draw_donors(pool.size(), self_index, spec.donors, rng)) {
    out.push_back(apply_intervention(x, pool.examples[d], spec.component, config));
  }
  return out;
}

std::vector<std::size_t> group_counts(const Split& split, std::size_t classes) {
  std::vector<std::size_t> counts(classes * classes, 0);
  for (const auto& ex : split.examples) {
    if (ex.label < 0 || ex.attribute < 0 || static_cast<std::size_t>(ex.label) >= classes ||
        static_cast<std::size_t>(ex.attribute) >= classes) {
      throw IndexError("example group outside the configured class count");
    }
    ++counts[ex.group(classes)];
  }
  return counts;
}

bool is_group_balanced(const Split& split, std::size_t classes) {
  const auto counts = group_counts(split, classes);
  return !split.empty() && std::all_of(counts.begin(), counts.end(), [&](std::size_t n) { return n == counts[0]; });
}

SubsampleResult subsample_balanced(const Split& split, std::size_t classes, Rng& rng) {
  if (split.empty()) throw ContractError("subsample_balanced on an empty split");
  const auto counts = group_counts(split, classes);
  std::size_t keep = 0;
  SubsampleResult result;
  for (std::size_t g = 0; g < counts.size(); ++g) {
    if (counts[g] == 0) {
      result.excluded_groups.push_back(g);
    } else if (keep == 0 || counts[g] < keep) {
      keep = counts[g];
    }
  }
  std::vector<std::vector<std::size_t>> members(counts.size());
  for (std::size_t i = 0; i < split.size(); ++i) members[split.examples[i].group(classes)].push_back(i);
  std::vector<std::size_t> chosen;
  for (auto& m : members) {
    shuffle_in_place(m, rng);
    chosen.insert(chosen.end(), m.begin(), m.begin() + static_cast<long>(std::min(keep, m.size())));
  }
  std::sort(chosen.begin(), chosen.end());
  for (std::size_t i : chosen) result.split.examples.push_back(split.examples[i]);
  return result;
}

std::vector<double> reweight_weights(const Split& split, std::size_t classes) {
  if (split.empty()) throw ContractError("reweight_weights on an empty split");
  const auto counts = group_counts(split, classes);
  std::size_t present = 0;
  for (std::size_t n : counts) present += n > 0 ? 1 : 0;
  // w_g = N / (G_present · n_g): mean over members is exactly 1.
  const double n_total = static_cast<double>(split.size());
  std::vector<double> weights(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    const double n_g = static_cast<double>(counts[split.examples[i].group(classes)]);
    weights[i] = n_total / (static_cast<double>(present) * n_g);
  }
  return weights;
}

Tensor batch_images(const Split& split, std::span<const std::size_t> indices, const DatasetConfig& config) {
  const std::size_t n = config.image_size();
  std::vector<float> data(indices.size() * n);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& img = split.examples.at(indices[b]).image;
    if (img.size() != n) throw DimensionError("example image size does not match the dataset config");
    std::copy(img.begin(), img.end(), data.begin() + static_cast<long>(b * n));
  }
  return Tensor({indices.size(), config.channels(), config.image_height, config.image_width}, std::move(data));
}

std::vector<std::int32_t> batch_labels(const Split& split, std::span<const std::size_t> indices, bool attributes) {
  std::vector<std::int32_t> out(indices.size());
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& ex = split.examples.at(indices[b]);
    out[b] = attributes ? ex.attribute : ex.label;
  }
  return out;
}

// --------------------------------------------------------------------------
// persistence

std::string dataset_echo(const DatasetConfig& c, std::uint64_t seed) {
  std::ostringstream out;
  out.precision(17);
  out << "classes=" << c.classes << '\n'
      << "image_height=" << c.image_height << '\n'
      << "image_width=" << c.image_width << '\n'
      << "train=" << c.train << '\n'
      << "target=" << c.target << '\n'
      << "val=" << c.val << '\n'
      << "test=" << c.test << '\n'
      << "spurious_strength=" << c.spurious_strength << '\n'
      << "noise_core=" << c.noise_core << '\n'
      << "noise_spu=" << c.noise_spu << '\n'
      << "core_jitter=" << c.core_jitter << '\n'
      << "mode=" << to_string(c.mode) << '\n'
      << "seed=" << seed << '\n';
  return out.str();
}

namespace {

void write_split(std::ostream& out, const Split& split, const DatasetConfig& cfg) {
  detail::write_pod<std::uint64_t>(out, split.size());
  for (const auto& ex : split.examples) detail::write_array(out, ex.image);
  std::vector<std::int32_t> labels, attrs;
  for (const auto& ex : split.examples) {
    labels.push_back(ex.label);
    attrs.push_back(ex.attribute);
  }
  detail::write_array(out, labels);
  detail::write_array(out, attrs);
  if (cfg.mode == DataMode::overlap) {
    for (const auto& ex : split.examples) detail::write_array(out, ex.shape_layer);
    for (const auto& ex : split.examples) {
      detail::write_array(out, std::vector<float>(ex.tint.begin(), ex.tint.end()));
    }
  }
}

Split read_split(std::istream& in, const DatasetConfig& cfg, const std::string& name) {
  const auto count = detail::read_pod<std::uint64_t>(in, name + " count");
  if (count > (1u << 26)) throw FormatError("implausible example count in " + name);
  Split split;
  split.examples.resize(count);
  for (auto& ex : split.examples) detail::read_array(in, ex.image, cfg.image_size(), name + " images");
  std::vector<std::int32_t> labels, attrs;
  detail::read_array(in, labels, count, name + " labels");
  detail::read_array(in, attrs, count, name + " attributes");
  for (std::size_t i = 0; i < count; ++i) {
    split.examples[i].label = labels[i];
    split.examples[i].attribute = attrs[i];
  }
  if (cfg.mode == DataMode::overlap) {
    const std::size_t plane = cfg.image_height * cfg.image_width;
    for (auto& ex : split.examples) detail::read_array(in, ex.shape_layer, plane, name + " shape layers");
    for (auto& ex : split.examples) {
      std::vector<float> tint;
      detail::read_array(in, tint, 3, name + " tints");
      std::copy(tint.begin(), tint.end(), ex.tint.begin());
    }
  }
  group_counts(split, cfg.classes);  // validates label ranges
  return split;
}

}  // namespace

void save_dataset(const DatasetSplits& splits, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(kDatasetMagic, 8);
  detail::write_pod(out, kDatasetVersion);
  detail::write_string(out, dataset_echo(splits.config, splits.seed));
  for (const Split* s : {&splits.train, &splits.target, &splits.val, &splits.test}) write_split(out, *s, splits.config);
  if (!out) throw FormatError("write failed for " + path.string());
}

DatasetSplits load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  detail::expect_magic(in, kDatasetMagic, path.string());
  const auto version = detail::read_pod<std::uint32_t>(in, "version");
  if (version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(version));
  const auto echo = detail::parse_echo(detail::read_string(in, "config echo"));
  auto get = [&](const std::string& key) {
    auto it = echo.find(key);
    if (it == echo.end()) throw FormatError("dataset header lacks '" + key + "'");
    return it->second;
  };
  DatasetSplits out;
  DatasetConfig& c = out.config;
  c.classes = std::stoul(get("classes"));
  c.image_height = std::stoul(get("image_height"));
  c.image_width = std::stoul(get("image_width"));
  c.train = std::stoul(get("train"));
  c.target = std::stoul(get("target"));
  c.val = std::stoul(get("val"));
  c.test = std::stoul(get("test"));
  c.spurious_strength = std::stod(get("spurious_strength"));
  c.noise_core = std::stod(get("noise_core"));
  c.noise_spu = std::stod(get("noise_spu"));
  c.core_jitter = std::stoul(get("core_jitter"));
  c.mode = parse_data_mode(get("mode"));
  out.seed = std::stoull(get("seed"));
  out.train = read_split(in, c, "train");
  out.target = read_split(in, c, "target");
  out.val = read_split(in, c, "val");
  out.test = read_split(in, c, "test");
  return out;
}

}  // namespace dar
