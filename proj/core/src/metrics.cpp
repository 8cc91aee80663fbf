#include "dar/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "dar/error.hpp"

namespace dar {

namespace {

constexpr std::size_t kInferenceBatch = 256;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::size_t> iota_range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out(end - begin);
  std::iota(out.begin(), out.end(), begin);
  return out;
}

std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

void require_stacked(const DatasetConfig& config, const char* what) {
  if (config.mode != DataMode::stacked)
    throw ContractError(std::string(what) + " needs spatially separated components (stacked mode)");
}

// Share of a row-major h×w map that lies in the bottom half. With an odd
// height the middle row counts half to each side.
template <typename Get>
std::pair<double, double> bottom_and_total(std::size_t height, std::size_t width, Get get) {
  double bottom = 0.0, total = 0.0;
  const std::size_t half = height / 2;
  for (std::size_t r = 0; r < height; ++r) {
    double row = 0.0;
    for (std::size_t c = 0; c < width; ++c) row += get(r, c);
    total += row;
    if (height % 2 == 1 && r == half)
      bottom += 0.5 * row;
    else if (r >= (height + 1) / 2)
      bottom += row;
  }
  return {bottom, total};
}

}  // namespace

// ---------------------------------------------------------------------------
// Group accuracy

GroupAccuracy group_accuracy(std::span<const std::int32_t> predictions, const Split& split, std::size_t classes,
                             bool attribute_target) {
  if (predictions.size() != split.size())
    throw DimensionError("group_accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(split.size()) + " examples");
  GroupAccuracy out;
  out.classes = classes;
  out.counts.assign(classes * classes, 0);
  std::vector<std::size_t> correct(classes * classes, 0);
  std::size_t min_n = 0, min_ok = 0, maj_n = 0, maj_ok = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto& ex = split.examples[i];
    const auto g = ex.group(classes);
    const std::int32_t target = attribute_target ? ex.attribute : ex.label;
    const bool ok = predictions[i] == target;
    ++out.counts[g];
    correct[g] += ok;
    if (ex.majority()) {
      ++maj_n;
      maj_ok += ok;
    } else {
      ++min_n;
      min_ok += ok;
    }
  }
  out.per_group.assign(classes * classes, kNaN);
  for (std::size_t g = 0; g < classes * classes; ++g) {
    if (out.counts[g] == 0)
      out.empty_groups.push_back(g);
    else
      out.per_group[g] = 100.0 * static_cast<double>(correct[g]) / static_cast<double>(out.counts[g]);
  }
  auto pct = [](std::size_t ok, std::size_t n) { return n ? 100.0 * static_cast<double>(ok) / static_cast<double>(n) : kNaN; };
  out.minority = pct(min_ok, min_n);
  out.majority = pct(maj_ok, maj_n);
  out.average = pct(min_ok + maj_ok, min_n + maj_n);
  return out;
}

std::vector<std::int32_t> argmax_rows(const Tensor& logits) {
  if (logits.ndim() != 2) throw DimensionError("argmax_rows expects [B×C], got " + shape_string(logits.shape()));
  const auto rows = logits.dim(0), cols = logits.dim(1);
  const auto v = logits.data();
  std::vector<std::int32_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto* row = v.data() + r * cols;
    out[r] = static_cast<std::int32_t>(std::max_element(row, row + cols) - row);
  }
  return out;
}

std::vector<std::int32_t> predict(const Model<float>& model, const Split& split, const DatasetConfig& config) {
  NoGradGuard guard;
  std::vector<std::int32_t> out;
  out.reserve(split.size());
  for (std::size_t begin = 0; begin < split.size(); begin += kInferenceBatch) {
    const auto idx = iota_range(begin, std::min(split.size(), begin + kInferenceBatch));
    const auto pred = argmax_rows(model.logits(batch_images(split, idx, config)));
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

GroupAccuracy group_accuracy(const Model<float>& model, const Split& split, const DatasetConfig& config,
                             bool attribute_target) {
  const auto pred = predict(model, split, config);
  return group_accuracy(pred, split, config.classes, attribute_target);
}

// ---------------------------------------------------------------------------
// CEP

std::string to_string(ProbeKind kind) {
  switch (kind) {
    case ProbeKind::prediction: return "prediction";
    case ProbeKind::feature: return "feature";
    case ProbeKind::feature_map: return "feature_map";
    case ProbeKind::pixel: return "pixel";
  }
  return "?";
}

ProbeFn make_probe(const Model<float>& model, ProbeKind kind, bool use_logits) {
  // The probe holds a shallow copy: parameters are shared, never mutated.
  return [model, kind, use_logits](const Tensor& images) {
    NoGradGuard guard;
    ProbeOutput out;
    const auto batch = images.dim(0);
    Tensor values;
    const Tensor activation = model.backbone.forward(images);
    switch (kind) {
      case ProbeKind::prediction: {
        const auto logits = model.head(activation);
        values = use_logits ? logits : softmax(logits, 1);
        out.elements = 1;
        out.entries = values.dim(1);
        break;
      }
      case ProbeKind::feature:
        values = model.aggregate(activation);
        out.elements = values.dim(1);
        out.entries = 1;
        break;
      case ProbeKind::feature_map:
        values = activation;
        out.elements = activation.dim(1);
        out.entries = activation.dim(2) * activation.dim(3);
        break;
      case ProbeKind::pixel:
        values = activation;
        out.elements = activation.dim(1) * activation.dim(2) * activation.dim(3);
        out.entries = 1;
        break;
    }
    const auto v = values.data();
    if (v.size() != batch * out.elements * out.entries) throw DimensionError("probe output size mismatch");
    out.values.assign(v.begin(), v.end());
    return out;
  };
}

CepResult cep(const ProbeFn& probe, const Split& split, const DatasetConfig& config, const CepConfig& options) {
  if (split.empty()) throw MetricError("CEP on an empty split");
  if (options.donors == 0) throw ConfigError("donors", "need at least one donor");
  const std::size_t n =
      options.max_examples ? std::min(options.max_examples, split.size()) : split.size();
  if (split.size() < 2) throw DataError("donor pool is empty");
  // Small pools cap the donor count at every other example.
  const std::size_t m = std::min(options.donors, split.size() - 1);
  const std::size_t per_example = 1 + 2 * m;
  const std::size_t chunk = std::max<std::size_t>(1, kInferenceBatch / per_example);
  const std::size_t image_size = config.image_size();

  Rng rng = make_rng(options.seed, 0);
  CepResult result;
  std::vector<double> sum_core, sum_spu, sum_cep;
  std::vector<std::size_t> defined;
  double total_cep = 0.0;
  std::size_t total_defined = 0;

  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t end = std::min(n, begin + chunk);
    const std::size_t count = end - begin;
    std::vector<float> pixels;
    pixels.reserve(count * per_example * image_size);
    for (std::size_t i = begin; i < end; ++i) {
      const auto& x = split.examples[i];
      pixels.insert(pixels.end(), x.image.begin(), x.image.end());
      for (Component comp : {Component::core, Component::spurious}) {
        for (auto d : draw_donors(split.size(), i, m, rng)) {
          const auto img = apply_intervention(x, split.examples[d], comp, config);
          pixels.insert(pixels.end(), img.begin(), img.end());
        }
      }
    }
    Shape shape{count * per_example};
    for (auto s : config.image_shape()) shape.push_back(s);
    const auto out = probe(Tensor(shape, std::move(pixels)));
    const std::size_t elements = out.elements, entries = out.entries;
    const std::size_t stride = elements * entries;
    if (result.elements.empty()) {
      result.elements.resize(elements);
      sum_core.assign(elements, 0.0);
      sum_spu.assign(elements, 0.0);
      sum_cep.assign(elements, 0.0);
      defined.assign(elements, 0);
    } else if (result.elements.size() != elements) {
      throw DimensionError("probe changed its element count between batches");
    }

    for (std::size_t local = 0; local < count; ++local) {
      const double* base = out.values.data() + local * per_example * stride;
      for (std::size_t e = 0; e < elements; ++e) {
        const double* ref = base + e * entries;
        double e_core = 0.0, e_spu = 0.0;
        for (std::size_t d = 0; d < m; ++d) {
          const double* vc = base + (1 + d) * stride + e * entries;
          const double* vs = base + (1 + m + d) * stride + e * entries;
          for (std::size_t k = 0; k < entries; ++k) {
            e_core += std::abs(vc[k] - ref[k]);
            e_spu += std::abs(vs[k] - ref[k]);
          }
        }
        e_core /= static_cast<double>(m);
        e_spu /= static_cast<double>(m);
        if (options.swap_components) std::swap(e_core, e_spu);
        sum_core[e] += e_core;
        sum_spu[e] += e_spu;
        const double denom = e_core + e_spu;
        if (!(denom >= options.epsilon)) {
          ++result.excluded;
          continue;
        }
        const double value = 100.0 * e_core / denom;
        sum_cep[e] += value;
        ++defined[e];
        total_cep += value;
        ++total_defined;
      }
    }
  }

  result.evaluated = n;
  for (std::size_t e = 0; e < result.elements.size(); ++e) {
    auto& el = result.elements[e];
    el.e_core = sum_core[e] / static_cast<double>(n);
    el.e_spu = sum_spu[e] / static_cast<double>(n);
    el.defined = defined[e];
    el.cep = defined[e] ? sum_cep[e] / static_cast<double>(defined[e]) : kNaN;
  }
  if (total_defined == 0) throw MetricError("CEP undefined: no element responded to either intervention");
  result.aggregate = total_cep / static_cast<double>(total_defined);
  return result;
}

std::vector<double> element_ceps(const CepResult& result) {
  std::vector<double> out;
  for (const auto& el : result.elements)
    if (el.defined) out.push_back(el.cep);
  return out;
}

void write_cep_csv(const CepResult& result, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << "element_id,E_core,E_spu,cep\n";
  out.precision(10);
  for (std::size_t e = 0; e < result.elements.size(); ++e) {
    const auto& el = result.elements[e];
    out << e << ',' << el.e_core << ',' << el.e_spu << ',';
    if (el.defined) out << el.cep;
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// CAP

namespace {

// Running sums of per-example bottom/total ratios, so that batched passes
// give exactly the same value as one pass over the whole split.
struct CapAccumulator {
  std::vector<double> ratio_sum;
  std::vector<std::size_t> used;
  std::vector<std::size_t> excluded;

  void add(const Tensor& activations) {
    if (activations.ndim() != 4)
      throw DimensionError("CAP expects activations [N×d×H×W], got " + shape_string(activations.shape()));
    const auto n = activations.dim(0), d = activations.dim(1), h = activations.dim(2), w = activations.dim(3);
    if (ratio_sum.empty()) {
      ratio_sum.assign(d, 0.0);
      used.assign(d, 0);
      excluded.assign(d, 0);
    } else if (ratio_sum.size() != d) {
      throw DimensionError("CAP channel count changed between batches");
    }
    const auto v = activations.data();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        const float* map = v.data() + (i * d + j) * h * w;
        const auto [bottom, total] = bottom_and_total(
            h, w, [&](std::size_t r, std::size_t c) { return std::abs(static_cast<double>(map[r * w + c])); });
        if (total == 0.0) {
          ++excluded[j];
          continue;
        }
        ratio_sum[j] += bottom / total;
        ++used[j];
      }
    }
  }

  CapResult result() const {
    CapResult out;
    out.per_channel.assign(ratio_sum.size(), kNaN);
    out.excluded = excluded;
    for (std::size_t j = 0; j < ratio_sum.size(); ++j)
      if (used[j]) out.per_channel[j] = 100.0 * ratio_sum[j] / static_cast<double>(used[j]);
    return out;
  }
};

}  // namespace

CapResult cap_from_activations(const Tensor& activations) {
  CapAccumulator acc;
  acc.add(activations);
  return acc.result();
}

CapResult cap(const Model<float>& model, const Split& split, const DatasetConfig& config) {
  require_stacked(config, "CAP");
  if (split.empty()) throw MetricError("CAP on an empty split");
  NoGradGuard guard;
  CapAccumulator acc;
  for (std::size_t begin = 0; begin < split.size(); begin += kInferenceBatch) {
    const auto idx = iota_range(begin, std::min(split.size(), begin + kInferenceBatch));
    acc.add(model.backbone.forward(batch_images(split, idx, config)));
  }
  return acc.result();
}

// ---------------------------------------------------------------------------
// GradCAM / CGP

template <typename T>
std::vector<Heatmap> gradcam_from_activation(const Model<T>& model, const BasicTensor<T>& activation,
                                             std::span<const std::int32_t> classes) {
  if (activation.ndim() != 4)
    throw DimensionError("GradCAM expects an activation map [B×d×H×W], got " + shape_string(activation.shape()));
  const auto b = activation.dim(0), d = activation.dim(1), h = activation.dim(2), w = activation.dim(3);
  if (!classes.empty() && classes.size() != b) throw DimensionError("GradCAM: one class per example required");

  // Private frozen copy so no gradient lands on the caller's parameters.
  Model<T> frozen = model.clone();
  frozen.set_trainable(false);
  GradModeGuard mode(true);
  BasicTensor<T> leaf = activation.detach();
  leaf.set_requires_grad(true);
  const auto logits = frozen.head(leaf);
  std::vector<std::int32_t> targets(classes.begin(), classes.end());
  if (targets.empty()) {
    const auto lv = logits.data();
    const auto c = logits.dim(1);
    targets.resize(b);
    for (std::size_t i = 0; i < b; ++i)
      targets[i] = static_cast<std::int32_t>(std::max_element(lv.data() + i * c, lv.data() + (i + 1) * c) -
                                             (lv.data() + i * c));
  }
  // Examples are independent, so one backward pass of the summed target
  // logits yields every per-example gradient.
  sum(pick(logits, std::span<const std::int32_t>(targets))).backward();
  const auto grad = leaf.grad();
  const auto act = leaf.data();

  std::vector<Heatmap> maps(b);
  const std::size_t hw = h * w;
  for (std::size_t i = 0; i < b; ++i) {
    auto& map = maps[i];
    map.height = h;
    map.width = w;
    map.target_class = targets[i];
    map.channel_weights.assign(d, 0.0);
    map.values.assign(hw, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t off = (i * d + j) * hw;
      double g = 0.0;
      for (std::size_t p = 0; p < hw; ++p) g += static_cast<double>(grad[off + p]);
      map.channel_weights[j] = g / static_cast<double>(hw);
    }
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t off = (i * d + j) * hw;
      const double wj = map.channel_weights[j];
      for (std::size_t p = 0; p < hw; ++p) map.values[p] += wj * static_cast<double>(act[off + p]);
    }
    bool any = false;
    for (auto& v : map.values) {
      v = std::max(v, 0.0);
      any = any || v > 0.0;
    }
    map.all_zero = !any;
  }
  return maps;
}

template std::vector<Heatmap> gradcam_from_activation<float>(const Model<float>&, const Tensor&,
                                                             std::span<const std::int32_t>);
template std::vector<Heatmap> gradcam_from_activation<double>(const Model<double>&, const Tensor64&,
                                                              std::span<const std::int32_t>);

std::vector<Heatmap> gradcam(const Model<float>& model, const Tensor& images, std::span<const std::int32_t> classes) {
  Tensor activation;
  {
    NoGradGuard guard;
    activation = model.backbone.forward(images);
  }
  return gradcam_from_activation(model, activation, classes);
}

CgpResult cgp(const std::vector<Heatmap>& heatmaps) {
  CgpResult out;
  double acc = 0.0;
  std::size_t used = 0;
  for (const auto& map : heatmaps) {
    const auto [bottom, total] =
        bottom_and_total(map.height, map.width, [&](std::size_t r, std::size_t c) { return map.values[r * map.width + c]; });
    if (map.all_zero || total <= 0.0) {
      ++out.excluded;
      continue;
    }
    acc += bottom / total;
    ++used;
  }
  if (used == 0) throw MetricError("CGP undefined: every heatmap is all-zero");
  out.value = 100.0 * acc / static_cast<double>(used);
  return out;
}

CgpResult cgp(const Model<float>& model, const Split& split, const DatasetConfig& config) {
  require_stacked(config, "CGP");
  std::vector<Heatmap> maps;
  maps.reserve(split.size());
  for (std::size_t begin = 0; begin < split.size(); begin += kInferenceBatch) {
    const auto idx = iota_range(begin, std::min(split.size(), begin + kInferenceBatch));
    auto part = gradcam(model, batch_images(split, idx, config));
    for (auto& m : part) maps.push_back(std::move(m));
  }
  return cgp(maps);
}

std::vector<double> upsample_nearest(const Heatmap& map, std::size_t height, std::size_t width) {
  std::vector<double> out(height * width);
  for (std::size_t r = 0; r < height; ++r) {
    const std::size_t sr = std::min(map.height - 1, r * map.height / height);
    for (std::size_t c = 0; c < width; ++c) {
      const std::size_t sc = std::min(map.width - 1, c * map.width / width);
      out[r * width + c] = map.values[sr * map.width + sc];
    }
  }
  return out;
}

void write_pgm(const std::vector<double>& values, std::size_t height, std::size_t width,
               const std::filesystem::path& path) {
  if (values.size() != height * width) throw DimensionError("write_pgm: size mismatch");
  double peak = 0.0;
  for (double v : values) peak = std::max(peak, v);
  auto out = open_output(path);
  out << "P2\n" << width << ' ' << height << "\n255\n";
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const double v = peak > 0.0 ? values[r * width + c] / peak : 0.0;
      out << static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) << (c + 1 == width ? '\n' : ' ');
    }
  }
}

// ---------------------------------------------------------------------------
// Histograms

Histogram histogram(std::span<const double> values, std::size_t bins, double lo, double hi) {
  if (bins < 2) throw ConfigError("bins", "need at least 2 bins");
  if (values.empty()) throw MetricError("histogram of no values");
  if (!(hi > lo)) throw ConfigError("range", "histogram range is empty");
  Histogram out;
  out.edges.resize(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b)
    out.edges[b] = lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins);
  out.counts.assign(bins, 0);
  for (double v : values) {
    if (!std::isfinite(v)) continue;
    if (v < lo || v > hi) throw MetricError("histogram value " + std::to_string(v) + " outside range");
    auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
    b = std::min(b, bins - 1);
    // Guard against rounding at interior edges.
    while (b > 0 && v < out.edges[b]) --b;
    while (b + 1 < bins && v >= out.edges[b + 1]) ++b;
    ++out.counts[b];
  }
  return out;
}

void write_histogram_csv(const Histogram& hist, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t b = 0; b < hist.counts.size(); ++b)
    out << hist.edges[b] << ',' << hist.edges[b + 1] << ',' << hist.counts[b] << '\n';
}

}  // namespace dar
