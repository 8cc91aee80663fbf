#include "dar/model.hpp"

#include <cmath>

#include "dar/error.hpp"

namespace dar {

namespace {

template <typename T>
BasicTensor<T> gaussian_tensor(Shape shape, double sigma, Rng& rng) {
  std::vector<T> data(numel(shape));
  for (auto& v : data) v = static_cast<T>(sigma * gaussian(rng));
  return BasicTensor<T>(std::move(shape), std::move(data)).set_requires_grad(true);
}

template <typename T>
BasicTensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<T> data(numel(shape));
  for (auto& v : data) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
  return BasicTensor<T>(std::move(shape), std::move(data)).set_requires_grad(true);
}

template <typename T>
BasicTensor<T> zeros(Shape shape) {
  return BasicTensor<T>(std::move(shape), T(0)).set_requires_grad(true);
}

template <typename T>
BasicTensor<T> copy_param(const BasicTensor<T>& t) {
  if (!t.defined()) return {};
  auto out = t.clone();
  out.set_requires_grad(t.requires_grad());
  return out;
}

constexpr double kAttentionInitStd = 0.02;

}  // namespace

std::string to_string(BackbonePreset preset) {
  switch (preset) {
    case BackbonePreset::small: return "small";
    case BackbonePreset::medium: return "medium";
    case BackbonePreset::large: return "large";
  }
  return "small";
}

BackbonePreset parse_preset(const std::string& text) {
  if (text == "small") return BackbonePreset::small;
  if (text == "medium") return BackbonePreset::medium;
  if (text == "large") return BackbonePreset::large;
  throw ConfigError("preset", "expected small, medium or large, got '" + text + "'");
}

std::vector<BlockSpec> preset_blocks(BackbonePreset preset) {
  std::size_t c1 = 16, c2 = 32;
  if (preset == BackbonePreset::medium) c1 = 32, c2 = 64;
  if (preset == BackbonePreset::large) c1 = 64, c2 = 128;
  return {{c1, 3, true}, {c2, 3, true}, {c2, 3, false}};
}

// ---------------------------------------------------------------------------
// Backbone

template <typename T>
Backbone<T> Backbone<T>::init(std::size_t in_channels, std::vector<BlockSpec> blocks, Rng& rng) {
  if (blocks.empty()) throw ConfigError("blocks", "backbone needs at least one block");
  Backbone b;
  b.in_channels = in_channels;
  b.blocks = std::move(blocks);
  std::size_t c = in_channels;
  for (const auto& spec : b.blocks) {
    const double fan_in = static_cast<double>(c * spec.kernel * spec.kernel);
    b.kernels.push_back(gaussian_tensor<T>({spec.out_channels, c, spec.kernel, spec.kernel}, std::sqrt(2.0 / fan_in), rng));
    b.biases.push_back(zeros<T>({spec.out_channels}));
    c = spec.out_channels;
  }
  return b;
}

template <typename T>
std::pair<std::size_t, std::size_t> Backbone<T>::output_hw(std::size_t height, std::size_t width) const {
  for (const auto& spec : blocks) {
    if (spec.pool) {
      height /= 2;
      width /= 2;
    }
  }
  return {height, width};
}

template <typename T>
BasicTensor<T> Backbone<T>::forward_blocks(const BasicTensor<T>& x, std::size_t first, std::size_t last) const {
  BasicTensor<T> h = x;
  for (std::size_t i = first; i < last; ++i) {
    const auto& spec = blocks[i];
    h = relu(conv2d(h, kernels[i], biases[i], 1, spec.kernel / 2));
    if (spec.pool) h = maxpool2d(h, 2, 2);
  }
  return h;
}

template <typename T>
void Backbone<T>::set_trainable(bool flag) {
  for (auto& k : kernels) k.set_requires_grad(flag);
  for (auto& b : biases) b.set_requires_grad(flag);
}

template <typename T>
BasicTensor<T> gap_aggregate(const BasicTensor<T>& activation) {
  if (activation.ndim() != 4) throw DimensionError("gap_aggregate expects [B×d×H×W], got " + shape_string(activation.shape()));
  const std::size_t b = activation.dim(0), d = activation.dim(1), hw = activation.dim(2) * activation.dim(3);
  return mean(reshape(activation, {b, d, hw}), 2);
}

// ---------------------------------------------------------------------------
// Attention

void DarConfig::validate(std::size_t channels) const {
  if (queries < 1) throw ConfigError("queries", "must be >= 1");
  if (heads < 1 || channels % heads != 0) {
    throw ConfigError("heads", "channel count " + std::to_string(channels) + " is not divisible by " +
                                   std::to_string(heads) + " heads");
  }
  if (layers != 1 && layers != 2) throw ConfigError("layers", "must be 1 or 2");
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> sdpa(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                               const BasicTensor<T>& v) {
  const std::size_t key_dim = k.dim(k.ndim() - 1);
  auto scores = scale(matmul(q, transpose(k)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(key_dim))));
  auto weights = softmax(scores, scores.ndim() - 1);
  return {matmul(weights, v), weights};
}

namespace {

// [B×r×d] · W[d×d] split into heads -> [(B·heads)×r×d_head]
template <typename T>
BasicTensor<T> project_heads(const BasicTensor<T>& x, const BasicTensor<T>& w, std::size_t heads) {
  const std::size_t b = x.dim(0), r = x.dim(1), d = x.dim(2), dh = d / heads;
  auto p = matmul(reshape(x, {b * r, d}), w);
  p = permute(reshape(p, {b, r, heads, dh}), {0, 2, 1, 3});
  return reshape(p, {b * heads, r, dh});
}

}  // namespace

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> mha(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                              const BasicTensor<T>& v, const AttentionLayer<T>& layer,
                                              std::size_t heads) {
  if (q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3) throw DimensionError("mha expects batched 3-D inputs");
  const std::size_t b = q.dim(0), rows = q.dim(1), d = q.dim(2), n = k.dim(1);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("heads", "dimension " + std::to_string(d) + " is not divisible by " + std::to_string(heads));
  }
  if (k.dim(2) != d || v.dim(2) != d || v.dim(1) != n || k.dim(0) != b || v.dim(0) != b) {
    throw DimensionError("mha input shapes disagree");
  }
  const std::size_t dh = d / heads;
  auto [out, weights] = sdpa(project_heads(q, layer.w_q, heads), project_heads(k, layer.w_k, heads),
                             project_heads(v, layer.w_v, heads));
  auto merged = permute(reshape(out, {b, heads, rows, dh}), {0, 2, 1, 3});
  auto projected = matmul(reshape(merged, {b * rows, d}), layer.w_o);
  return {reshape(projected, {b, rows, d}), reshape(weights, {b, heads, rows, n})};
}

template <typename T>
DarHead<T> DarHead<T>::init(const DarConfig& config, std::size_t channels, std::size_t spatial, Rng& rng) {
  config.validate(channels);
  DarHead head;
  head.config = config;
  head.queries = gaussian_tensor<T>({config.queries, channels}, kAttentionInitStd, rng);
  for (std::size_t l = 0; l < config.layers; ++l) {
    AttentionLayer<T> layer;
    layer.w_q = gaussian_tensor<T>({channels, channels}, kAttentionInitStd, rng);
    layer.w_k = gaussian_tensor<T>({channels, channels}, kAttentionInitStd, rng);
    layer.w_v = gaussian_tensor<T>({channels, channels}, kAttentionInitStd, rng);
    layer.w_o = gaussian_tensor<T>({channels, channels}, kAttentionInitStd, rng);
    head.layers.push_back(std::move(layer));
  }
  if (config.positional) head.positional = gaussian_tensor<T>({spatial, channels}, kAttentionInitStd, rng);
  return head;
}

template <typename T>
DarOutput<T> DarHead<T>::forward(const BasicTensor<T>& activation) const {
  if (activation.ndim() != 4) throw DimensionError("dar_aggregate expects [B×d×H×W], got " + shape_string(activation.shape()));
  const std::size_t b = activation.dim(0), d = activation.dim(1), hw = activation.dim(2) * activation.dim(3);
  if (queries.dim(1) != d) throw DimensionError("DAR query width does not match channel count");
  auto values = permute(reshape(activation, {b, d, hw}), {0, 2, 1});  // [B×HW×d]
  auto keys = values;
  if (config.positional) {
    if (!positional.defined() || positional.dim(0) != hw || positional.dim(1) != d) {
      throw DimensionError("positional table " + (positional.defined() ? shape_string(positional.shape()) : "[]") +
                           " does not match " + std::to_string(hw) + " locations x " + std::to_string(d) + " channels");
    }
    keys = add(values, repeat_batch(positional, b));
  }
  auto q = repeat_batch(queries, b);
  BasicTensor<T> weights;
  for (const auto& layer : layers) {
    auto [out, w] = mha(q, keys, values, layer, config.heads);
    q = out;
    weights = w;
  }
  DarOutput<T> result;
  result.features = mean(q, 1);
  result.attention = mean(weights, 1);
  return result;
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>>> DarHead<T>::named_parameters() const {
  std::vector<std::pair<std::string, BasicTensor<T>>> out{{"dar.queries", queries}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "dar.layer" + std::to_string(l) + ".";
    out.emplace_back(p + "w_q", layers[l].w_q);
    out.emplace_back(p + "w_k", layers[l].w_k);
    out.emplace_back(p + "w_v", layers[l].w_v);
    out.emplace_back(p + "w_o", layers[l].w_o);
  }
  if (positional.defined()) out.emplace_back("dar.positional", positional);
  return out;
}

// ---------------------------------------------------------------------------
// Classifier

template <typename T>
Classifier<T> Classifier<T>::init(std::size_t features, std::size_t classes, bool hidden, Rng& rng) {
  Classifier c;
  const double bound = 1.0 / std::sqrt(static_cast<double>(features));
  if (hidden) {
    c.hidden_weight = uniform_tensor<T>({features, features}, bound, rng);
    c.hidden_bias = zeros<T>({features});
  }
  c.weight = uniform_tensor<T>({features, classes}, bound, rng);
  c.bias = zeros<T>({classes});
  return c;
}

template <typename T>
BasicTensor<T> Classifier<T>::forward(const BasicTensor<T>& features) const {
  if (features.ndim() != 2 || features.dim(1) != weight.dim(0)) {
    throw DimensionError("classifier expects [B×" + std::to_string(weight.dim(0)) + "] features, got " +
                         shape_string(features.shape()));
  }
  BasicTensor<T> h = features;
  if (has_hidden()) h = relu(add_bias(matmul(h, hidden_weight), hidden_bias));
  return add_bias(matmul(h, weight), bias);
}

template <typename T>
std::vector<BasicTensor<T>> Classifier<T>::weights() const {
  std::vector<BasicTensor<T>> out{weight};
  if (has_hidden()) out.push_back(hidden_weight);
  return out;
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
BasicTensor<T> Model<T>::aggregate(const BasicTensor<T>& activation) const {
  return aggregator == Aggregator::gap ? gap_aggregate(activation) : dar.forward(activation).features;
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>>> Model<T>::named_parameters() const {
  std::vector<std::pair<std::string, BasicTensor<T>>> out;
  for (std::size_t i = 0; i < backbone.kernels.size(); ++i) {
    out.emplace_back("backbone.conv" + std::to_string(i) + ".weight", backbone.kernels[i]);
    out.emplace_back("backbone.conv" + std::to_string(i) + ".bias", backbone.biases[i]);
  }
  if (aggregator == Aggregator::dar) {
    for (auto& p : dar.named_parameters()) out.push_back(std::move(p));
  }
  if (classifier.has_hidden()) {
    out.emplace_back("classifier.hidden_weight", classifier.hidden_weight);
    out.emplace_back("classifier.hidden_bias", classifier.hidden_bias);
  }
  out.emplace_back("classifier.weight", classifier.weight);
  out.emplace_back("classifier.bias", classifier.bias);
  return out;
}

template <typename T>
std::vector<BasicTensor<T>> Model<T>::parameters() const {
  std::vector<BasicTensor<T>> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

template <typename T>
Model<T> Model<T>::clone() const {
  Model m;
  m.backbone.in_channels = backbone.in_channels;
  m.backbone.blocks = backbone.blocks;
  for (const auto& k : backbone.kernels) m.backbone.kernels.push_back(copy_param(k));
  for (const auto& b : backbone.biases) m.backbone.biases.push_back(copy_param(b));
  m.aggregator = aggregator;
  m.dar.config = dar.config;
  m.dar.queries = copy_param(dar.queries);
  for (const auto& l : dar.layers) {
    m.dar.layers.push_back({copy_param(l.w_q), copy_param(l.w_k), copy_param(l.w_v), copy_param(l.w_o)});
  }
  m.dar.positional = copy_param(dar.positional);
  m.classifier.weight = copy_param(classifier.weight);
  m.classifier.bias = copy_param(classifier.bias);
  m.classifier.hidden_weight = copy_param(classifier.hidden_weight);
  m.classifier.hidden_bias = copy_param(classifier.hidden_bias);
  return m;
}

template <typename T>
void Model<T>::set_trainable(bool flag) {
  for (auto& p : parameters()) p.set_requires_grad(flag);
}

#define DAR_INSTANTIATE_MODEL(T)                                                                             \
  template struct Backbone<T>;                                                                              \
  template struct DarHead<T>;                                                                               \
  template struct Classifier<T>;                                                                            \
  template struct Model<T>;                                                                                 \
  template BasicTensor<T> gap_aggregate(const BasicTensor<T>&);                                             \
  template std::pair<BasicTensor<T>, BasicTensor<T>> sdpa(const BasicTensor<T>&, const BasicTensor<T>&,     \
                                                          const BasicTensor<T>&);                           \
  template std::pair<BasicTensor<T>, BasicTensor<T>> mha(const BasicTensor<T>&, const BasicTensor<T>&,      \
                                                         const BasicTensor<T>&, const AttentionLayer<T>&,   \
                                                         std::size_t);

DAR_INSTANTIATE_MODEL(float)
DAR_INSTANTIATE_MODEL(double)

#undef DAR_INSTANTIATE_MODEL

}  // namespace dar
