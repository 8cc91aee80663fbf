#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dar/ops.hpp"
#include "dar/rng.hpp"
#include "dar/tensor.hpp"

namespace dar {

// ---------------------------------------------------------------------------
// Backbone

enum class BackbonePreset { small, medium, large };

std::string to_string(BackbonePreset preset);
BackbonePreset parse_preset(const std::string& text);

struct BlockSpec {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  bool pool = true;  // 2x2 max pool after the relu
};

/// conv(3x3, same padding) -> relu -> [maxpool 2x2] per block. The last
/// block never pools so the feature map keeps enough resolution for spatial
/// aggregation: a 32x16 input becomes 8x4.
std::vector<BlockSpec> preset_blocks(BackbonePreset preset);

template <typename T>
struct Backbone {
  std::size_t in_channels = 1;
  std::vector<BlockSpec> blocks;
  std::vector<BasicTensor<T>> kernels;  // [O×C×k×k]
  std::vector<BasicTensor<T>> biases;   // [O]

  /// He-normal kernels, zero biases.
  static Backbone init(std::size_t in_channels, std::vector<BlockSpec> blocks, Rng& rng);

  std::size_t out_channels() const { return blocks.back().out_channels; }
  /// Spatial extent of the final activation map for an h×w input.
  std::pair<std::size_t, std::size_t> output_hw(std::size_t height, std::size_t width) const;

  /// Runs blocks [first, last) on x ([B×C×H×W]).
  BasicTensor<T> forward_blocks(const BasicTensor<T>& x, std::size_t first, std::size_t last) const;
  /// Full stack: the activation map A [B×d×H×W].
  BasicTensor<T> forward(const BasicTensor<T>& x) const { return forward_blocks(x, 0, blocks.size()); }

  void set_trainable(bool flag);
};

/// Per-channel spatial mean: [B×d×H×W] -> [B×d].
template <typename T>
BasicTensor<T> gap_aggregate(const BasicTensor<T>& activation);

// ---------------------------------------------------------------------------
// Attention aggregation

struct DarConfig {
  std::size_t queries = 4;
  std::size_t heads = 4;
  std::size_t layers = 2;
  bool positional = false;

  void validate(std::size_t channels) const;
};

/// Projection matrices of one multi-head attention layer. Head t's
/// W_Q^t/W_K^t/W_V^t is the column block [t·d_head, (t+1)·d_head) of the
/// corresponding d×d matrix.
template <typename T>
struct AttentionLayer {
  BasicTensor<T> w_q, w_k, w_v, w_o;
};

/// softmax(Q·Kᵀ/√d')·V. Q [..×q×d'], K [..×n×d'], V [..×n×dv] (2-D or
/// batched 3-D). Returns {output, weights}.
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> sdpa(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                               const BasicTensor<T>& v);

/// Multi-head attention on batched inputs Q [B×q×d], K,V [B×n×d].
/// Returns the output [B×q×d] and the weights [B×heads×q×n].
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> mha(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                              const BasicTensor<T>& v, const AttentionLayer<T>& layer,
                                              std::size_t heads);

template <typename T>
struct DarOutput {
  BasicTensor<T> features;   // h [B×d]
  BasicTensor<T> attention;  // final-layer weights averaged over heads [B×k×HW]
};

template <typename T>
struct DarHead {
  DarConfig config;
  BasicTensor<T> queries;            // [k×d]
  std::vector<AttentionLayer<T>> layers;
  BasicTensor<T> positional;         // [HW×d] when config.positional

  /// N(0, 0.02²) queries and projections; positional table likewise.
  static DarHead init(const DarConfig& config, std::size_t channels, std::size_t spatial, Rng& rng);

  DarOutput<T> forward(const BasicTensor<T>& activation) const;
  std::vector<std::pair<std::string, BasicTensor<T>>> named_parameters() const;
};

/// Q' = MHA(Q, A, A); H = MHA(Q', A, A); h = mean over the k rows of H.
template <typename T>
DarOutput<T> dar_aggregate(const BasicTensor<T>& activation, const DarHead<T>& params) {
  return params.forward(activation);
}

// ---------------------------------------------------------------------------
// Classifier

template <typename T>
struct Classifier {
  BasicTensor<T> weight;  // [d×C]
  BasicTensor<T> bias;    // [C]
  // Optional hidden layer (two-layer head): relu(h·W_h + b_h) first.
  BasicTensor<T> hidden_weight;  // [d×d]
  BasicTensor<T> hidden_bias;    // [d]

  static Classifier init(std::size_t features, std::size_t classes, bool hidden, Rng& rng);

  bool has_hidden() const { return hidden_weight.defined(); }
  BasicTensor<T> forward(const BasicTensor<T>& features) const;
  /// Weight matrices only (the regularised set).
  std::vector<BasicTensor<T>> weights() const;
};

template <typename T>
BasicTensor<T> classify(const BasicTensor<T>& features, const Classifier<T>& params) {
  return params.forward(features);
}

// ---------------------------------------------------------------------------
// Full model

enum class Aggregator { gap, dar };

template <typename T>
struct Model {
  Backbone<T> backbone;
  Aggregator aggregator = Aggregator::gap;
  DarHead<T> dar;
  Classifier<T> classifier;

  BasicTensor<T> aggregate(const BasicTensor<T>& activation) const;
  BasicTensor<T> head(const BasicTensor<T>& activation) const { return classifier.forward(aggregate(activation)); }
  BasicTensor<T> logits(const BasicTensor<T>& images) const { return head(backbone.forward(images)); }

  /// Stable names ("backbone.conv0.weight", "dar.layer1.w_q", ...).
  std::vector<std::pair<std::string, BasicTensor<T>>> named_parameters() const;
  std::vector<BasicTensor<T>> parameters() const;

  /// Deep copy with fresh tensors (no shared storage, no history).
  Model clone() const;
  void set_trainable(bool flag);
};

}  // namespace dar
