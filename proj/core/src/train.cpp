#include "dar/train.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "dar/error.hpp"

namespace dar {

namespace {

// Substream ids for a training seed.
constexpr std::uint64_t kInitStream = 10;
constexpr std::uint64_t kOrderStream = 11;
constexpr std::uint64_t kSampleStream = 12;

constexpr std::size_t kEvalBatch = 256;

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

/// Per-example tensors kept in memory (frozen activations, raw images).
struct Cache {
  Shape example_shape;
  std::size_t stride = 0;
  std::vector<float> values;

  std::size_t size() const { return stride ? values.size() / stride : 0; }

  Tensor gather(std::span<const std::size_t> idx) const {
    std::vector<float> out(idx.size() * stride);
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(idx[i] * stride), stride,
                  out.begin() + static_cast<std::ptrdiff_t>(i * stride));
    Shape shape{idx.size()};
    shape.insert(shape.end(), example_shape.begin(), example_shape.end());
    return Tensor(shape, std::move(out));
  }
};

/// Runs backbone blocks [0, last) over a split without recording history.
Cache cache_activations(const Backbone<float>& backbone, std::size_t last, const Split& split,
                        const DatasetConfig& config) {
  NoGradGuard guard;
  Cache cache;
  for (std::size_t begin = 0; begin < split.size(); begin += kEvalBatch) {
    std::vector<std::size_t> idx(std::min(kEvalBatch, split.size() - begin));
    std::iota(idx.begin(), idx.end(), begin);
    const auto a = backbone.forward_blocks(batch_images(split, idx, config), 0, last);
    if (cache.stride == 0) {
      cache.example_shape.assign(a.shape().begin() + 1, a.shape().end());
      cache.stride = numel(cache.example_shape);
      cache.values.reserve(split.size() * cache.stride);
    }
    const auto v = a.data();
    cache.values.insert(cache.values.end(), v.begin(), v.end());
  }
  return cache;
}

std::vector<std::int32_t> predict_batched(std::size_t n, const std::function<Tensor(std::span<const std::size_t>)>& logits) {
  NoGradGuard guard;
  std::vector<std::int32_t> out;
  out.reserve(n);
  for (std::size_t begin = 0; begin < n; begin += kEvalBatch) {
    std::vector<std::size_t> idx(std::min(kEvalBatch, n - begin));
    std::iota(idx.begin(), idx.end(), begin);
    const auto p = argmax_rows(logits(idx));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

struct FitProblem {
  std::size_t train_size = 0;
  std::vector<std::int32_t> targets;
  std::vector<float> weights;  // empty = uniform
  std::function<Tensor(std::span<const std::size_t>)> logits;
  /// Validation group accuracy and the early-stopping score.
  std::function<std::pair<GroupAccuracy, double>()> evaluate;
};

/// Shared minibatch loop. Leaves `model` at the best epoch's parameters.
void fit(Model<float>& model, const FitProblem& problem, const HyperParams& hp, std::uint64_t seed,
         const std::string& label, bool verbose, TrainedBundle& bundle) {
  if (problem.train_size == 0) throw DataError(label + ": empty training split");
  AdamOptions opt;
  opt.lr = hp.lr;
  opt.weight_decay = hp.weight_decay;
  Adam<float> adam(model.parameters(), opt);
  Rng order_rng = make_rng(seed, kOrderStream);
  auto order = iota_n(problem.train_size);

  double best_score = -std::numeric_limits<double>::infinity();
  Model<float> best = model.clone();
  bundle.best_epoch = 0;
  for (std::size_t epoch = 1; epoch <= hp.epochs; ++epoch) {
    shuffle_in_place(order, order_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += hp.batch_size) {
      const std::size_t end = std::min(order.size(), begin + hp.batch_size);
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      std::vector<std::int32_t> y(idx.size());
      std::vector<float> w;
      for (std::size_t i = 0; i < idx.size(); ++i) y[i] = problem.targets[idx[i]];
      if (!problem.weights.empty()) {
        w.resize(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) w[i] = problem.weights[idx[i]];
      }
      const auto logits = problem.logits(idx);
      auto loss = cross_entropy(logits, std::span<const std::int32_t>(y), std::span<const float>(w));
      if (hp.sd_lambda > 0.0)
        loss = add(loss, scale(square_sum(logits), static_cast<float>(hp.sd_lambda / (2.0 * static_cast<double>(idx.size())))));
      if (hp.reg_strength > 0.0) {
        for (const auto& wm : model.classifier.weights()) {
          const auto pen = hp.reg_type == RegType::l1 ? abs_sum(wm) : square_sum(wm);
          loss = add(loss, scale(pen, static_cast<float>(hp.reg_strength)));
        }
      }
      auto diverged = [&](const char* what) {
        std::ostringstream msg;
        msg << label << ": non-finite " << what << " at epoch " << epoch << ", batch " << batches + 1
            << " (lr=" << hp.lr << ")";
        return NonFiniteError(msg.str());
      };
      const double value = loss.item();
      if (!std::isfinite(value)) throw diverged("loss");
      loss.backward();
      for (const auto& p : model.parameters())
        if (p.has_grad())
          for (float g : p.grad())
            if (!std::isfinite(g)) throw diverged("gradient");
      adam.step();
      adam.zero_grad();
      loss_sum += value;
      ++batches;
    }
    for (const auto& p : model.parameters())
      if (!p.all_finite()) {
        std::ostringstream msg;
        msg << label << ": non-finite parameter after epoch " << epoch << " (lr=" << hp.lr << ")";
        throw NonFiniteError(msg.str());
      }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    std::tie(rec.val, rec.score) = problem.evaluate();
    if (rec.score > best_score || bundle.best_epoch == 0) {
      best_score = rec.score;
      bundle.best_epoch = epoch;
      best = model.clone();
    }
    if (verbose)
      std::fprintf(stderr, "[%s] epoch %zu loss %.4f val minority %.2f average %.2f\n", label.c_str(), epoch,
                   rec.train_loss, rec.val.minority, rec.val.average);
    bundle.history.push_back(std::move(rec));
  }
  model = std::move(best);
}

void check_base(const TrainedBundle& base) {
  if (base.model.aggregator != Aggregator::gap)
    throw ConfigError("aggregator", "post-hoc retraining needs a GAP-aggregated base model");
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(RegType reg) { return reg == RegType::l1 ? "l1" : "l2"; }

std::string to_string(Sampler sampler) {
  switch (sampler) {
    case Sampler::plain: return "plain";
    case Sampler::subsample: return "subsample";
    case Sampler::reweight: return "reweight";
  }
  return "?";
}

std::string to_string(RetrainVariant variant) {
  switch (variant) {
    case RetrainVariant::dfr: return "DFR";
    case RetrainVariant::dfr_fc: return "DFR_FC";
    case RetrainVariant::dfr_cnn: return "DFR_CNN";
    case RetrainVariant::dar: return "DAR";
    case RetrainVariant::dar_spu: return "DAR_Spu";
  }
  return "?";
}

RegType parse_reg_type(const std::string& text) {
  if (text == "l1") return RegType::l1;
  if (text == "l2") return RegType::l2;
  throw ConfigError("reg_type", "expected l1 or l2, got '" + text + "'");
}

Sampler parse_sampler(const std::string& text) {
  if (text == "plain") return Sampler::plain;
  if (text == "subsample") return Sampler::subsample;
  if (text == "reweight") return Sampler::reweight;
  throw ConfigError("sampler", "expected plain, subsample or reweight, got '" + text + "'");
}

RetrainVariant parse_retrain_variant(const std::string& text) {
  for (auto v : {RetrainVariant::dfr, RetrainVariant::dfr_fc, RetrainVariant::dfr_cnn, RetrainVariant::dar,
                 RetrainVariant::dar_spu})
    if (text == to_string(v)) return v;
  throw ConfigError("variant", "unknown retraining variant '" + text + "'");
}

void HyperParams::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr", "learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size", "must be positive");
  if (epochs == 0) throw ConfigError("epochs", "must be positive");
  if (!(reg_strength >= 0.0)) throw ConfigError("reg_strength", "must be non-negative");
  if (!(sd_lambda >= 0.0)) throw ConfigError("sd_lambda", "must be non-negative");
}

std::string HyperParams::key() const {
  std::ostringstream s;
  s.precision(6);
  s << "lr=" << lr << ",wd=" << weight_decay << ",bs=" << batch_size << ",epochs=" << epochs
    << ",reg=" << to_string(reg_type) << ":" << reg_strength << ",sd=" << sd_lambda;
  return s.str();
}

bool hp_less(const HyperParams& a, const HyperParams& b) {
  auto tie = [](const HyperParams& h) {
    return std::make_tuple(h.lr, h.weight_decay, h.batch_size, h.reg_strength, h.epochs, h.sd_lambda,
                           static_cast<int>(h.reg_type));
  };
  return tie(a) < tie(b);
}

// ---------------------------------------------------------------------------

TrainedBundle train_erm(const DatasetSplits& data, const HyperParams& hp, const ErmOptions& options,
                        std::uint64_t seed) {
  hp.validate();
  const auto& cfg = data.config;
  Split train = options.merge_target ? merge(data.train, data.target) : data.train;
  std::vector<float> weights;
  if (options.sampler == Sampler::subsample) {
    Rng rng = make_rng(seed, kSampleStream);
    train = subsample_balanced(train, cfg.classes, rng).split;
  } else if (options.sampler == Sampler::reweight) {
    const auto w = reweight_weights(train, cfg.classes);
    weights.assign(w.begin(), w.end());
  }

  TrainedBundle bundle;
  bundle.seed = seed;
  bundle.hp = hp;
  bundle.method = options.method;
  Rng init_rng = make_rng(seed, kInitStream);
  bundle.model.backbone = Backbone<float>::init(cfg.channels(), preset_blocks(options.preset), init_rng);
  bundle.model.aggregator = Aggregator::gap;
  bundle.model.classifier =
      Classifier<float>::init(bundle.model.backbone.out_channels(), cfg.classes, false, init_rng);

  Model<float>& model = bundle.model;
  FitProblem problem;
  problem.train_size = train.size();
  problem.targets = batch_labels(train, iota_n(train.size()), false);
  problem.weights = std::move(weights);
  problem.logits = [&](std::span<const std::size_t> idx) { return model.logits(batch_images(train, idx, cfg)); };
  problem.evaluate = [&] {
    auto acc = group_accuracy(model, data.val, cfg);
    const double score = acc.minority;
    return std::make_pair(std::move(acc), score);
  };
  fit(model, problem, hp, seed, options.method, options.verbose, bundle);
  return bundle;
}

std::vector<std::string> trainable_parameter_names(RetrainVariant variant, const Model<float>& model) {
  std::vector<std::string> names;
  const std::string last_block = "backbone.conv" + std::to_string(model.backbone.blocks.size() - 1) + ".";
  for (const auto& [name, t] : model.named_parameters()) {
    const bool classifier = name.rfind("classifier.", 0) == 0;
    const bool attention = name.rfind("dar.", 0) == 0;
    const bool final_block = name.rfind(last_block, 0) == 0;
    switch (variant) {
      case RetrainVariant::dfr:
      case RetrainVariant::dfr_fc:
        if (classifier) names.push_back(name);
        break;
      case RetrainVariant::dfr_cnn:
        if (classifier || final_block) names.push_back(name);
        break;
      case RetrainVariant::dar:
      case RetrainVariant::dar_spu:
        if (classifier || attention) names.push_back(name);
        break;
    }
  }
  return names;
}

TrainedBundle retrain_posthoc(const TrainedBundle& base, RetrainVariant variant, const DatasetSplits& data,
                              const HyperParams& hp, std::uint64_t seed, const RetrainOptions& options) {
  hp.validate();
  check_base(base);
  const auto& cfg = data.config;
  if (!is_group_balanced(data.target, cfg.classes))
    throw ContractError("post-hoc retraining requires a group-balanced target split");
  if (options.warm_start && variant != RetrainVariant::dfr)
    throw ConfigError("warm_start", "warm start is only defined for DFR");

  TrainedBundle bundle;
  bundle.seed = seed;
  bundle.hp = hp;
  bundle.method = to_string(variant);
  bundle.predicts_attribute = variant == RetrainVariant::dar_spu;

  Model<float>& model = bundle.model;
  model = base.model.clone();
  model.set_trainable(false);
  const std::size_t d = model.backbone.out_channels();
  const auto [fh, fw] = model.backbone.output_hw(cfg.image_height, cfg.image_width);
  Rng init_rng = make_rng(seed, kInitStream);
  const bool uses_attention = variant == RetrainVariant::dar || variant == RetrainVariant::dar_spu;
  if (uses_attention) {
    options.dar.validate(d);
    model.aggregator = Aggregator::dar;
    model.dar = DarHead<float>::init(options.dar, d, fh * fw, init_rng);
  }
  if (!options.warm_start)
    model.classifier = Classifier<float>::init(d, cfg.classes, variant == RetrainVariant::dfr_fc, init_rng);
  for (auto& w : std::vector<BasicTensor<float>>{model.classifier.weight, model.classifier.bias,
                                                  model.classifier.hidden_weight, model.classifier.hidden_bias})
    if (w.defined()) w.set_requires_grad(true);
  if (variant == RetrainVariant::dfr_cnn) {
    const auto last = model.backbone.blocks.size() - 1;
    model.backbone.kernels[last].set_requires_grad(true);
    model.backbone.biases[last].set_requires_grad(true);
  }

  // Everything upstream of the first trainable tensor is frozen, so its
  // output is computed once and reused every epoch.
  const std::size_t blocks = model.backbone.blocks.size();
  const std::size_t cut = variant == RetrainVariant::dfr_cnn ? blocks - 1 : blocks;
  const Cache train_cache = cache_activations(model.backbone, cut, data.target, cfg);
  const Cache val_cache = cache_activations(model.backbone, cut, data.val, cfg);
  auto head_logits = [&model, cut, blocks](const Tensor& cached) {
    if (cut == blocks) return model.head(cached);
    return model.head(model.backbone.forward_blocks(cached, cut, blocks));
  };

  const bool attribute = bundle.predicts_attribute;
  FitProblem problem;
  problem.train_size = data.target.size();
  problem.targets = batch_labels(data.target, iota_n(data.target.size()), attribute);
  problem.logits = [&](std::span<const std::size_t> idx) { return head_logits(train_cache.gather(idx)); };
  problem.evaluate = [&] {
    const auto pred = predict_batched(data.val.size(), [&](std::span<const std::size_t> idx) {
      return head_logits(val_cache.gather(idx));
    });
    auto acc = group_accuracy(pred, data.val, cfg.classes, attribute);
    const double score = acc.minority;
    return std::make_pair(std::move(acc), score);
  };
  fit(model, problem, hp, seed, bundle.method, options.verbose, bundle);
  return bundle;
}

// ---------------------------------------------------------------------------

std::size_t select_best(const std::vector<GridCell>& cells) {
  if (cells.empty()) throw ConfigError("grid", "empty hyperparameter grid");
  std::size_t best = 0;
  for (std::size_t i = 1; i < cells.size(); ++i) {
    const auto& c = cells[i];
    const auto& b = cells[best];
    if (c.minority_val > b.minority_val ||
        (c.minority_val == b.minority_val &&
         (c.average_val > b.average_val || (c.average_val == b.average_val && hp_less(c.hp, b.hp)))))
      best = i;
  }
  return best;
}

GridResult grid_search(const GridRunFn& run, const std::vector<HyperParams>& grid) {
  if (grid.empty()) throw ConfigError("grid", "empty hyperparameter grid");
  GridResult result;
  for (const auto& hp : grid) {
    GridCell cell;
    cell.hp = hp;
    try {
      const auto bundle = run(hp);
      const auto& rec = bundle.history.at(bundle.best_epoch - 1);
      cell.minority_val = rec.score;
      cell.average_val = rec.val.average;
      if (!std::isfinite(cell.minority_val)) throw NonFiniteError("non-finite validation score");
    } catch (const NonFiniteError& e) {
      cell.diverged = true;
      cell.error = e.what();
      cell.minority_val = -std::numeric_limits<double>::infinity();
      cell.average_val = -std::numeric_limits<double>::infinity();
    }
    result.cells.push_back(std::move(cell));
  }
  const std::size_t best = select_best(result.cells);
  result.best_index = best;
  result.best = result.cells[best].hp;
  return result;
}

std::vector<HyperParams> expand_grid(const HyperParams& base, const std::vector<double>& lrs,
                                     const std::vector<double>& weight_decays,
                                     const std::vector<std::size_t>& batch_sizes,
                                     const std::vector<double>& reg_strengths) {
  auto or_base = [](const auto& values, auto fallback) {
    using V = std::decay_t<decltype(fallback)>;
    return values.empty() ? std::vector<V>{fallback} : std::vector<V>(values.begin(), values.end());
  };
  std::vector<HyperParams> grid;
  for (double lr : or_base(lrs, base.lr))
    for (double wd : or_base(weight_decays, base.weight_decay))
      for (std::size_t bs : or_base(batch_sizes, base.batch_size))
        for (double reg : or_base(reg_strengths, base.reg_strength)) {
          HyperParams hp = base;
          hp.lr = lr;
          hp.weight_decay = wd;
          hp.batch_size = bs;
          hp.reg_strength = reg;
          grid.push_back(hp);
        }
  return grid;
}

std::map<std::string, SeedStat> aggregate_seeds(const std::vector<SeedMetrics>& per_seed) {
  if (per_seed.size() < 2) throw ContractError("multi-seed statistics need at least two seeds");
  std::map<std::string, SeedStat> out;
  for (const auto& [key, v] : per_seed.front()) {
    SeedStat stat;
    for (const auto& seed : per_seed) {
      const auto it = seed.find(key);
      if (it == seed.end()) throw ContractError("metric '" + key + "' missing for some seed");
      stat.values.push_back(it->second);
    }
    const double n = static_cast<double>(stat.values.size());
    stat.mean = std::accumulate(stat.values.begin(), stat.values.end(), 0.0) / n;
    double var = 0.0;
    for (double x : stat.values) var += (x - stat.mean) * (x - stat.mean);
    stat.std = std::sqrt(var / n);
    out[key] = std::move(stat);
  }
  return out;
}

std::map<std::string, SeedStat> run_seeds(const std::function<SeedMetrics(std::uint64_t)>& run,
                                          const std::vector<std::uint64_t>& seeds) {
  if (seeds.size() < 2) throw ContractError("multi-seed statistics need at least two seeds");
  std::vector<SeedMetrics> per_seed;
  for (auto s : seeds) per_seed.push_back(run(s));
  return aggregate_seeds(per_seed);
}

}  // namespace dar
