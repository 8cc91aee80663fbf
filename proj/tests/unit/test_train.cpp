#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "dar/train.hpp"
#include "support/gradcheck.hpp"

using namespace dar;

namespace {

DatasetConfig tiny_data_config() {
  DatasetConfig cfg;
  cfg.image_height = 16;
  cfg.image_width = 8;
  cfg.train = 160;
  cfg.target = 32;
  cfg.val = 32;
  cfg.test = 64;
  cfg.noise_core = 0.3;
  cfg.core_jitter = 1;
  return cfg;
}

const DatasetSplits& tiny_data() {
  static const DatasetSplits data = generate(tiny_data_config(), 7);
  return data;
}

HyperParams quick_hp(std::size_t epochs = 2) {
  HyperParams hp;
  hp.epochs = epochs;
  hp.batch_size = 32;
  return hp;
}

const TrainedBundle& tiny_base() {
  static const TrainedBundle base = train_erm(tiny_data(), quick_hp(3), {}, 1);
  return base;
}

bool same_parameters(const Model<float>& a, const Model<float>& b) {
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first) return false;
    if (!std::equal(pa[i].second.data().begin(), pa[i].second.data().end(), pb[i].second.data().begin(),
                    pb[i].second.data().end()))
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("hyperparameter validation and parsing") {
  HyperParams hp;
  hp.lr = 0;
  CHECK_THROWS_AS(hp.validate(), ConfigError);
  hp = {};
  hp.batch_size = 0;
  CHECK_THROWS_AS(hp.validate(), ConfigError);
  hp = {};
  hp.reg_strength = -1;
  CHECK_THROWS_AS(hp.validate(), ConfigError);
  CHECK(parse_retrain_variant("DAR_Spu") == RetrainVariant::dar_spu);
  CHECK_THROWS_AS(parse_retrain_variant("GAP"), ConfigError);
  CHECK(parse_sampler("reweight") == Sampler::reweight);
  CHECK(parse_reg_type("l2") == RegType::l2);
}

TEST_CASE("one epoch of train_erm equals a hand-written plain cross-entropy loop") {
  const auto& data = tiny_data();
  const auto& cfg = data.config;
  auto hp = quick_hp(1);
  hp.sd_lambda = 0.0;
  const auto bundle = train_erm(data, hp, {}, 5);

  // Reference: same init stream, same order stream, Adam, plain CE.
  Model<float> m;
  Rng init = make_rng(5, 10);
  m.backbone = Backbone<float>::init(1, preset_blocks(BackbonePreset::small), init);
  m.classifier = Classifier<float>::init(32, cfg.classes, false, init);
  m.set_trainable(true);
  AdamOptions opt;
  opt.lr = hp.lr;
  opt.weight_decay = hp.weight_decay;
  Adam<float> adam(m.parameters(), opt);
  Rng order_rng = make_rng(5, 11);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle_in_place(order, order_rng);
  for (std::size_t begin = 0; begin < order.size(); begin += hp.batch_size) {
    std::span<const std::size_t> idx(order.data() + begin, std::min(hp.batch_size, order.size() - begin));
    const auto y = batch_labels(data.train, idx, false);
    cross_entropy(m.logits(batch_images(data.train, idx, cfg)), std::span<const std::int32_t>(y)).backward();
    adam.step();
    adam.zero_grad();
  }
  CHECK(bundle.best_epoch == 1);
  CHECK(same_parameters(bundle.model, m));
}

TEST_CASE("same seed and hyperparameters give bitwise identical bundles") {
  const auto a = train_erm(tiny_data(), quick_hp(2), {}, 3);
  const auto b = train_erm(tiny_data(), quick_hp(2), {}, 3);
  CHECK(same_parameters(a.model, b.model));
  CHECK(a.history.back().train_loss == b.history.back().train_loss);
  const auto c = train_erm(tiny_data(), quick_hp(2), {}, 4);
  CHECK_FALSE(same_parameters(a.model, c.model));

  RetrainOptions opt;
  opt.dar.heads = 2;
  const auto ra = retrain_posthoc(tiny_base(), RetrainVariant::dar, tiny_data(), quick_hp(2), 9, opt);
  const auto rb = retrain_posthoc(tiny_base(), RetrainVariant::dar, tiny_data(), quick_hp(2), 9, opt);
  CHECK(same_parameters(ra.model, rb.model));
}

TEST_CASE("spectral decoupling changes training only when enabled") {
  auto hp = quick_hp(1);
  auto sd = hp;
  sd.sd_lambda = 0.5;
  const auto a = train_erm(tiny_data(), hp, {}, 2);
  const auto b = train_erm(tiny_data(), sd, {}, 2);
  CHECK_FALSE(same_parameters(a.model, b.model));
}

TEST_CASE("subsampling a balanced train split trains exactly like plain sampling") {
  auto data = tiny_data();
  data.train = data.val;  // group-balanced
  ErmOptions sub;
  sub.sampler = Sampler::subsample;
  const auto a = train_erm(data, quick_hp(1), {}, 6);
  const auto b = train_erm(data, quick_hp(1), sub, 6);
  CHECK(same_parameters(a.model, b.model));
}

TEST_CASE("reweighting equalizes per-group weight mass") {
  const auto& train = tiny_data().train;
  const auto w = reweight_weights(train, 4);
  std::vector<double> mass(16, 0.0);
  for (std::size_t i = 0; i < train.size(); ++i) mass[train.examples[i].group(4)] += w[i];
  const auto counts = group_counts(train, 4);
  std::size_t present = 0;
  for (auto c : counts) present += c > 0;
  for (std::size_t g = 0; g < 16; ++g)
    if (counts[g] > 0) CHECK(mass[g] == doctest::Approx(static_cast<double>(train.size()) / static_cast<double>(present)));
}

TEST_CASE("the returned model is the best epoch's, first occurrence on ties") {
  const auto bundle = train_erm(tiny_data(), quick_hp(5), {}, 8);
  REQUIRE(bundle.history.size() == 5);
  double best = -1;
  std::size_t arg = 0;
  for (const auto& rec : bundle.history)
    if (rec.score > best) {
      best = rec.score;
      arg = rec.epoch;
    }
  CHECK(bundle.best_epoch == arg);
  const auto acc = group_accuracy(bundle.model, tiny_data().val, tiny_data().config);
  CHECK(acc.minority == bundle.history[arg - 1].val.minority);
  CHECK(acc.average == bundle.history[arg - 1].val.average);
}

TEST_CASE("non-finite loss aborts with epoch, batch and learning rate") {
  auto data = tiny_data();
  data.train.examples[0].image[3] = std::numeric_limits<float>::quiet_NaN();
  try {
    train_erm(data, quick_hp(1), {}, 0);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    const std::string msg = e.what();
    INFO(msg);
    CHECK(msg.find("epoch 1") != std::string::npos);
    CHECK(msg.find("batch") != std::string::npos);
    CHECK(msg.find("lr=") != std::string::npos);
  }
}

TEST_CASE("retraining changes exactly the declared parameter set") {
  const auto& base = tiny_base();
  const auto before = base.model.named_parameters();
  RetrainOptions opt;
  opt.dar.heads = 2;
  for (auto v : {RetrainVariant::dfr, RetrainVariant::dfr_fc, RetrainVariant::dfr_cnn, RetrainVariant::dar,
                 RetrainVariant::dar_spu}) {
    INFO(to_string(v));
    const auto r = retrain_posthoc(base, v, tiny_data(), quick_hp(2), 3, opt);
    const auto declared = trainable_parameter_names(v, r.model);
    const std::set<std::string> declared_set(declared.begin(), declared.end());
    std::set<std::string> changed;
    for (const auto& [name, t] : r.model.named_parameters()) {
      auto it = std::find_if(before.begin(), before.end(), [&](const auto& p) { return p.first == name; });
      if (it == before.end() || it->second.shape() != t.shape() ||
          !std::equal(t.data().begin(), t.data().end(), it->second.data().begin()))
        changed.insert(name);
    }
    CHECK(changed == declared_set);
    // The base bundle itself is untouched.
    CHECK(same_parameters(base.model, tiny_base().model));
    CHECK(r.predicts_attribute == (v == RetrainVariant::dar_spu));
  }
}

TEST_CASE("retraining preconditions") {
  auto data = tiny_data();
  data.target = data.train;  // not balanced
  CHECK_THROWS_AS(retrain_posthoc(tiny_base(), RetrainVariant::dfr, data, quick_hp(1), 0), ContractError);

  auto dar_base = tiny_base();
  RetrainOptions opt;
  opt.dar.heads = 2;
  dar_base = retrain_posthoc(tiny_base(), RetrainVariant::dar, tiny_data(), quick_hp(1), 0, opt);
  CHECK_THROWS_AS(retrain_posthoc(dar_base, RetrainVariant::dfr, tiny_data(), quick_hp(1), 0), ConfigError);

  RetrainOptions warm;
  warm.warm_start = true;
  CHECK_THROWS_AS(retrain_posthoc(tiny_base(), RetrainVariant::dar, tiny_data(), quick_hp(1), 0, warm), ConfigError);
  const auto w = retrain_posthoc(tiny_base(), RetrainVariant::dfr, tiny_data(), quick_hp(1), 0, warm);
  CHECK(w.model.classifier.weight.size() == tiny_base().model.classifier.weight.size());
}

TEST_CASE("huge L2 penalty drives DFR weights to zero and accuracy to chance") {
  // A single long epoch so the early-stopping pick is the end state.
  auto cfg = tiny_data_config();
  cfg.target = 320;
  const auto data = generate(cfg, 7);
  auto hp = quick_hp(1);
  hp.batch_size = 1;
  hp.lr = 1e-2;
  hp.reg_type = RegType::l2;
  hp.reg_strength = 1e6;
  const auto r = retrain_posthoc(tiny_base(), RetrainVariant::dfr, data, hp, 0);
  auto plain = hp;
  plain.reg_strength = 0;
  const auto free = retrain_posthoc(tiny_base(), RetrainVariant::dfr, data, plain, 0);
  auto norm = [](const Model<float>& m) {
    double s = 0;
    for (float v : m.classifier.weight.data()) s += static_cast<double>(v) * v;
    return std::sqrt(s);
  };
  INFO("penalized " << norm(r.model) << " free " << norm(free.model));
  CHECK(norm(r.model) < 1e-2 * norm(free.model));
  const auto acc = group_accuracy(r.model, data.test, cfg);
  CHECK(std::abs(acc.average - 25.0) <= 10.0);
}

TEST_CASE("grid search: singleton, divergence and argmax of the table") {
  auto run = [](const HyperParams& hp) { return train_erm(tiny_data(), hp, {}, 0); };
  const auto single = grid_search(run, {quick_hp(1)});
  CHECK(single.best_index == 0);
  CHECK(single.cells.size() == 1);

  auto bad = quick_hp(2);
  bad.lr = 1e6;
  const auto pair = grid_search(run, {bad, quick_hp(2)});
  CHECK(pair.best_index == 1);
  if (pair.cells[0].diverged) CHECK(pair.cells[0].minority_val == -std::numeric_limits<double>::infinity());

  auto base = quick_hp(2);
  const auto grid = expand_grid(base, {1e-3, 1e-4}, {1e-3, 1e-4}, {32, 64}, {});
  REQUIRE(grid.size() == 8);
  const auto result = grid_search(run, grid);
  // External argmax over the emitted table.
  std::size_t best = 0;
  for (std::size_t i = 1; i < result.cells.size(); ++i) {
    const auto& c = result.cells[i];
    const auto& b = result.cells[best];
    const auto key = [](const GridCell& g) {
      return std::make_tuple(g.minority_val, g.average_val, -g.hp.lr, -g.hp.weight_decay,
                             -static_cast<double>(g.hp.batch_size));
    };
    if (key(c) > key(b)) best = i;
  }
  CHECK(result.best_index == best);
  CHECK(result.best.key() == result.cells[best].hp.key());
}

TEST_CASE("grid tie-breaking") {
  std::vector<GridCell> cells(3);
  cells[0].hp.lr = 1e-3;
  cells[1].hp.lr = 1e-4;
  cells[2].hp.lr = 1e-2;
  for (auto& c : cells) {
    c.minority_val = 80;
    c.average_val = 90;
  }
  CHECK(select_best(cells) == 1);
  cells[2].average_val = 91;
  CHECK(select_best(cells) == 2);
  cells[0].minority_val = 81;
  CHECK(select_best(cells) == 0);
  CHECK_THROWS_AS(select_best({}), ConfigError);
}

TEST_CASE("seed aggregation") {
  auto stats = run_seeds([](std::uint64_t s) { return SeedMetrics{{"x", static_cast<double>(s)}, {"c", 4.0}}; },
                         {1, 2, 3});
  CHECK(stats["x"].mean == doctest::Approx(2.0));
  CHECK(stats["x"].std == doctest::Approx(std::sqrt(2.0 / 3.0)));
  CHECK(stats["x"].values == std::vector<double>{1, 2, 3});
  CHECK(stats["c"].std == 0.0);
  CHECK_THROWS_AS(run_seeds([](std::uint64_t) { return SeedMetrics{}; }, {1}), ContractError);
  CHECK_THROWS_AS(aggregate_seeds({{{"a", 1.0}}, {{"b", 1.0}}}), ContractError);
}
