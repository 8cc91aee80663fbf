#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>

#include "dar/data.hpp"
#include "support/gradcheck.hpp"

using namespace dar;

namespace {

DatasetConfig small_config() {
  DatasetConfig cfg;
  cfg.train = 400;
  cfg.target = 64;
  cfg.val = 64;
  cfg.test = 64;
  return cfg;
}

Split split_with_counts(const std::vector<std::pair<std::pair<int, int>, std::size_t>>& groups) {
  Split s;
  for (const auto& [ya, n] : groups)
    for (std::size_t i = 0; i < n; ++i) {
      DominoExample e;
      e.label = ya.first;
      e.attribute = ya.second;
      s.examples.push_back(e);
    }
  return s;
}

std::size_t diagonal(const std::vector<std::size_t>& counts, std::size_t c) {
  std::size_t d = 0;
  for (std::size_t y = 0; y < c; ++y) d += counts[y * c + y];
  return d;
}

double squared_distance(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

TEST_CASE("train split realizes the spurious strength: 2000 at 0.95") {
  auto cfg = small_config();
  cfg.train = 2000;
  const auto data = generate(cfg, 3);
  // Brute-force tally.
  std::vector<std::size_t> tally(16, 0);
  for (const auto& e : data.train.examples) ++tally[static_cast<std::size_t>(e.label * 4 + e.attribute)];
  CHECK(tally == group_counts(data.train, 4));
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t a = 0; a < 4; ++a) {
      if (y == a)
        CHECK(tally[y * 4 + a] == 475);
      else
        CHECK((tally[y * 4 + a] == 8 || tally[y * 4 + a] == 9));
    }
}

TEST_CASE("strength 0 empties the diagonal and strength 1 the off-diagonal") {
  auto cfg = small_config();
  cfg.spurious_strength = 0.0;
  auto counts = group_counts(generate(cfg, 1).train, 4);
  CHECK(diagonal(counts, 4) == 0);
  cfg.spurious_strength = 1.0;
  counts = group_counts(generate(cfg, 1).train, 4);
  CHECK(diagonal(counts, 4) == cfg.train);
}

TEST_CASE("empirical P(a==y) is within 1/|train| of the configured strength") {
  testing::Rng64 rng(17);
  for (int trial = 0; trial < 25; ++trial) {
    DatasetConfig cfg = small_config();
    cfg.classes = testing::uniform_int(rng, 2, 5);
    cfg.train = cfg.classes * testing::uniform_int(rng, 5, 40);
    const std::size_t g = cfg.classes * cfg.classes;
    cfg.target = cfg.val = cfg.test = g;
    cfg.spurious_strength = testing::uniform(rng, 0.0, 1.0);
    const auto data = generate(cfg, trial);
    const double p = static_cast<double>(diagonal(group_counts(data.train, cfg.classes), cfg.classes)) /
                     static_cast<double>(cfg.train);
    INFO("C=" << cfg.classes << " n=" << cfg.train << " s=" << cfg.spurious_strength);
    CHECK(std::abs(p - cfg.spurious_strength) <= 1.0 / static_cast<double>(cfg.train) + 1e-12);
    CHECK(is_group_balanced(data.target, cfg.classes));
    CHECK(is_group_balanced(data.val, cfg.classes));
    CHECK(is_group_balanced(data.test, cfg.classes));
  }
}

TEST_CASE("target of 400 has 25 per group") {
  auto cfg = small_config();
  cfg.target = 400;
  for (auto n : group_counts(generate(cfg, 0).target, 4)) CHECK(n == 25);
}

TEST_CASE("generation is deterministic and images stay in [0,1]") {
  const auto cfg = small_config();
  const auto a = generate(cfg, 5), b = generate(cfg, 5), c = generate(cfg, 6);
  REQUIRE(a.train.size() == b.train.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train.examples[i].image == b.train.examples[i].image);
    CHECK(a.train.examples[i].label == b.train.examples[i].label);
    differs = differs || a.train.examples[i].image != c.train.examples[i].image;
    for (float v : a.train.examples[i].image) CHECK((v >= 0.0f && v <= 1.0f));
  }
  CHECK(differs);
}

TEST_CASE("config validation") {
  auto cfg = small_config();
  cfg.spurious_strength = 1.5;
  CHECK_THROWS_AS(generate(cfg, 0), ConfigError);
  cfg = small_config();
  cfg.target = 30;
  CHECK_THROWS_AS(generate(cfg, 0), ConfigError);
  cfg = small_config();
  cfg.image_height = 31;
  CHECK_THROWS_AS(generate(cfg, 0), ConfigError);
  cfg = small_config();
  cfg.train = 402;
  try {
    generate(cfg, 0);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "train");
  }
}

TEST_CASE("stacked interventions touch only their panel") {
  const auto cfg = small_config();
  const auto data = generate(cfg, 2);
  const auto& pool = data.test;
  const std::size_t half = cfg.image_height / 2 * cfg.image_width;
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& x = pool.examples[i];
    for (auto comp : {Component::core, Component::spurious}) {
      Rng rng = make_rng(i, 1);
      const auto images = intervene(x, i, pool, {comp, 5}, cfg, rng);
      CHECK(images.size() == 5);
      Rng replay = make_rng(i, 1);
      const auto donors = draw_donors(pool.size(), i, 5, replay);
      for (std::size_t k = 0; k < images.size(); ++k) {
        const auto& d = pool.examples[donors[k]].image;
        const auto& img = images[k];
        CHECK(donors[k] != i);
        const bool core = comp == Component::core;
        CHECK(std::equal(img.begin(), img.begin() + half, (core ? x.image : d).begin()));
        CHECK(std::equal(img.begin() + half, img.end(), (core ? d : x.image).begin() + half));
      }
    }
    CHECK(apply_intervention(x, x, Component::core, cfg) == x.image);
  }
}

TEST_CASE("core then spurious intervention equals direct assembly") {
  const auto cfg = small_config();
  const auto data = generate(cfg, 4);
  const auto& x = data.test.examples[0];
  const auto& d1 = data.test.examples[1];
  const auto& d2 = data.test.examples[2];
  auto step = x;
  step.image = apply_intervention(x, d1, Component::core, cfg);
  const auto both = apply_intervention(step, d2, Component::spurious, cfg);
  const std::size_t half = cfg.image_height / 2 * cfg.image_width;
  std::vector<float> direct(d2.image.begin(), d2.image.begin() + half);
  direct.insert(direct.end(), d1.image.begin() + half, d1.image.end());
  CHECK(both == direct);
}

TEST_CASE("overlap interventions recombine shape and tint") {
  auto cfg = small_config();
  cfg.mode = DataMode::overlap;
  const auto data = generate(cfg, 8);
  const auto& x = data.test.examples[0];
  const auto& d = data.test.examples[5];
  CHECK(x.image.size() == 3 * cfg.image_height * cfg.image_width);
  CHECK(x.image == render_overlap(x.shape_layer, x.tint, cfg));
  CHECK(apply_intervention(x, d, Component::spurious, cfg) == render_overlap(x.shape_layer, d.tint, cfg));
  CHECK(apply_intervention(x, d, Component::core, cfg) == render_overlap(d.shape_layer, x.tint, cfg));
}

TEST_CASE("empty donor pool is a data error") {
  const auto cfg = small_config();
  Split one;
  one.examples.push_back(generate(cfg, 0).test.examples[0]);
  Rng rng(0);
  CHECK_THROWS_AS(intervene(one.examples[0], 0, one, {Component::core, 3}, cfg, rng), DataError);
}

TEST_CASE("donor draws are without replacement and uniform") {
  Rng rng(9);
  std::vector<std::size_t> hits(10, 0);
  for (int t = 0; t < 20000; ++t) {
    auto d = draw_donors(10, 3, 4, rng);
    std::sort(d.begin(), d.end());
    CHECK(std::adjacent_find(d.begin(), d.end()) == d.end());
    for (auto i : d) ++hits[i];
  }
  CHECK(hits[3] == 0);
  // Each of the 9 candidates is chosen with probability 4/9.
  for (std::size_t i = 0; i < 10; ++i)
    if (i != 3) CHECK(std::abs(static_cast<double>(hits[i]) / 20000.0 - 4.0 / 9.0) < 0.02);
}

TEST_CASE("subsample on a balanced split keeps every example") {
  const auto cfg = small_config();
  const auto data = generate(cfg, 1);
  Rng rng(1);
  const auto r = subsample_balanced(data.val, 4, rng);
  CHECK(group_counts(r.split, 4) == group_counts(data.val, 4));
  CHECK(r.excluded_groups.empty());
}

TEST_CASE("subsample reduces to the smallest group and reports empty ones") {
  auto s = split_with_counts({{{0, 0}, 30}, {{0, 1}, 4}, {{1, 1}, 12}});
  Rng rng(2);
  const auto r = subsample_balanced(s, 2, rng);
  CHECK(group_counts(r.split, 2) == std::vector<std::size_t>{4, 4, 0, 4});
  CHECK(r.excluded_groups == std::vector<std::size_t>{2});
}

TEST_CASE("reweight: counts 100,100,10,10") {
  auto s = split_with_counts({{{0, 0}, 100}, {{1, 1}, 100}, {{0, 1}, 10}, {{1, 0}, 10}});
  const auto w = reweight_weights(s, 2);
  CHECK(w[0] == doctest::Approx(0.55));
  CHECK(w[150] == doctest::Approx(0.55));
  CHECK(w[205] == doctest::Approx(5.5));
  CHECK(w[215] == doctest::Approx(5.5));
  CHECK(std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size()) == doctest::Approx(1.0));
}

TEST_CASE("clean templates are separable by a nearest-template classifier") {
  const auto cfg = small_config();
  const std::size_t h = cfg.image_height / 2, w = cfg.image_width;
  for (auto family : {Component::core, Component::spurious}) {
    std::vector<std::vector<float>> templates;
    for (std::size_t c = 0; c < cfg.classes; ++c) templates.push_back(glyph_template(family, c, h, w));
    for (std::size_t c = 0; c < cfg.classes; ++c) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < cfg.classes; ++k)
        if (squared_distance(templates[c], templates[k]) < squared_distance(templates[c], templates[best])) best = k;
      CHECK(best == c);
      for (std::size_t k = 0; k < cfg.classes; ++k)
        if (k != c) CHECK(squared_distance(templates[c], templates[k]) > 4.0);
    }
  }
}

TEST_CASE("dataset dump round-trips") {
  auto cfg = small_config();
  cfg.mode = DataMode::overlap;
  const auto data = generate(cfg, 12);
  const auto path = std::filesystem::temp_directory_path() / "dar_test_dataset.bin";
  save_dataset(data, path);
  const auto back = load_dataset(path);
  std::filesystem::remove(path);
  CHECK(back.seed == 12);
  CHECK(dataset_echo(back.config, back.seed) == dataset_echo(cfg, 12));
  REQUIRE(back.test.size() == data.test.size());
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    CHECK(back.test.examples[i].image == data.test.examples[i].image);
    CHECK(back.test.examples[i].attribute == data.test.examples[i].attribute);
  }
}
