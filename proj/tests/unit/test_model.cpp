#include <doctest.h>

#include <filesystem>
#include <numeric>

#include "dar/checkpoint.hpp"
#include "dar/model.hpp"
#include "support/gradcheck.hpp"
#include "support/model_oracles.hpp"

using namespace dar;
using namespace dar::testing;

TEST_CASE("small preset maps 32x16 to 8x4 with 32 channels") {
  Rng rng(1);
  auto bb = Backbone<float>::init(1, preset_blocks(BackbonePreset::small), rng);
  CHECK(bb.out_channels() == 32);
  CHECK(bb.output_hw(32, 16) == std::pair<std::size_t, std::size_t>{8, 4});
  auto a = bb.forward(Tensor({2, 1, 32, 16}, 0.5f));
  CHECK(a.shape() == Shape{2, 32, 8, 4});
  CHECK(preset_blocks(BackbonePreset::medium).back().out_channels == 64);
  CHECK(preset_blocks(BackbonePreset::large).back().out_channels == 128);
  CHECK_THROWS_AS(parse_preset("huge"), ConfigError);
}

TEST_CASE("zero input with zero biases gives an exactly zero activation map") {
  Rng rng(2);
  auto bb = Backbone<double>::init(1, preset_blocks(BackbonePreset::small), rng);
  auto a = bb.forward(Tensor64({1, 1, 32, 16}, 0.0));
  for (double v : a.data()) CHECK(v == 0.0);
}

TEST_CASE("bias-free relu backbone is positively homogeneous") {
  Rng rng(3);
  Rng64 r(3);
  auto bb = Backbone<double>::init(1, preset_blocks(BackbonePreset::small), rng);
  auto x = random_tensor(r, {2, 1, 32, 16}, 0.0, 1.0);
  auto a1 = bb.forward(x);
  auto a2 = bb.forward(scale(x, 2.0));
  for (std::size_t i = 0; i < a1.size(); ++i) CHECK(a2.data()[i] == doctest::Approx(2.0 * a1.data()[i]).epsilon(1e-12));
  CHECK(max_abs_diff(bb.forward(x).data(), a1.data()) == 0.0);
}

TEST_CASE("backbone rejects inputs with the wrong channel count") {
  Rng rng(4);
  auto bb = Backbone<float>::init(1, preset_blocks(BackbonePreset::small), rng);
  CHECK_THROWS_AS(bb.forward(Tensor({1, 3, 32, 16}, 0.0f)), DimensionError);
}

TEST_CASE("gap examples") {
  Tensor64 c({1, 2, 2, 3}, 0.0);
  for (std::size_t i = 0; i < 6; ++i) c.data()[i] = 1.25;
  c.data()[6 + 4] = 6.0;
  auto h = gap_aggregate(c);
  CHECK(h.data()[0] == 1.25);
  CHECK(h.data()[1] == doctest::Approx(1.0));
  Rng64 rng(5);
  auto a = random_tensor(rng, {1, 3, 2, 2});
  CHECK(max_abs_diff(gap_aggregate(a).data(), naive_gap(a)) < 1e-15);
}

TEST_CASE("sdpa examples") {
  Rng64 rng(6);
  // Identical keys: uniform weights, output is the mean of V rows.
  auto q = random_tensor(rng, {3, 2});
  Tensor64 k({4, 2}, {0.3, -0.2, 0.3, -0.2, 0.3, -0.2, 0.3, -0.2});
  auto v = random_tensor(rng, {4, 3});
  auto [out, w] = sdpa(q, k, v);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0;
      for (std::size_t j = 0; j < 4; ++j) m += v.data()[j * 3 + c];
      CHECK(out.data()[i * 3 + c] == doctest::Approx(m / 4).epsilon(1e-12));
    }

  // Saturated: scaled score 50 vs 0 picks that row.
  const double big = 50.0 * std::sqrt(2.0);
  Tensor64 qs({1, 2}, {1.0, 0.0});
  Tensor64 ks({3, 2}, {0.0, 0.0, big, 0.0, 0.0, 1.0});
  auto vs = random_tensor(rng, {3, 2});
  auto sat = sdpa(qs, ks, vs).first;
  CHECK(std::abs(sat.data()[0] - vs.data()[2]) < 1e-6);
  CHECK(std::abs(sat.data()[1] - vs.data()[3]) < 1e-6);

  // Two locations, d'=2, worked by hand: scores (1·2 + 0)/√2 and (0 + 1·0)/√2.
  Tensor64 qh({1, 2}, {1.0, 1.0});
  Tensor64 kh({2, 2}, {2.0, 0.0, 0.0, 0.0});
  Tensor64 vh({2, 1}, {10.0, 20.0});
  const double e = std::exp(2.0 / std::sqrt(2.0));
  const double expected = (e * 10.0 + 1.0 * 20.0) / (e + 1.0);
  CHECK(sdpa(qh, kh, vh).first.item() == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("sdpa matches a naive loop on random instances") {
  Rng64 rng(7);
  for (int t = 0; t < 25; ++t) {
    const auto r = uniform_int(rng, 1, 4), n = uniform_int(rng, 1, 6), dk = uniform_int(rng, 1, 5),
               dv = uniform_int(rng, 1, 4);
    auto q = random_tensor(rng, {r, dk}, -2, 2), k = random_tensor(rng, {n, dk}, -2, 2), v = random_tensor(rng, {n, dv});
    auto out = sdpa(q, k, v).first;
    const auto ref = naive_sdpa({q.data().begin(), q.data().end()}, {k.data().begin(), k.data().end()},
                                {v.data().begin(), v.data().end()}, r, n, dk, dv);
    CHECK(max_abs_diff(out.data(), ref) < 1e-12);
  }
}

TEST_CASE("single identity head reduces mha to sdpa") {
  Rng64 rng(8);
  const std::size_t d = 4;
  auto q = random_tensor(rng, {2, 3, d}), k = random_tensor(rng, {2, 5, d}), v = random_tensor(rng, {2, 5, d});
  AttentionLayer<double> id{identity(d), identity(d), identity(d), identity(d)};
  CHECK(max_abs_diff(mha(q, k, v, id, 1).first.data(), sdpa(q, k, v).first.data()) < 1e-14);
}

TEST_CASE("two-head mha equals manual concat of two sdpa heads times W_O") {
  Rng64 rng(9);
  const std::size_t d = 4, dh = 2, rows = 3, n = 5;
  auto q = random_tensor(rng, {1, rows, d}), k = random_tensor(rng, {1, n, d}), v = random_tensor(rng, {1, n, d});
  AttentionLayer<double> layer{random_tensor(rng, {d, d}), random_tensor(rng, {d, d}), random_tensor(rng, {d, d}),
                               random_tensor(rng, {d, d})};
  auto project = [&](const Tensor64& x, const Tensor64& w, std::size_t head, std::size_t r) {
    std::vector<double> out(r * dh, 0.0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t c = 0; c < dh; ++c)
        for (std::size_t j = 0; j < d; ++j) out[i * dh + c] += x.data()[i * d + j] * w.data()[j * d + head * dh + c];
    return out;
  };
  std::vector<double> concat(rows * d, 0.0);
  for (std::size_t t = 0; t < 2; ++t) {
    const auto o = naive_sdpa(project(q, layer.w_q, t, rows), project(k, layer.w_k, t, n), project(v, layer.w_v, t, n),
                              rows, n, dh, dh);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t c = 0; c < dh; ++c) concat[i * d + t * dh + c] = o[i * dh + c];
  }
  std::vector<double> expected(rows * d, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t j = 0; j < d; ++j) expected[i * d + c] += concat[i * d + j] * layer.w_o.data()[j * d + c];
  CHECK(max_abs_diff(mha(q, k, v, layer, 2).first.data(), expected) < 1e-12);
  CHECK_THROWS_AS(mha(q, k, v, layer, 3), ConfigError);
}

TEST_CASE("GAP-reduction construction reproduces the spatial mean") {
  Rng64 rng(10);
  for (int t = 0; t < 20; ++t) {
    const auto d = uniform_int(rng, 1, 6), h = uniform_int(rng, 2, 5), w = uniform_int(rng, 2, 5);
    auto a = random_tensor(rng, {2, d, h, w}, 0.0, 3.0);
    auto head = gap_reduction_head(d, rng);
    CHECK(max_abs_diff(head.forward(a).features.data(), naive_gap(a)) < 1e-6);
  }
}

TEST_CASE("identical query rows give identical outputs") {
  Rng64 rng(11);
  DarConfig cfg;
  cfg.queries = 2;
  cfg.heads = 2;
  cfg.layers = 1;
  auto head = random_head(cfg, 4, 6, rng, 20.0);
  for (std::size_t c = 0; c < 4; ++c) head.queries.data()[4 + c] = head.queries.data()[c];
  auto a = random_tensor(rng, {1, 4, 3, 2});
  auto q = repeat_batch(head.queries, 1);
  auto values = permute(reshape(a, {1, 4, 6}), {0, 2, 1});
  auto out = mha(q, values, values, head.layers[0], 2).first;
  for (std::size_t c = 0; c < 4; ++c) CHECK(out.data()[c] == out.data()[4 + c]);
  CHECK(max_abs_diff(head.forward(a).features.data(), std::span<const double>(out.data().data(), 4)) < 1e-14);
}

TEST_CASE("attention weights are row-stochastic") {
  Rng64 rng(12);
  for (int t = 0; t < 20; ++t) {
    DarConfig cfg;
    cfg.heads = t % 2 == 0 ? 2 : 4;
    cfg.queries = uniform_int(rng, 1, 4);
    auto head = random_head(cfg, 8, 12, rng, 30.0);
    auto a = random_tensor(rng, {3, 8, 4, 3}, 0.0, 2.0);
    auto attn = head.forward(a).attention;
    CHECK(attn.shape() == Shape{3, cfg.queries, 12});
    for (std::size_t row = 0; row < 3 * cfg.queries; ++row) {
      double s = 0;
      for (std::size_t p = 0; p < 12; ++p) {
        CHECK(attn.data()[row * 12 + p] >= 0.0);
        s += attn.data()[row * 12 + p];
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("spatial permutation invariance holds without positional encoding only") {
  Rng64 rng(13);
  for (int t = 0; t < 20; ++t) {
    DarConfig cfg;
    auto head = random_head(cfg, 8, 12, rng, 30.0);
    auto a = random_tensor(rng, {2, 8, 4, 3}, 0.0, 2.0);
    std::vector<std::size_t> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto h = head.forward(a).features, hp = head.forward(permute_locations(a, perm)).features;
    CHECK(max_abs_diff(h.data(), hp.data()) < 1e-12);

    cfg.positional = true;
    auto pos = random_head(cfg, 8, 12, rng, 30.0);
    std::swap(perm[0], perm[1] == 0 ? perm[2] : perm[1]);  // guarantee a nontrivial permutation
    if (std::is_sorted(perm.begin(), perm.end())) std::swap(perm[0], perm[1]);
    const auto g = pos.forward(a).features, gp = pos.forward(permute_locations(a, perm)).features;
    CHECK(max_abs_diff(g.data(), gp.data()) > 1e-6);
  }
}

TEST_CASE("positional table must match the spatial extent") {
  Rng rng(14);
  DarConfig cfg;
  cfg.positional = true;
  auto head = DarHead<float>::init(cfg, 8, 12, rng);
  CHECK_THROWS_AS(head.forward(Tensor({1, 8, 4, 4}, 1.0f)), DimensionError);
  cfg.heads = 3;
  CHECK_THROWS_AS(DarHead<float>::init(cfg, 8, 12, rng), ConfigError);
  cfg.heads = 4;
  cfg.layers = 3;
  CHECK_THROWS_AS(DarHead<float>::init(cfg, 8, 12, rng), ConfigError);
}

TEST_CASE("one-layer head skips the query update") {
  Rng64 rng(15);
  DarConfig cfg;
  cfg.layers = 1;
  auto head = random_head(cfg, 8, 6, rng, 10.0);
  auto a = random_tensor(rng, {1, 8, 3, 2});
  auto values = permute(reshape(a, {1, 8, 6}), {0, 2, 1});
  auto out = mha(repeat_batch(head.queries, 1), values, values, head.layers[0], 4).first;
  CHECK(max_abs_diff(head.forward(a).features.data(), mean(out, 1).data()) < 1e-14);
  CHECK(head.named_parameters().size() == 5);
}

TEST_CASE("classifier examples") {
  Rng rng(16);
  auto c = Classifier<double>::init(3, 2, false, rng);
  for (auto& v : c.weight.data()) v = 0;
  CHECK(max_abs_diff(c.forward(Tensor64({1, 3}, {1.0, 2.0, 3.0})).data(), std::vector<double>{0, 0}) == 0.0);

  Tensor64 w({3, 2}, {1, 2, 3, 4, 5, 6});
  c.weight = w;
  c.bias = Tensor64({2}, {0.5, -0.5});
  auto logits = c.forward(Tensor64({1, 3}, {0.0, 1.0, 0.0}));
  CHECK(max_abs_diff(logits.data(), std::vector<double>{3.5, 3.5}) < 1e-15);

  Rng64 r(16);
  const std::vector<std::int32_t> labels{1, 0, 1};
  auto h = random_tensor(r, {3, 3});
  auto res = gradcheck(
      [&](const auto& in) {
        Classifier<double> cl;
        cl.weight = in[0];
        cl.bias = in[1];
        return cross_entropy(cl.forward(h), std::span<const std::int32_t>(labels));
      },
      {random_tensor(r, {3, 2}), random_tensor(r, {2})});
  CHECK(res.max_rel_error < 1e-4);

  auto hidden = Classifier<double>::init(3, 2, true, rng);
  CHECK(hidden.has_hidden());
  CHECK(hidden.weights().size() == 2);
  CHECK_THROWS_AS(hidden.forward(Tensor64({1, 4}, 0.0)), DimensionError);
}

TEST_CASE("model clone is deep and freezing clears every flag") {
  Rng rng(17);
  Model<float> m;
  m.backbone = Backbone<float>::init(1, preset_blocks(BackbonePreset::small), rng);
  m.aggregator = Aggregator::dar;
  m.dar = DarHead<float>::init(DarConfig{}, 32, 32, rng);
  m.classifier = Classifier<float>::init(32, 4, false, rng);
  m.set_trainable(true);
  auto copy = m.clone();
  copy.classifier.weight.data()[0] += 1.0f;
  CHECK(copy.classifier.weight.data()[0] != m.classifier.weight.data()[0]);
  m.set_trainable(false);
  for (const auto& p : m.parameters()) CHECK_FALSE(p.requires_grad());
  const auto names = m.named_parameters();
  CHECK(names.front().first == "backbone.conv0.weight");
}

TEST_CASE("checkpoint round trip and mismatch rejection") {
  Rng rng(18);
  Model<float> m;
  m.backbone = Backbone<float>::init(1, preset_blocks(BackbonePreset::small), rng);
  m.aggregator = Aggregator::dar;
  DarConfig cfg;
  cfg.positional = true;
  m.dar = DarHead<float>::init(cfg, 32, 32, rng);
  m.classifier = Classifier<float>::init(32, 4, true, rng);
  const auto path = std::filesystem::temp_directory_path() / "dar_test_model.ckpt";
  save_checkpoint(m, {{"data.hash", "abc"}}, path);
  const auto back = load_checkpoint(path, {{"data.hash", "abc"}});
  const auto a = m.named_parameters(), b = back.model.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(std::equal(a[i].second.data().begin(), a[i].second.data().end(), b[i].second.data().begin()));
  }
  CHECK(back.model.dar.config.positional);
  CHECK_THROWS_AS(load_checkpoint(path, {{"data.hash", "xyz"}}), ConfigError);
  std::filesystem::remove(path);
}
