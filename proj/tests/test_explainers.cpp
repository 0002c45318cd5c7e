#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "faudit/explainers.hpp"
#include "faudit/ops.hpp"
#include "faudit/stats.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace faudit;
using namespace faudit::test;

namespace {

AttentionStack uniform_stack(std::size_t depth, std::size_t tokens) {
  return {depth, 1, tokens,
          std::vector<double>(depth * tokens * tokens, 1.0 / static_cast<double>(tokens))};
}

double max_value(const Heatmap& h) { return *std::max_element(h.values.begin(), h.values.end()); }
double min_value(const Heatmap& h) { return *std::min_element(h.values.begin(), h.values.end()); }

}  // namespace

// ---- Grad-CAM ----

TEST(GradCam, ConstantActivationIsDegenerate) {
  const std::vector<double> a(16, 1.0), g(16, 1.0);
  const auto raw = grad_cam_raw(a, g, 1, 4, 4, 4, 4);
  expect_close(raw, std::vector<double>(16, 1.0), 1e-15);
  const auto map = normalize_heatmap(raw, 4, 4);
  EXPECT_TRUE(map.degenerate);
  EXPECT_EQ(max_value(map), 0.0);
}

TEST(GradCam, NegativeGradientIsZeroedByRelu) {
  Rng rng(1);
  std::vector<double> a(16), g(16, -1.0);
  for (auto& v : a) v = rng.uniform(0.1, 1.0);
  const auto raw = grad_cam_raw(a, g, 1, 4, 4, 4, 4);
  for (double v : raw) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(normalize_heatmap(raw, 4, 4).degenerate);
}

TEST(GradCam, TwoMapHandCaseHasTopLeftHotspot) {
  // A1 = [[1,0],[0,0]] with alpha 1, A2 = [[0,0],[0,1]] with alpha 0.
  const std::vector<double> a = {1, 0, 0, 0, 0, 0, 0, 1};
  const std::vector<double> g = {1, 1, 1, 1, 0, 0, 0, 0};
  const auto raw = grad_cam_raw(a, g, 2, 2, 2, 2, 2);
  expect_close(raw, {1, 0, 0, 0}, 1e-15);
  const auto map = normalize_heatmap(raw, 2, 2);
  expect_close(map.values, {1, 0, 0, 0}, 0.0);
}

TEST(GradCam, InverseRescalingLeavesMapUnchanged) {
  Rng rng(2);
  std::vector<double> a(3 * 4 * 4), g(a.size());
  for (auto& v : a) v = rng.uniform(0, 2);
  for (auto& v : g) v = rng.uniform(-1, 1);
  auto a2 = a, g2 = g;
  for (auto& v : a2) v *= 3.5;
  for (auto& v : g2) v /= 3.5;
  expect_close(grad_cam_raw(a2, g2, 3, 4, 4, 8, 8), grad_cam_raw(a, g, 3, 4, 4, 8, 8), 1e-12);
}

TEST(GradCam, SizeMismatchThrows) {
  const std::vector<double> a(8), g(7);
  EXPECT_THROW(grad_cam_raw(a, g, 2, 2, 2, 4, 4), ExplainerError);
}

TEST(GradCam, CnnMapIsNormalizedAndDeterministic) {
  auto model = make_model(ModelConfig{});
  Rng rng(3);
  const auto image = random_tensor({1, 32, 32}, rng, 0.0, 1.0);
  const auto a = grad_cam(*model, image, 2, default_gradcam_layer(*model));
  const auto b = grad_cam(*model, image, 2, default_gradcam_layer(*model));
  ASSERT_EQ(a.size(), 32u * 32u);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.target_class, 2u);
  EXPECT_EQ(a.explainer, kGradCam);
  if (!a.degenerate) {
    EXPECT_EQ(min_value(a), 0.0);
    EXPECT_EQ(max_value(a), 1.0);
  }
}

TEST(GradCam, CnnMatchesActivationAndGradientFromForwardCapture) {
  auto model = make_model(ModelConfig{});
  Rng rng(4);
  const auto image = random_tensor({1, 32, 32}, rng, 0.0, 1.0);
  const std::string layer = "cbam_out";

  // Independent path: capture the layer, backprop the one-hot logit, combine.
  GradModeGuard on(true);
  auto fwd = model->forward(image, {layer});
  backward(ops::sum(ops::mul(fwd.logits, Tensor::vector({0, 0, 0, 1, 0}))));
  const auto& act = fwd.activation(layer);
  const std::size_t c = act.dim(0), h = act.dim(1), w = act.dim(2);
  std::vector<double> cam(h * w, 0.0);
  const auto g = act.grad();
  for (std::size_t k = 0; k < c; ++k) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < h * w; ++i) alpha += g[k * h * w + i];
    alpha /= static_cast<double>(h * w);
    for (std::size_t i = 0; i < h * w; ++i) cam[i] += alpha * act[k * h * w + i];
  }
  for (auto& v : cam) v = std::max(v, 0.0);
  const auto expected = normalize_heatmap(upsample_bilinear(cam, h, w, 32, 32), 32, 32);

  const auto map = grad_cam(*model, image, 3, layer);
  EXPECT_EQ(map.degenerate, expected.degenerate);
  expect_close(map.values, expected.values, 1e-9);
}

TEST(GradCam, UnknownOrFlatLayerThrows) {
  auto model = make_model(ModelConfig{});
  const auto image = ones_image(32);
  EXPECT_THROW(grad_cam(*model, image, 0, "no_such_layer"), ExplainerError);
  EXPECT_THROW(grad_cam(*model, image, 9, "cbam_out"), ExplainerError);
  const auto names = model->layer_names();
  for (const auto& name : names) {
    if (name == "logits") EXPECT_THROW(grad_cam(*model, image, 0, name), ExplainerError);
  }
}

// The ViT head reads only the CLS row, so patch rows of the last block get
// no gradient; an earlier block gives a usable map.
TEST(GradCam, VitLastBlockIsDegenerateEarlierBlockIsNot) {
  ModelConfig cfg;
  cfg.arch = Arch::vit;
  auto model = make_model(cfg);
  Rng rng(5);
  const auto image = random_tensor({1, 32, 32}, rng, 0.0, 1.0);
  const auto last = grad_cam(*model, image, 1, default_gradcam_layer(*model));
  EXPECT_TRUE(last.degenerate);
  EXPECT_EQ(last.explainer, kGradCamVit);
  const auto earlier =
      grad_cam(*model, image, 1, "block" + std::to_string(cfg.depth - 2) + "_out");
  EXPECT_FALSE(earlier.degenerate);
}

// ---- attention readouts ----

TEST(Rollout, IdentityAttentionIsDegenerate) {
  AttentionStack att{1, 1, 5, std::vector<double>(25, 0.0)};
  for (std::size_t i = 0; i < 5; ++i) att.at(0, 0, i, i) = 1.0;
  const auto row = rollout_cls_row(att);
  expect_close(row, {1, 0, 0, 0, 0}, 0.0);
  EXPECT_TRUE(token_row_heatmap(row, 4, kRollout).degenerate);
}

TEST(Rollout, UniformAttentionGivesEqualPatchMass) {
  const auto row = rollout_cls_row(uniform_stack(1, 5));
  for (std::size_t j = 1; j < 5; ++j) EXPECT_NEAR(row[j], 0.5 / 5.0, 1e-15);
  EXPECT_TRUE(token_row_heatmap(row, 4, kRollout).degenerate);
}

TEST(Rollout, DepthTwoHandBuiltMatchesMatrixProduct) {
  // Tokens: CLS + 4 patches. Layer 1 sends CLS to patch 1; layer 2 mixes.
  AttentionStack att{2, 1, 5, std::vector<double>(50, 0.0)};
  for (std::size_t i = 0; i < 5; ++i) att.at(0, 0, i, i) = 1.0;
  att.at(0, 0, 0, 0) = 0.0;
  att.at(0, 0, 0, 1) = 1.0;
  for (std::size_t i = 0; i < 5; ++i) {
    att.at(1, 0, i, 0) = 0.5;
    att.at(1, 0, i, 3) = 0.5;
  }
  // A1 = 0.5 att1 + 0.5 I: CLS row [0.5, 0.5, 0, 0, 0]; patch rows e_i.
  // A2 CLS row = [0.75, 0, 0, 0.25, 0]; e0^T A2 A1 = 0.75 [0.5,0.5,0,0,0] + 0.25 e3.
  expect_close(rollout_cls_row(att), {0.375, 0.375, 0.0, 0.25, 0.0}, 1e-15);
  expect_close(rollout_cls_row(att), naive_cls_row(att), 1e-15);
}

TEST(Rollout, RandomStacksAreRowStochasticAndMatchOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const auto depth = static_cast<std::size_t>(rng.between(1, 6));
    const auto heads = static_cast<std::size_t>(rng.between(1, 4));
    const auto tokens = static_cast<std::size_t>(rng.between(2, 16));
    const auto att = random_stack(depth, heads, tokens, rng);
    const auto mats = rollout_matrices(att);
    ASSERT_EQ(mats.size(), depth);
    for (const auto& r : mats)
      for (std::size_t i = 0; i < tokens; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < tokens; ++j) s += r[i * tokens + j];
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    expect_close(rollout_cls_row(att), naive_cls_row(att), 1e-12);
  }
}

TEST(Rollout, EmptyStackThrows) {
  EXPECT_THROW(rollout_cls_row(AttentionStack{}), ExplainerError);
  auto model = make_model(ModelConfig{});
  EXPECT_THROW(attention_rollout(*model, ones_image(32)), ExplainerError);
  EXPECT_THROW(cls_attention_last_layer(*model, ones_image(32)), ExplainerError);
}

TEST(ClsLast, DepthOneEqualsHeadMeanRow) {
  Rng rng(7);
  const auto att = random_stack(1, 3, 5, rng);
  const auto row = last_layer_cls_row(att);
  for (std::size_t j = 0; j < 5; ++j) {
    const double m = (att.at(0, 0, 0, j) + att.at(0, 1, 0, j) + att.at(0, 2, 0, j)) / 3.0;
    EXPECT_NEAR(row[j], m, 1e-15);
  }
}

TEST(ClsLast, UniformFinalLayerIsDegenerate) {
  Rng rng(8);
  auto att = random_stack(3, 2, 5, rng);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) att.at(2, h, i, j) = 0.2;
  EXPECT_TRUE(token_row_heatmap(last_layer_cls_row(att), 8, kClsLast).degenerate);
}

TEST(ClsLast, DominantPatchOwnsTheArgmax) {
  auto att = uniform_stack(2, 5);
  for (std::size_t j = 0; j < 5; ++j) att.at(1, 0, 0, j) = j == 2 ? 0.8 : 0.05;
  const auto map = token_row_heatmap(last_layer_cls_row(att), 8, kClsLast);
  // Token 2 is patch 1 of the 2x2 grid: the top-right 4x4 block.
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(map.at(r, c), (r < 4 && c >= 4) ? 1.0 : 0.0);
}

TEST(ClsLast, BadTokenCountThrows) {
  const std::vector<double> row(6, 0.2);
  EXPECT_THROW(token_row_heatmap(row, 8, kClsLast), ExplainerError);
}

TEST(AttentionMaps, VitMapsMatchTheirForwardReadouts) {
  ModelConfig cfg;
  cfg.arch = Arch::vit;
  auto model = make_model(cfg);
  Rng rng(9);
  const auto image = random_tensor({1, 32, 32}, rng, 0.0, 1.0);
  NoGradGuard ng;
  const auto fwd = model->forward(image);
  const auto r = attention_rollout(*model, image);
  const auto c = cls_attention_last_layer(*model, image);
  expect_close(r.values, token_row_heatmap(naive_cls_row(fwd.attention), 32, kRollout).values,
               1e-12);
  expect_close(c.values, token_row_heatmap(last_layer_cls_row(fwd.attention), 32, kClsLast).values,
               0.0);
  EXPECT_EQ(r.target_class, argmax(fwd.logits.data()));
}

// ---- RISE ----

TEST(Rise, SingleFullMaskIsDegenerate) {
  const std::vector<std::vector<double>> masks = {std::vector<double>(16, 1.0)};
  const PredictFn f = [](const Tensor&) { return std::vector<double>{0.2, 0.8}; };
  const auto sal = rise_saliency(f, ones_image(4), 1, masks);
  expect_close(sal, std::vector<double>(16, 0.8), 1e-15);
  EXPECT_TRUE(normalize_heatmap(sal, 4, 4).degenerate);
}

TEST(Rise, DisjointHalfMasks) {
  std::vector<double> left(16, 0.0), right(16, 0.0);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) (c < 2 ? left : right)[r * 4 + c] = 1.0;
  const std::vector<std::vector<double>> masks = {left, right};
  // Class 1 scores 1 when the left half is visible.
  const PredictFn f = [](const Tensor& x) {
    const double p = x[0] > 0.0 ? 1.0 : 0.0;
    return std::vector<double>{1.0 - p, p};
  };
  const auto sal = rise_saliency(f, ones_image(4), 1, masks);
  const auto map = normalize_heatmap(sal, 4, 4);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(sal[i], i % 4 < 2 ? 0.5 : 0.0);
    EXPECT_EQ(map.values[i], i % 4 < 2 ? 1.0 : 0.0);
  }
}

TEST(Rise, LinearScorerRecoversPlantedWeights) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(100 + seed);
    const auto w = planted_ramp(rng);
    RiseConfig cfg;
    cfg.n_masks = 4000;
    cfg.grid = 8;
    cfg.p = 0.5;
    cfg.seed = seed;
    const auto map = rise(linear_scorer(w), ones_image(16), 1, cfg);
    const auto rho = stats::spearman(map.values, w);
    ASSERT_TRUE(rho.has_value());
    EXPECT_GE(*rho, 0.9) << "seed " << seed;
  }
}

// A model that ignores its input leaves only the mask statistics.
TEST(Rise, ConstantModelMapIsTheMaskAverage) {
  const PredictFn f = [](const Tensor&) { return std::vector<double>{0.3, 0.7}; };
  RiseConfig cfg;
  cfg.n_masks = 50;
  cfg.seed = 11;
  const auto map = rise(f, ones_image(16), 1, cfg);
  std::vector<double> sum(256, 0.0);
  for (std::size_t i = 0; i < cfg.n_masks; ++i) {
    const auto m = rise_mask(cfg, i, 16, 16);
    for (std::size_t p = 0; p < 256; ++p) sum[p] += m[p];
  }
  const auto expected = normalize_heatmap(sum, 16, 16);
  expect_close(map.values, expected.values, 1e-12);
  EXPECT_NEAR(map.raw_max, 0.7 * expected.raw_max / 50.0, 1e-12);
}

TEST(Rise, DoublingScoresDoublesRawMapOnly) {
  std::vector<double> w(64);
  Rng rng(12);
  for (auto& v : w) v = rng.uniform(0, 1.0 / 128.0);
  const auto f = linear_scorer(w);
  const PredictFn f2 = [&f](const Tensor& x) {
    auto p = f(x);
    for (auto& v : p) v *= 2.0;
    return p;
  };
  RiseConfig cfg;
  cfg.n_masks = 200;
  cfg.seed = 3;
  std::vector<std::vector<double>> masks;
  for (std::size_t i = 0; i < cfg.n_masks; ++i) masks.push_back(rise_mask(cfg, i, 8, 8));
  const auto s1 = rise_saliency(f, ones_image(8), 1, masks);
  const auto s2 = rise_saliency(f2, ones_image(8), 1, masks);
  for (std::size_t i = 0; i < s1.size(); ++i) EXPECT_NEAR(s2[i], 2.0 * s1[i], 1e-15);
  expect_close(rise(f2, ones_image(8), 1, cfg).values, rise(f, ones_image(8), 1, cfg).values, 1e-12);
}

TEST(Rise, MasksAreDeterministicBoundedAndUnshiftedIsBilinear) {
  RiseConfig cfg;
  cfg.grid = 4;
  cfg.seed = 21;
  const auto a = rise_mask(cfg, 5, 16, 16);
  EXPECT_EQ(a, rise_mask(cfg, 5, 16, 16));
  EXPECT_NE(a, rise_mask(cfg, 6, 16, 16));
  for (double v : a) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  cfg.random_shift = false;
  Rng rng(mix_seed(cfg.seed, 5));
  std::vector<double> cells(16);
  for (auto& c : cells) c = rng.bernoulli(cfg.p) ? 1.0 : 0.0;
  EXPECT_EQ(rise_mask(cfg, 5, 16, 16), upsample_bilinear(cells, 4, 4, 16, 16));
}

TEST(Rise, ThreadedRunMatchesSerial) {
  auto model = make_model(ModelConfig{});
  Rng rng(13);
  const auto image = random_tensor({1, 32, 32}, rng, 0.0, 1.0);
  RiseConfig cfg;
  cfg.n_masks = 64;
  const auto serial = rise(predictor(*model), image, 0, cfg);
  cfg.threads = 3;
  EXPECT_EQ(rise(predictor(*model), image, 0, cfg).values, serial.values);
}

TEST(Rise, InvalidConfigAndFailuresAreReported) {
  const PredictFn ok = [](const Tensor&) { return std::vector<double>{0.5, 0.5}; };
  RiseConfig cfg;
  cfg.n_masks = 0;
  EXPECT_THROW(rise(ok, ones_image(8), 0, cfg), std::invalid_argument);
  cfg = RiseConfig{};
  cfg.grid = 9;
  EXPECT_THROW(rise(ok, ones_image(8), 0, cfg), std::invalid_argument);
  cfg = RiseConfig{};
  cfg.p = 1.0;
  EXPECT_THROW(rise(ok, ones_image(8), 0, cfg), std::invalid_argument);

  int calls = 0;
  const PredictFn flaky = [&calls](const Tensor&) -> std::vector<double> {
    if (calls++ == 3) throw std::runtime_error("boom");
    return {0.5, 0.5};
  };
  cfg = RiseConfig{};
  cfg.n_masks = 10;
  try {
    rise(flaky, ones_image(8), 0, cfg);
    FAIL() << "expected a failure";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("mask 3"), std::string::npos) << e.what();
  }
}

// ---- random baseline ----

TEST(RandomBaseline, DistinctValuesAndSeedDeterminism) {
  const auto a = random_baseline(32, 32, 4);
  EXPECT_EQ(std::set<double>(a.values.begin(), a.values.end()).size(), 1024u);
  EXPECT_EQ(a.values, random_baseline(32, 32, 4).values);
  EXPECT_NE(a.values, random_baseline(32, 32, 5).values);
  EXPECT_EQ(min_value(a), 0.0);
  EXPECT_EQ(max_value(a), 1.0);
}

TEST(RandomBaseline, RankHistogramIsUniform) {
  // Rank of a few fixed pixels over 1000 draws, 10 bins; chi-square with
  // 9 degrees of freedom, critical value 27.88 at p = 0.001.
  for (std::size_t pixel : {0u, 137u, 255u}) {
    std::vector<double> bins(10, 0.0);
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const double v = random_baseline(16, 16, seed).values[pixel];
      bins[std::min<std::size_t>(9, static_cast<std::size_t>(v * 10.0))] += 1.0;
    }
    double chi2 = 0.0;
    for (double b : bins) chi2 += (b - 100.0) * (b - 100.0) / 100.0;
    EXPECT_LT(chi2, 27.88) << "pixel " << pixel;
  }
}

// ---- dispatch ----

TEST(Explain, EveryExplainerIsDeterministic) {
  for (auto arch : {Arch::cnn, Arch::vit}) {
    ModelConfig cfg;
    cfg.arch = arch;
    auto model = make_model(cfg);
    Rng rng(14);
    const auto image = random_tensor({1, 32, 32}, rng, 0.0, 1.0);
    ExplainOptions opts;
    opts.rise.n_masks = 32;
    opts.seed = 77;
    for (const auto& id : explainers_for(arch)) {
      const auto a = explain(id, model.get(), predictor(*model), image, 1, opts);
      const auto b = explain(id, model.get(), predictor(*model), image, 1, opts);
      EXPECT_EQ(a.values, b.values) << id;
      EXPECT_EQ(a.explainer, id);
      ASSERT_EQ(a.size(), 1024u);
      for (double v : a.values) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
  }
}

TEST(Explain, PreconditionsAreChecked) {
  auto cnn = make_model(ModelConfig{});
  const auto image = ones_image(32);
  const ExplainOptions opts;
  EXPECT_THROW(explain(kGradCam, nullptr, predictor(*cnn), image, 0, opts), ExplainerError);
  EXPECT_THROW(explain(kRollout, cnn.get(), predictor(*cnn), image, 0, opts), ExplainerError);
  EXPECT_THROW(explain("lime", cnn.get(), predictor(*cnn), image, 0, opts), ExplainerError);
  EXPECT_THROW(explain(kRandom, nullptr, nullptr, Tensor({32, 32}, std::vector<double>(1024)), 0,
                       opts),
               DimensionError);
  EXPECT_NO_THROW(explain(kRandom, nullptr, nullptr, image, 0, opts));
  EXPECT_FALSE(supports(kGradCam, Arch::vit));
  EXPECT_TRUE(supports(kGradCamVit, Arch::vit));
  EXPECT_FALSE(needs_model_internals(kRise));
  EXPECT_TRUE(needs_model_internals(kClsLast));
}

// ---- heatmap utilities ----

TEST(Heatmap, NormalizationAndDegeneracy) {
  const auto h = normalize_heatmap({2.0, 4.0, 3.0, 2.0}, 2, 2, "x");
  expect_close(h.values, {0.0, 1.0, 0.5, 0.0}, 1e-15);
  EXPECT_FALSE(h.degenerate);
  EXPECT_EQ(h.raw_min, 2.0);
  EXPECT_EQ(h.raw_max, 4.0);
  const auto flat = normalize_heatmap({1.0, 1.0 + 1e-13, 1.0, 1.0}, 2, 2);
  EXPECT_TRUE(flat.degenerate);
  EXPECT_THROW(normalize_heatmap({1.0}, 2, 2), std::invalid_argument);
}

TEST(Heatmap, Upsampling) {
  expect_close(upsample_nearest(std::vector<double>{1, 2, 3, 4}, 2, 2, 4, 4),
               {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}, 0.0);
  // Half-pixel centres: 2 -> 4 gives weights 0.25 / 0.75 inside, clamped at the edges.
  expect_close(upsample_bilinear(std::vector<double>{0, 1}, 1, 2, 1, 4), {0, 0.25, 0.75, 1}, 1e-15);
  EXPECT_THROW(upsample_nearest(std::vector<double>{1, 2, 3, 4}, 2, 2, 3, 3), std::invalid_argument);
}

TEST(Heatmap, FileRoundTrip) {
  TempDir dir("heatmap");
  auto h = normalize_heatmap({0.1, 0.7, 0.3, 0.9, 0.2, 0.5}, 2, 3, kRise);
  h.target_class = 3;
  h.sample_id = 42;
  save_heatmap(dir.path() / "m", h, R"({"model":"cnn"})");
  for (const char* ext : {".bin", ".json", ".pgm"})
    EXPECT_TRUE(std::filesystem::exists(dir.path() / (std::string("m") + ext))) << ext;
  const auto back = load_heatmap(dir.path() / "m");
  EXPECT_EQ(back.values, h.values);
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.width, 3u);
  EXPECT_EQ(back.explainer, kRise);
  EXPECT_EQ(back.target_class, 3u);
  EXPECT_EQ(back.sample_id, 42u);
  EXPECT_EQ(back.raw_min, h.raw_min);
  EXPECT_EQ(back.raw_max, h.raw_max);
  EXPECT_EQ(back.degenerate, h.degenerate);
}
