#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numeric>

#include "faudit/models.hpp"
#include "faudit/ops.hpp"
#include "faudit/optim.hpp"
#include "faudit/rng.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace faudit;
using namespace faudit::test;

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferencesOnTwentyInstances) {
  const auto& c = GetParam();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EXPECT_LT(op_gradient_error(c, 1000 + seed), 1e-4) << c.name << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(op_cases()),
                         [](const auto& info) { return info.param.name; });

// ---- forward semantics ----

TEST(Matmul, IdentityAndProjector) {
  auto id = Tensor::matrix({{1, 0}, {0, 1}});
  auto m = Tensor::matrix({{1, 2}, {3, 4}});
  expect_close(ops::matmul(id, m).data(), {1, 2, 3, 4}, 0.0);
  auto p = Tensor::matrix({{1, 0}, {0, 0}});
  expect_close(ops::matmul(p, Tensor::matrix({{5, 6}, {7, 8}})).data(), {5, 6, 0, 0}, 0.0);
  EXPECT_THROW(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(Matmul, SumGradientIsOnesTimesBTransposed) {
  Rng rng(3);
  auto a = random_tensor({4, 3}, rng).set_requires_grad();
  auto b = random_tensor({3, 2}, rng);
  backward(ops::sum(ops::matmul(a, b)));
  const auto g = a.grad();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 3; ++k)
      EXPECT_NEAR(g[i * 3 + k], b[k * 2] + b[k * 2 + 1], 1e-12);
}

TEST(Conv2d, IdentityKernelAndSum) {
  auto x = Tensor({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  expect_close(ops::conv2d(x, Tensor::ones({1, 1, 1, 1})).data(), x.data(), 0.0);
  auto s = ops::conv2d(Tensor::ones({1, 2, 2}), Tensor::ones({1, 1, 2, 2}));
  EXPECT_EQ(s.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(s[0], 4.0);
}

TEST(Conv2d, OutputSizeFormulaAndErrors) {
  auto y = ops::conv2d(Tensor::zeros({2, 7, 7}), Tensor::zeros({3, 2, 3, 3}), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{3, 4, 4}));
  EXPECT_THROW(ops::conv2d(Tensor::zeros({1, 6, 6}), Tensor::zeros({1, 1, 3, 3}), 2, 0),
               DimensionError);
  EXPECT_THROW(ops::conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 3, 3})), DimensionError);
}

TEST(Elementwise, Examples) {
  expect_close(ops::relu(Tensor::vector({-1, 0, 2})).data(), {0, 0, 2}, 0.0);
  expect_close(ops::add(Tensor::vector({1, 2}), Tensor::vector({3, 4})).data(), {4, 6}, 0.0);
  EXPECT_THROW(ops::log(Tensor::vector({1, 0})), DomainError);
  EXPECT_THROW(ops::log(Tensor::vector({-1})), DomainError);
  EXPECT_THROW(ops::add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
}

TEST(Elementwise, ReluPassesGradientOnlyWherePositive) {
  auto x = Tensor::vector({-1, 0, 2}).set_requires_grad();
  backward(ops::sum(ops::relu(x)));
  expect_close(x.grad(), {0, 0, 1}, 0.0);
}

TEST(Softmax, SymmetryAndStabilization) {
  expect_close(ops::softmax(Tensor::vector({0, 0})).data(), {0.5, 0.5}, 0.0);
  expect_close(ops::softmax(Tensor::vector({1000, 1000})).data(), {0.5, 0.5}, 0.0);
}

TEST(Softmax, RowsSumToOneForRandomInputs) {
  Rng rng(11);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(24);
    for (auto& x : v) x = rng.uniform(-300.0, 300.0);
    auto y = ops::softmax(Tensor({4, 6}, v), -1);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        EXPECT_GE(y[r * 6 + c], 0.0);
        s += y[r * 6 + c];
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Pool, GlobalExamples) {
  auto x = Tensor({1, 2, 2}, {1, 3, 5, 7});
  EXPECT_EQ(ops::pool2d(x, ops::PoolKind::global_avg)[0], 4.0);
  EXPECT_EQ(ops::pool2d(x, ops::PoolKind::global_max)[0], 7.0);
  EXPECT_EQ(ops::pool2d(x, ops::PoolKind::global_avg).shape(), (Shape{1, 1, 1}));
  EXPECT_THROW(ops::pool2d(Tensor::zeros({1, 0, 0}), ops::PoolKind::global_avg), DimensionError);
}

TEST(CrossEntropy, ExamplesAndAnalyticGradient) {
  EXPECT_NEAR(ops::cross_entropy(Tensor::vector({0, 0}), 0).item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(ops::cross_entropy(Tensor::vector({10, -10}), 0).item(), 0.0, 1e-8);
  EXPECT_THROW(ops::cross_entropy(Tensor::vector({0, 0}), 2), std::exception);

  Rng rng(5);
  auto logits = random_tensor({5}, rng).set_requires_grad();
  backward(ops::cross_entropy(logits, 2));
  // softmax - onehot, computed independently
  double z = 0.0;
  for (std::size_t i = 0; i < 5; ++i) z += std::exp(logits[i]);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(logits.grad()[i], std::exp(logits[i]) / z - (i == 2 ? 1.0 : 0.0), 1e-12);
  }
}

TEST(Backward, SimpleExamples) {
  auto x = Tensor::matrix({{1, 2}, {3, 4}}).set_requires_grad();
  backward(ops::sum(x));
  expect_close(x.grad(), {1, 1, 1, 1}, 0.0);

  auto y = Tensor::vector({1, 2}).set_requires_grad();
  backward(ops::sum(ops::mul(y, y)));
  expect_close(y.grad(), {2, 4}, 0.0);
}

TEST(Backward, RejectsNonScalarLossAndClearsTape) {
  auto x = Tensor::vector({1, 2}).set_requires_grad();
  auto y = ops::mul(x, x);
  EXPECT_THROW(backward(y), DimensionError);
  backward(ops::sum(ops::scale(x, 3.0)));
  EXPECT_EQ(Tape::current().size(), 0u);
}

TEST(Backward, IndependentSubgraphsMatchSeparateBackwards) {
  Rng rng(9);
  auto a = random_tensor({3, 3}, rng).set_requires_grad();
  auto b = random_tensor({3, 3}, rng).set_requires_grad();
  backward(ops::add(ops::sum(ops::exp(a)), ops::sum(ops::mul(b, b))));
  const auto ga = a.grad(), gb = b.grad();

  auto a2 = a.detach().set_requires_grad();
  backward(ops::sum(ops::exp(a2)));
  auto b2 = b.detach().set_requires_grad();
  backward(ops::sum(ops::mul(b2, b2)));
  expect_close(ga, a2.grad(), 0.0);
  expect_close(gb, b2.grad(), 0.0);
}

TEST(Backward, NoGradModeRecordsNothing) {
  auto x = Tensor::vector({1, 2}).set_requires_grad();
  {
    NoGradGuard ng;
    auto y = ops::mul(x, x);
    EXPECT_EQ(Tape::current().size(), 0u);
    EXPECT_TRUE(y.is_leaf());
  }
}

TEST(Tensor, RejectsNonFiniteAndBadShapes) {
  EXPECT_THROW(Tensor({2}, {1.0, std::nan("")}), std::exception);
  EXPECT_THROW(Tensor({3}, {1.0, 2.0}), DimensionError);
  EXPECT_THROW(ops::exp(Tensor::vector({1000.0})), NumericError);
}

// ---- optimizer ----

namespace {

void step(std::vector<Tensor>& params, std::vector<double> grad, AdamState& state) {
  std::vector<std::vector<double>> grads = {std::move(grad)};
  adam_step(params, grads, state);
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  std::vector<Tensor> params = {Tensor::vector({1.0, -2.0})};
  AdamState state;
  for (int i = 0; i < 5; ++i) step(params, {0.0, 0.0}, state);
  expect_close(params[0].data(), {1.0, -2.0}, 0.0);
  EXPECT_EQ(state.step, 5u);
}

TEST(Adam, FirstStepHasMagnitudeLr) {
  std::vector<Tensor> params = {Tensor::scalar(0.0)};
  AdamState state;
  state.config.lr = 0.01;
  step(params, {1.0}, state);
  EXPECT_NEAR(params[0].item(), -0.01, 1e-9);
  step(params, {1.0}, state);
  EXPECT_NEAR(params[0].item(), -0.02, 1e-9);
}

TEST(Adam, QuadraticBowlConverges) {
  std::vector<Tensor> params = {Tensor::scalar(5.0)};
  AdamState state;
  state.config.lr = 0.1;
  int steps = 0;
  while (std::abs(params[0].item()) >= 1e-2 && steps < 500) {
    step(params, {2.0 * params[0].item()}, state);
    ++steps;
  }
  EXPECT_LT(std::abs(params[0].item()), 1e-2);
}

TEST(Adam, DecoupledWeightDecayShrinksWithZeroGradient) {
  std::vector<Tensor> params = {Tensor::scalar(2.0)};
  AdamState state;
  state.config.lr = 0.1;
  state.config.weight_decay = 0.5;
  step(params, {0.0}, state);
  EXPECT_NEAR(params[0].item(), 2.0 * (1.0 - 0.1 * 0.5), 1e-12);
}

TEST(Adam, ShapeMismatchThrows) {
  std::vector<Tensor> params = {Tensor::vector({1.0, 2.0})};
  AdamState state;
  EXPECT_THROW(step(params, {1.0}, state), DimensionError);
}

TEST(Adam, WrapperReadsParameterGradients) {
  auto w = Tensor::vector({1.0, -1.0}).set_requires_grad();
  Adam opt({w}, AdamConfig{});
  backward(ops::sum(ops::mul(w, w)));
  opt.step();
  EXPECT_LT(w[0], 1.0);
  EXPECT_GT(w[1], -1.0);
  opt.zero_grad();
  EXPECT_FALSE(w.has_grad() && w.grad()[0] != 0.0);
}

// ---- full models ----

namespace {

std::unique_ptr<Classifier> fresh_model(Arch arch, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.arch = arch;
  cfg.init_seed = seed;
  return make_model(cfg);
}

}  // namespace

TEST(ModelGradient, CnnMatchesCentralDifferencesAwayFromKinks) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto model = fresh_model(Arch::cnn, 500 + seed);
    const auto r = model_gradient_check(*model, seed, 6, 1e-3, 1e-5);
    EXPECT_LT(r.error, 1e-4) << "seed " << seed;
    EXPECT_GE(2 * r.kept, r.probes) << "seed " << seed;
  }
}

// The ViT's ReLU MLPs put a kink inside most probe intervals at h = 1e-3,
// so both models are also checked at a step small enough that only a few
// probes still straddle one.
TEST(ModelGradient, BothModelsMatchFineStepDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (auto arch : {Arch::cnn, Arch::vit}) {
      auto model = fresh_model(arch, 900 + seed);
      const auto r = model_gradient_check(*model, seed, 4, 1e-6, 1e-7);
      EXPECT_LT(r.error, 1e-4) << to_string(arch) << " seed " << seed;
      EXPECT_GE(4 * r.kept, 3 * r.probes) << to_string(arch) << " seed " << seed;
    }
  }
}
