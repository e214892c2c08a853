#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "msnet/errors.hpp"
#include "msnet/fd_check.hpp"
#include "msnet/normalization.hpp"
#include "msnet/ops.hpp"
#include "test_util.hpp"

namespace msnet {
namespace {

using testing::random_tensor;

Tensor gaussian_batch(std::mt19937_64& rng, Shape shape, double mean, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(mean, stddev);
  for (double& v : t.values()) v = n(rng);
  return t;
}

bool bn_states_equal(const BnState& a, const BnState& b) {
  return bitwise_equal(a.gamma.value, b.gamma.value) && bitwise_equal(a.beta.value, b.beta.value) &&
         bitwise_equal(a.running_mean, b.running_mean) && bitwise_equal(a.running_var, b.running_var) &&
         a.updates == b.updates;
}

TEST(BatchNormTrain, HandOracleOnFourValues) {
  BnState state = BnState::create(1, "bn");
  Graph g;
  BatchMoments moments;
  Var y = batch_norm(g.constant(Tensor(Shape{1, 1, 2, 2}, {1, 2, 3, 4})), g.parameter(state.gamma),
                     g.parameter(state.beta), kBnEpsilon, &moments);
  EXPECT_DOUBLE_EQ(moments.mean[0], 2.5);
  EXPECT_DOUBLE_EQ(moments.var[0], 1.25);
  const double denom = std::sqrt(1.25 + 1e-5);
  const double expected[] = {-1.5 / denom, -0.5 / denom, 0.5 / denom, 1.5 / denom};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(y.value()[i], expected[i], 1e-12);
  // Rounded reference values.
  EXPECT_NEAR(y.value()[0], -1.34162, 5e-5);
  EXPECT_NEAR(y.value()[1], -0.44721, 5e-5);
  EXPECT_NEAR(y.value()[2], 0.44721, 5e-5);
  EXPECT_NEAR(y.value()[3], 1.34162, 5e-5);
}

TEST(BatchNormTrain, ConstantChannelMapsToBeta) {
  BnState state = BnState::create(1, "bn");
  state.beta.value[0] = 7.0;
  Graph g;
  Var y = bn_forward_train(g, g.constant(Tensor(Shape{2, 1, 3, 3}, 4.2)), state);
  for (double v : y.value().values()) EXPECT_NEAR(v, 7.0, 1e-12);
}

TEST(BatchNormTrain, RunningStatisticsUseMomentumAndBiasedVariance) {
  BnState state = BnState::create(1, "bn");
  Graph g;
  bn_forward_train(g, g.constant(Tensor(Shape{1, 1, 2, 2}, {1, 2, 3, 4})), state);
  EXPECT_DOUBLE_EQ(state.running_mean[0], (1.0 - 0.99) * 2.5);
  EXPECT_DOUBLE_EQ(state.running_var[0], 0.99 * 1.0 + (1.0 - 0.99) * 1.25);
  EXPECT_EQ(state.updates, 1u);
}

TEST(BatchNormTrain, DegenerateBatchRejected) {
  BnState state = BnState::create(2, "bn");
  Graph g;
  EXPECT_THROW(bn_forward_train(g, g.constant(Tensor(Shape{1, 2, 1, 1})), state), ContractError);
}

TEST(BatchNormTrain, OutputIsWhitenedPerChannel) {
  std::mt19937_64 rng(1);
  BnState state = BnState::create(3, "bn");
  Tensor x = gaussian_batch(rng, {4, 3, 5, 5}, 2.0, 3.0);
  Graph g;
  BatchMoments moments;
  const Tensor y = batch_norm(g.constant(x), g.parameter(state.gamma), g.parameter(state.beta), kBnEpsilon, &moments).value();
  const std::size_t n = 4 * 25;
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, ss = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i) s += y[(b * 3 + c) * 25 + i];
    const double m = s / n;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i) ss += (y[(b * 3 + c) * 25 + i] - m) * (y[(b * 3 + c) * 25 + i] - m);
    EXPECT_LT(std::abs(m), 1e-10);
    EXPECT_NEAR(ss / n, moments.var[c] / (moments.var[c] + kBnEpsilon), 1e-6);
  }
}

TEST(BatchNormTrain, GradientCheck) {
  std::mt19937_64 rng(2);
  std::vector<Tensor> point{random_tensor({3, 2, 3, 3}, rng), random_tensor({2}, rng, 0.5, 1.5), random_tensor({2}, rng)};
  const Tensor weights = random_tensor({3, 2, 3, 3}, rng, 0.5, 1.5);
  auto f = [&](Graph& g, std::span<const Var> v) {
    return sum(mul(batch_norm(v[0], v[1], v[2], kBnEpsilon), g.constant(weights)));
  };
  EXPECT_LT(fd_check(f, point, 1e-3), 1e-3);
}

TEST(BatchNormEval, UsesRunningStatistics) {
  BnState state = BnState::create(1, "bn");
  Tensor x(Shape{1, 1, 2, 2}, {1, -2, 3, 0.5});
  Graph g;
  const Tensor y = bn_forward_eval(g, g.constant(x), state).value();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y[i], x[i] / std::sqrt(1.0 + kBnEpsilon));
}

TEST(BatchNormEval, DoesNotMutateState) {
  std::mt19937_64 rng(3);
  BnState state = BnState::create(2, "bn");
  {
    Graph g;
    bn_forward_train(g, g.constant(gaussian_batch(rng, {2, 2, 4, 4}, 1.0, 2.0)), state);
  }
  const BnState before = state;
  Graph g;
  bn_forward_eval(g, g.constant(gaussian_batch(rng, {2, 2, 4, 4}, 5.0, 2.0)), state);
  bn_forward(g, g.constant(gaussian_batch(rng, {2, 2, 4, 4}, 5.0, 2.0)), state, NormMode::kBatchStats);
  EXPECT_TRUE(bn_states_equal(before, state));
}

TEST(BatchNormEval, GradientCheck) {
  std::mt19937_64 rng(4);
  const Tensor mean = random_tensor({2}, rng), var = random_tensor({2}, rng, 0.5, 2.0);
  std::vector<Tensor> point{random_tensor({2, 2, 3, 3}, rng), random_tensor({2}, rng), random_tensor({2}, rng)};
  const Tensor weights = random_tensor({2, 2, 3, 3}, rng, 0.5, 1.5);
  auto f = [&](Graph& g, std::span<const Var> v) {
    return sum(mul(batch_norm_inference(v[0], v[1], v[2], mean, var, kBnEpsilon), g.constant(weights)));
  };
  EXPECT_LT(fd_check(f, point, 1e-3), 1e-6);
}

TEST(BatchNormEval, StationaryStreamCentersEvalOutput) {
  std::mt19937_64 rng(5);
  BnState state = BnState::create(2, "bn");
  for (int step = 0; step < 500; ++step) {
    Graph g;
    bn_forward_train(g, g.constant(gaussian_batch(rng, {5, 2, 4, 4}, 3.0, 2.0)), state);
  }
  Graph g;
  const Tensor y = bn_forward_eval(g, g.constant(gaussian_batch(rng, {50, 2, 4, 4}, 3.0, 2.0)), state).value();
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0;
    for (std::size_t b = 0; b < 50; ++b)
      for (std::size_t i = 0; i < 16; ++i) s += y[(b * 2 + c) * 16 + i];
    EXPECT_NEAR(s / (50 * 16), 0.0, 0.1);
  }
}

TEST(Dsbn, SingleSiteEqualsPlainBatchNorm) {
  std::mt19937_64 rng(6);
  DsbnState dsbn = DsbnState::create(3, 1, "layer");
  BnState bn = BnState::create(3, "layer.site1");
  for (int step = 0; step < 5; ++step) {
    const Tensor x = gaussian_batch(rng, {2, 3, 4, 4}, 1.0, 2.0);
    Graph g1, g2;
    const Tensor a = dsbn_forward(g1, g1.constant(x), SiteId{1}, dsbn, NormMode::kTrain).value();
    const Tensor b = bn_forward_train(g2, g2.constant(x), bn).value();
    EXPECT_TRUE(bitwise_equal(a, b));
  }
  EXPECT_TRUE(bn_states_equal(dsbn.per_site[0], bn));
  Graph g1, g2;
  const Tensor x = gaussian_batch(rng, {2, 3, 4, 4}, 1.0, 2.0);
  EXPECT_TRUE(bitwise_equal(dsbn_forward(g1, g1.constant(x), SiteId{1}, dsbn, NormMode::kEval).value(),
                            bn_forward_eval(g2, g2.constant(x), bn).value()));
}

TEST(Dsbn, ForwardLeavesOtherSitesUntouched) {
  std::mt19937_64 rng(7);
  DsbnState dsbn = DsbnState::create(2, 3, "layer");
  const DsbnState before = dsbn;
  Graph g;
  dsbn_forward(g, g.constant(gaussian_batch(rng, {2, 2, 4, 4}, 4.0, 1.0)), SiteId{2}, dsbn, NormMode::kTrain);
  EXPECT_TRUE(bn_states_equal(before.per_site[0], dsbn.per_site[0]));
  EXPECT_TRUE(bn_states_equal(before.per_site[2], dsbn.per_site[2]));
  EXPECT_FALSE(bn_states_equal(before.per_site[1], dsbn.per_site[1]));
}

TEST(Dsbn, UnknownSiteIsRoutingError) {
  DsbnState dsbn = DsbnState::create(2, 3, "layer");
  Graph g;
  Var x = g.constant(Tensor(Shape{2, 2, 2, 2}));
  EXPECT_THROW(dsbn_forward(g, x, SiteId{4}, dsbn, NormMode::kTrain), SiteRoutingError);
  EXPECT_THROW(dsbn_forward(g, x, SiteId{0}, dsbn, NormMode::kEval), SiteRoutingError);
}

TEST(Dsbn, SiteStateIsPureFunctionOfItsOwnForwards) {
  // Interleaving other-site forwards must not change a site's final state.
  std::mt19937_64 rng(8);
  std::vector<Tensor> site1_batches, noise;
  for (int i = 0; i < 6; ++i) {
    site1_batches.push_back(gaussian_batch(rng, {2, 2, 3, 3}, 0.0, 1.0));
    noise.push_back(gaussian_batch(rng, {2, 2, 3, 3}, 9.0, 3.0));
  }
  DsbnState alone = DsbnState::create(2, 2, "l"), mixed = DsbnState::create(2, 2, "l");
  for (int i = 0; i < 6; ++i) {
    Graph g;
    dsbn_forward(g, g.constant(site1_batches[i]), SiteId{1}, alone, NormMode::kTrain);
    dsbn_forward(g, g.constant(noise[i]), SiteId{2}, mixed, NormMode::kTrain);
    dsbn_forward(g, g.constant(site1_batches[i]), SiteId{1}, mixed, NormMode::kTrain);
  }
  EXPECT_TRUE(bn_states_equal(alone.per_site[0], mixed.per_site[0]));
}

TEST(Dsbn, DivergentSiteStreamsSeparateRunningMeans) {
  std::mt19937_64 rng(9);
  DsbnState dsbn = DsbnState::create(2, 2, "layer");
  auto run = [&](int batches) {
    for (int step = 0; step < batches; ++step) {
      Graph g;
      dsbn_forward(g, g.constant(gaussian_batch(rng, {5, 2, 4, 4}, 0.0, 1.0)), SiteId{1}, dsbn, NormMode::kTrain);
      dsbn_forward(g, g.constant(gaussian_batch(rng, {5, 2, 4, 4}, 5.0, 2.0)), SiteId{2}, dsbn, NormMode::kTrain);
    }
  };
  run(200);
  // The EMA from a zero start reaches 5 * (1 - 0.99^200) after 200 batches.
  const double ema_target = 5.0 * (1.0 - std::pow(kBnMomentum, 200));
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_NEAR(dsbn.per_site[1].running_mean[c] - dsbn.per_site[0].running_mean[c], ema_target, 0.3);
  }
  run(800);
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_NEAR(dsbn.per_site[1].running_mean[c] - dsbn.per_site[0].running_mean[c], 5.0, 0.3);
    EXPECT_NEAR(dsbn.per_site[1].running_var[c], 4.0, 0.5);
  }
}

TEST(Dsbn, GradientCheckThroughRouting) {
  std::mt19937_64 rng(10);
  DsbnState dsbn = DsbnState::create(2, 3, "layer");
  for (BnState& s : dsbn.per_site) {
    s.gamma.value = random_tensor({2}, rng, 0.5, 1.5);
    s.beta.value = random_tensor({2}, rng);
  }
  std::vector<Tensor> point{random_tensor({2, 2, 3, 3}, rng)};
  const Tensor weights = random_tensor({2, 2, 3, 3}, rng, 0.5, 1.5);
  auto f = [&](Graph& g, std::span<const Var> v) {
    return sum(mul(dsbn_forward(g, v[0], SiteId{3}, dsbn, NormMode::kTrain), g.constant(weights)));
  };
  EXPECT_LT(fd_check(f, point, 1e-3), 1e-3);
}

}  // namespace
}  // namespace msnet
