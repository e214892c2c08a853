#include <gtest/gtest.h>

#include <random>

#include "msnet/errors.hpp"
#include "msnet/fd_check.hpp"
#include "msnet/loss.hpp"
#include "msnet/ops.hpp"
#include "test_util.hpp"

namespace msnet {
namespace {

using testing::random_tensor;

Tensor random_onehot(Shape shape, std::mt19937_64& rng) {
  Tensor t(shape);
  const std::size_t b = shape[0], c = shape[1], hw = shape[2] * shape[3];
  std::uniform_int_distribution<std::size_t> pick(0, c - 1);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t p = 0; p < hw; ++p) t[(n * c + pick(rng)) * hw + p] = 1.0;
  return t;
}

Tensor random_probs(Shape shape, std::mt19937_64& rng) {
  Graph g;
  return softmax_channel(g.constant(random_tensor(shape, rng, -3.0, 3.0))).value();
}

TEST(DiceLoss, PerfectPredictionIsZero) {
  std::mt19937_64 rng(1);
  const Tensor t = random_onehot({2, 2, 4, 4}, rng);
  Graph g;
  EXPECT_EQ(dice_loss(g.constant(t), t).value().item(), 0.0);
}

TEST(DiceLoss, SinglePixelHandValue) {
  Graph g;
  const double v = dice_loss(g.constant(Tensor(Shape{1, 2, 1, 1}, {0.5, 0.5})), Tensor(Shape{1, 2, 1, 1}, {1.0, 0.0})).value().item();
  EXPECT_NEAR(v, 1.0 - (2.0 * 0.5) / (0.5 + 1.0), 1e-15);
  EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(DiceLoss, BoundedInUnitInterval) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    Graph g;
    const double v = dice_loss(g.constant(random_probs({2, 2, 3, 3}, rng)), random_onehot({2, 2, 3, 3}, rng)).value().item();
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_GT(v, 0.0);  // soft probs never equal a one-hot exactly
  }
}

TEST(DiceLoss, GradientCheck) {
  std::mt19937_64 rng(3);
  const Tensor target = random_onehot({2, 2, 4, 4}, rng);
  std::vector<Tensor> point{random_tensor({2, 2, 4, 4}, rng, 0.05, 0.95)};
  auto f = [&](Graph&, std::span<const Var> v) { return dice_loss(v[0], target); };
  EXPECT_LT(fd_check(f, point, 1e-3), 1e-3);
  std::vector<Tensor> logits{random_tensor({2, 2, 4, 4}, rng, -2.0, 2.0)};
  auto through_softmax = [&](Graph&, std::span<const Var> v) { return dice_loss(softmax_channel(v[0]), target); };
  EXPECT_LT(fd_check(through_softmax, logits, 1e-3), 1e-3);
}

TEST(DiceLoss, ShapeMismatchAndEmptyRejected) {
  Graph g;
  EXPECT_THROW(dice_loss(g.constant(Tensor(Shape{1, 2, 2, 2})), Tensor(Shape{1, 2, 2, 1})), DimensionError);
  EXPECT_THROW(dice_loss(g.constant(Tensor(Shape{1, 2, 2, 2})), Tensor(Shape{1, 2, 2, 2})), ContractError);
}

TEST(KtLoss, UniformAgainstOneHotIsOneThird) {
  std::mt19937_64 rng(4);
  for (std::size_t pixels : {1u, 7u, 64u}) {
    Graph g;
    const double v = kt_loss(g.constant(Tensor(Shape{1, 2, 1, pixels}, 0.5)), random_onehot({1, 2, 1, pixels}, rng)).value().item();
    EXPECT_NEAR(v, 1.0 / 3.0, 1e-14);
  }
  const Tensor t = random_onehot({1, 2, 3, 3}, rng);
  Graph g;
  EXPECT_EQ(kt_loss(g.constant(t), t).value().item(), 0.0);
}

TEST(KtLoss, GradientFlowsOnlyIntoUniversalProbs) {
  std::mt19937_64 rng(5);
  Graph g;
  Var aux_probs = g.variable(random_probs({1, 2, 3, 3}, rng));
  Var uni = g.variable(random_probs({1, 2, 3, 3}, rng));
  // The target is a plain tensor copy of the argmax; no graph edge exists.
  g.backward(kt_loss(uni, onehot_argmax(aux_probs.value())));
  EXPECT_NE(g.grad(uni), nullptr);
  EXPECT_EQ(g.grad(aux_probs), nullptr);
  std::vector<Tensor> point{random_tensor({1, 2, 3, 3}, rng, 0.05, 0.95)};
  const Tensor target = random_onehot({1, 2, 3, 3}, rng);
  auto f = [&](Graph&, std::span<const Var> v) { return kt_loss(v[0], target); };
  EXPECT_LT(fd_check(f, point, 1e-3), 1e-3);
}

TEST(OnehotArgmax, PicksMaxWithLowestIndexTies) {
  const Tensor a = onehot_argmax(Tensor(Shape{1, 2, 1, 2}, {0.7, 0.5, 0.3, 0.5}));
  EXPECT_TRUE(bitwise_equal(a, Tensor(Shape{1, 2, 1, 2}, {1.0, 1.0, 0.0, 0.0})));
  std::mt19937_64 rng(6);
  const Tensor t = random_onehot({2, 3, 4, 4}, rng);
  EXPECT_TRUE(bitwise_equal(onehot_argmax(t), t));
}

TEST(OnehotFromLabels, EncodesBackgroundAndForeground) {
  const std::vector<std::uint8_t> labels{0, 1, 1, 0};
  const Tensor t = onehot_from_labels(labels, 1, 2, 2);
  EXPECT_TRUE(bitwise_equal(t, Tensor(Shape{1, 2, 2, 2}, {1, 0, 0, 1, 0, 1, 1, 0})));
  const std::vector<std::uint8_t> bad{0, 2, 1, 0};
  EXPECT_THROW(onehot_from_labels(bad, 1, 2, 2), DataError);
}

TEST(L2Penalty, ValuesAndGradient) {
  Parameter zero{"z", Tensor(Shape{3}, 0.0), Tensor()};
  Parameter k{"k", Tensor(Shape{2}, {3.0, 4.0}), Tensor()};
  Graph g;
  std::vector<Parameter*> zs{&zero}, ks{&k};
  EXPECT_EQ(l2_penalty(g, zs).value().item(), 0.0);
  Var l2 = l2_penalty(g, ks);
  EXPECT_EQ(l2.value().item(), 25.0);
  g.backward(l2);
  k.zero_grad();
  g.accumulate_parameter_grads();
  EXPECT_EQ(k.grad[0], 6.0);
  EXPECT_EQ(k.grad[1], 8.0);
  std::mt19937_64 rng(7);
  std::vector<Tensor> point{random_tensor({2, 3}, rng), random_tensor({4}, rng)};
  auto f = [](Graph&, std::span<const Var> v) { return sum_squares(v); };
  EXPECT_LT(fd_check(f, point, 1e-3), 1e-8);
}

TEST(AuxObjective, SumsSiteLossesPlusWeightedL2) {
  Graph g;
  std::vector<Var> losses{g.constant(Tensor::scalar(0.2)), g.constant(Tensor::scalar(0.3)), g.constant(Tensor::scalar(0.1))};
  Parameter zero{"z", Tensor(Shape{4}, 0.0), Tensor()};
  std::vector<Parameter*> zeros{&zero};
  EXPECT_NEAR(aux_objective(g, losses, 3, zeros, LossWeights{0.5, 1e-4}).value().item(), 0.6, 1e-15);
  Parameter k{"k", Tensor(Shape{4}, 5.0), Tensor()};  // sum of squares 100
  std::vector<Parameter*> ks{&k};
  EXPECT_NEAR(aux_objective(g, losses, 3, ks, LossWeights{0.5, 0.0}).value().item(), 0.6, 1e-15);
  EXPECT_NEAR(aux_objective(g, losses, 3, ks, LossWeights{0.5, 1e-4}).value().item(), 0.61, 1e-15);
  EXPECT_THROW(aux_objective(g, std::span(losses).first(2), 3, ks, LossWeights{}), ContractError);
}

TEST(UniObjective, AffineInTransferAndSupervisedTerms) {
  Graph g;
  Parameter k{"k", Tensor(Shape{4}, 5.0), Tensor()};
  std::vector<Parameter*> ks{&k};
  std::vector<UniTerms> one{{g.constant(Tensor::scalar(0.4)), g.constant(Tensor::scalar(0.2))}};
  EXPECT_NEAR(uni_objective(g, one, 1, ks, LossWeights{0.5, 0.0}).value().item(), 0.3, 1e-15);
  std::vector<UniTerms> two{{g.constant(Tensor::scalar(0.4)), g.constant(Tensor::scalar(0.2))},
                            {g.constant(Tensor::scalar(0.1)), g.constant(Tensor::scalar(0.7))}};
  EXPECT_NEAR(uni_objective(g, two, 2, ks, LossWeights{0.0, 1e-4}).value().item(), 0.9 + 0.01, 1e-15);
  EXPECT_NEAR(uni_objective(g, two, 2, ks, LossWeights{1.0, 1e-4}).value().item(), 0.5 + 0.01, 1e-15);
  EXPECT_THROW(uni_objective(g, two, 2, ks, LossWeights{1.5, 0.0}), ContractError);
  EXPECT_THROW(uni_objective(g, two, 2, ks, LossWeights{-0.1, 0.0}), ContractError);
  EXPECT_THROW(uni_objective(g, one, 2, ks, LossWeights{}), ContractError);
}

TEST(UniObjective, GradientSplitsByAlpha) {
  Graph g;
  Var kt = g.variable(Tensor::scalar(0.4));
  Var sup = g.variable(Tensor::scalar(0.2));
  std::vector<UniTerms> terms{{kt, sup}};
  g.backward(uni_objective(g, terms, 1, {}, LossWeights{0.3, 1e-4}));
  EXPECT_DOUBLE_EQ((*g.grad(kt))[0], 0.3);
  EXPECT_DOUBLE_EQ((*g.grad(sup))[0], 0.7);
}

}  // namespace
}  // namespace msnet
