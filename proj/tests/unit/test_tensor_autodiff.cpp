#include <gtest/gtest.h>

#include <cmath>

#include "hatdiag/autodiff.hpp"
#include "hatdiag/optimizer.hpp"
#include "hatdiag/perturbation.hpp"

using namespace hatdiag;

TEST(Tensor, ShapeMismatchCarriesBothShapes) {
  const Tensor a(Shape{2, 3}), b(Shape{3, 2});
  try {
    (void)(a + b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.lhs(), (Shape{2, 3}));
    EXPECT_EQ(e.rhs(), (Shape{3, 2}));
  }
}

TEST(Tensor, PairwiseSumMatchesSmallSums) {
  std::vector<double> v(1000, 0.1);
  EXPECT_NEAR(pairwise_sum(v), 100.0, 1e-12);
  EXPECT_EQ(pairwise_sum(std::vector<double>{}), 0.0);
}

TEST(ForwardEval, IdentityMatrixProduct) {
  const Var w = Var::constant(Tensor::matrix({{1, 0}, {0, 1}}));
  const Var x = Var::constant(Tensor::vector({2, 3}));
  const Tensor z = forward_eval(ad::matmul(w, x));
  EXPECT_EQ(z, Tensor::vector({2, 3}));
}

TEST(ForwardEval, Relu) {
  EXPECT_EQ(forward_eval(ad::relu(Var::constant(Tensor::vector({-1, 2})))), Tensor::vector({0, 2}));
}

TEST(ForwardEval, SoftmaxCrossEntropyOfEqualLogits) {
  const Var logits = Var::constant(Tensor::matrix({{0, 0}}));
  EXPECT_NEAR(forward_eval(ad::softmax_cross_entropy(logits, {0})).item(), std::log(2.0), 1e-15);
}

TEST(BackwardPass, HandChainRule) {
  Var w = Var::leaf(Tensor::scalar(2.0));
  const Var x = Var::constant(Tensor::scalar(3.0));
  Var r = ad::add_scalar(ad::mul(w, x), -5.0);
  Var loss = ad::scale(ad::square(r), 0.5);
  backward_pass(loss);
  EXPECT_DOUBLE_EQ(w.grad().item(), 3.0);
}

TEST(BackwardPass, ConstantLossHasZeroGradient) {
  Var w = Var::leaf(Tensor::scalar(2.0));
  Var loss = ad::add_scalar(ad::scale(w, 0.0), 4.0);
  backward_pass(loss);
  EXPECT_EQ(w.grad().item(), 0.0);
}

TEST(BackwardPass, QuantizerWithoutSurrogateBlocksGradient) {
  Var w = Var::leaf(Tensor::scalar(0.37));
  const Var x = Var::constant(Tensor::scalar(0.9));
  AdcQuant q;
  q.surrogate = Surrogate::kNone;
  RngStream rng(1, "test");
  Var loss = ad::sum(ad::square(adc_quantize(ad::mul(w, x), q, rng)));
  backward_pass(loss);
  EXPECT_EQ(w.grad().item(), 0.0);
}

TEST(BackwardPass, RepeatedCallsAreConsistent) {
  Var w = Var::leaf(Tensor::vector({1.0, -2.0}));
  Var loss = ad::sum(ad::square(w));
  backward_pass(loss);
  const Tensor first = w.grad();
  w.zero_grad();
  backward_pass(loss);
  EXPECT_EQ(w.grad(), first);
}

TEST(FiniteDifference, Square) {
  Parameter p("w", Tensor::scalar(3.0));
  const Tensor g = finite_difference_gradient(
      [&] { return p.value().item() * p.value().item(); }, p, 1e-5);
  EXPECT_NEAR(g.item(), 6.0, 1e-6);
}

TEST(FiniteDifference, Constant) {
  Parameter p("w", Tensor::scalar(3.0));
  EXPECT_EQ(finite_difference_gradient([] { return 7.0; }, p, 1e-5).item(), 0.0);
}

TEST(FiniteDifference, AbsAwayFromKink) {
  Parameter p("w", Tensor::scalar(1.0));
  const Tensor g = finite_difference_gradient([&] { return std::abs(p.value().item()); }, p, 1e-5);
  EXPECT_NEAR(g.item(), 1.0, 1e-9);
  EXPECT_EQ(p.value().item(), 1.0);
}

TEST(Autodiff, LinearMatchesFiniteDifferences) {
  Parameter w("w", Tensor::matrix({{0.3, -0.2, 0.5}, {0.1, 0.4, -0.6}}));
  const Var x = Var::constant(Tensor::matrix({{1.0, 2.0, -1.0}, {0.5, -0.5, 0.25}}));
  auto loss = [&] { return ad::softmax_cross_entropy(ad::linear(x, w.var), {0, 1}); };
  backward_pass(loss());
  const Tensor fd = finite_difference_gradient([&] { return loss().value().item(); }, w, 1e-6);
  EXPECT_LT(max_abs_diff(w.grad(), fd), 1e-8);
}

TEST(Sgd, OneStepHand) {
  Parameter p("w", Tensor::scalar(1.0));
  p.grad() = Tensor::scalar(0.5);
  OptimizerState opt{0.1, 0.0, 0.0, {}};
  std::vector<Parameter*> ps{&p};
  sgd_update(ps, opt);
  EXPECT_DOUBLE_EQ(p.value().item(), 0.95);
  EXPECT_EQ(p.grad().item(), 0.0);
}

TEST(Sgd, ZeroGradientLeavesParameters) {
  Parameter p("w", Tensor::vector({1.0, -3.0}));
  OptimizerState opt{0.1, 0.9, 0.0, {}};
  std::vector<Parameter*> ps{&p};
  sgd_update(ps, opt);
  EXPECT_EQ(p.value(), Tensor::vector({1.0, -3.0}));
}

TEST(Sgd, MomentumTwoSteps) {
  Parameter p("w", Tensor::scalar(0.0));
  OptimizerState opt{0.1, 0.9, 0.0, {}};
  std::vector<Parameter*> ps{&p};
  for (int i = 0; i < 2; ++i) {
    p.grad() = Tensor::scalar(1.0);
    sgd_update(ps, opt);
  }
  EXPECT_NEAR(p.value().item(), -0.29, 1e-15);
}

TEST(Sgd, FrozenCoordinatesNeverMove) {
  Parameter p("w", Tensor::vector({1.0, 2.0}));
  p.frozen = Tensor::vector({0.0, 1.0});
  p.grad() = Tensor::vector({1.0, 1.0});
  OptimizerState opt{0.1, 0.9, 0.1, {}};
  std::vector<Parameter*> ps{&p};
  sgd_update(ps, opt);
  EXPECT_NE(p.value()[0], 1.0);
  EXPECT_EQ(p.value()[1], 2.0);
}

TEST(Sgd, RejectsInvalidState) {
  EXPECT_THROW((OptimizerState{0.0, 0.9, 0.0, {}}.validate()), std::invalid_argument);
  EXPECT_THROW((OptimizerState{0.1, 1.0, 0.0, {}}.validate()), std::invalid_argument);
}

TEST(Schedule, CosineEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_learning_rate(0.1, 0, 100), 0.1);
  EXPECT_NEAR(cosine_learning_rate(0.1, 50, 100), 0.05, 1e-15);
  EXPECT_NEAR(cosine_learning_rate(0.1, 100, 100), 0.0, 1e-15);
}
