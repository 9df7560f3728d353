#include <gtest/gtest.h>

#include <cmath>

#include "hatdiag/hat.hpp"

using namespace hatdiag;

namespace {

Batch small_batch() {
  return {Tensor::matrix({{0.5, -1.0}, {1.2, 0.3}, {-0.7, 0.8}, {0.1, 0.1}}), {0, 1, 1, 0}};
}

Var reference_forward(HatModel& model, const Tensor& x) {
  Var h = Var::constant(x);
  for (Layer& l : model.layers()) {
    Var z = ad::add_row(ad::linear(h, ad::clip(l.weight.var, l.crossbar.w_min, l.crossbar.w_max)), l.bias.var);
    h = l.activation == Activation::kRelu ? ad::relu(z) : z;
  }
  return h;
}

TrainConfig plain_config() {
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.momentum = 0.9;
  cfg.weight_decay = 1e-4;
  return cfg;
}

}  // namespace

TEST(EffectiveWeights, EmptyPipelineIsClippedWeight) {
  HatModel m({2, 3}, Activation::kRelu, CrossbarConfig{}, 1);
  m.layers()[0].weight.value()[0] = 1.7;
  NoiseStreams rng = NoiseStreams::from(RngStream(1, "fw"));
  const EffectiveWeights ew = build_effective_weights(m.layers()[0], 0, rng, {});
  EXPECT_TRUE(ew.bypass);
  Tensor expected = m.layers()[0].weight.value();
  expected[0] = 1.0;
  EXPECT_EQ(ew.w_eff.value(), expected);
}

TEST(EffectiveWeights, AdditiveNoiseIsUnbiased) {
  HatModel m({3, 2}, Activation::kRelu, CrossbarConfig{}, 2);
  const std::vector<PerturbationSpec> specs{Additive{1e-6}};
  m.set_perturbations(specs);
  const Layer& layer = m.layers()[0];
  const CrossbarConfig& cfg = layer.crossbar;
  const Tensor w = layer.weight.value();
  const ProgrammedPair p = program_weights(w, cfg);
  Tensor sum(w.shape());
  const std::size_t draws = 1000;
  for (std::size_t i = 0; i < draws; ++i) {
    NoiseStreams rng = NoiseStreams::from(RngStream(3, "fw").child("draw", i));
    sum = sum + build_effective_weights(m.layers()[0], 0, rng, {}).w_eff.value();
  }
  const double entry_sd = std::sqrt(2.0) * 1e-6 * p.scale / cfg.g_range();
  for (std::size_t i = 0; i < w.size(); ++i) {
    EXPECT_NEAR(sum[i] / draws, w[i], 4.0 * entry_sd / std::sqrt(static_cast<double>(draws)));
  }
}

TEST(EffectiveWeights, FullyStuckIgnoresWeights) {
  HatModel m({2, 2}, Activation::kRelu, CrossbarConfig{}, 4);
  m.set_perturbations({StuckAt{1.0, StuckPolicy::kPinToBound}});
  m.prepare_faults();
  auto normalised = [&] {
    NoiseStreams rng = NoiseStreams::from(RngStream(5, "fw"));
    const EffectiveWeights ew = build_effective_weights(m.layers()[0], 0, rng, {});
    return scaled(ew.w_eff.value(), 1.0 / ew.programmed.scale.value().item());
  };
  const Tensor a = normalised();
  m.layers()[0].weight.value() = Tensor::matrix({{0.9, -0.9}, {0.1, 0.4}});
  EXPECT_LT(max_abs_diff(a, normalised()), 1e-12);
  EXPECT_EQ(m.frozen_fraction(), 1.0);

  const Tensor before = m.layers()[0].weight.value();
  OptimizerState opt{0.1, 0.9, 1e-4, {}};
  TimeState time;
  hat_train_step(m, {Tensor::matrix({{0.5, -1.0}}), {1}}, plain_config(), opt, RngStream(6, "s"), time);
  EXPECT_EQ(m.layers()[0].weight.value(), before);
}

TEST(Pipeline, RejectsOutOfOrderAndDuplicates) {
  EXPECT_THROW(validate_pipeline({AdcQuant{}, Additive{}}), std::invalid_argument);
  EXPECT_THROW(validate_pipeline({IrDropSimplified{}, IrDropCoupled{}}), std::invalid_argument);
  EXPECT_NO_THROW(validate_pipeline({Multiplicative{}, Drift{}, Additive{}, IrDropSimplified{}, AdcQuant{}}));
}

TEST(RangeRegularization, InactiveHinge) {
  HatModel m({2, 2}, Activation::kRelu, CrossbarConfig{}, 6);
  m.layers()[0].weight.value() = Tensor::matrix({{0.5, -0.8}, {0.0, 0.9}});
  EXPECT_EQ(range_regularization(m, 0.9).value().item(), 0.0);
}

TEST(RangeRegularization, HandHingeAndGradient) {
  HatModel m({1, 1}, Activation::kIdentity, CrossbarConfig{}, 7);
  m.layers()[0].weight.value() = Tensor::matrix({{1.0}});
  Var reg = range_regularization(m, 0.9);
  EXPECT_NEAR(reg.value().item(), 0.01, 1e-15);
  backward_pass(reg);
  Parameter& w = m.layers()[0].weight;
  const Tensor fd = finite_difference_gradient([&] { return range_regularization(m, 0.9).value().item(); }, w, 1e-6);
  EXPECT_NEAR(w.grad()[0], 0.2, 1e-12);
  EXPECT_NEAR(fd[0], 0.2, 1e-8);
}

TEST(TrainStep, HandStepOnLinearLayer) {
  HatModel m({2, 2}, Activation::kIdentity, CrossbarConfig{}, 8);
  Layer& l = m.layers()[0];
  l.weight.value() = Tensor::matrix({{0.2, -0.1}, {0.4, 0.3}});
  l.bias.value() = Tensor::vector({0.0, 0.0});
  const Batch batch{Tensor::matrix({{1.0, 2.0}}), {1}};

  const double z0 = 0.2 * 1.0 - 0.1 * 2.0, z1 = 0.4 * 1.0 + 0.3 * 2.0;
  const double p0 = std::exp(z0) / (std::exp(z0) + std::exp(z1));
  const double e[2] = {p0, (1.0 - p0) - 1.0};
  Tensor expected = l.weight.value();
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) expected.at(i, j) -= 0.1 * e[i] * batch.x[j];

  TrainConfig cfg = plain_config();
  OptimizerState opt{0.1, 0.0, 0.0, {}};
  TimeState time;
  const StepRecord rec = hat_train_step(m, batch, cfg, opt, RngStream(1, "step"), time);
  EXPECT_NEAR(rec.task_loss, -std::log(1.0 - p0), 1e-14);
  EXPECT_LT(max_abs_diff(m.layers()[0].weight.value(), expected), 1e-15);
  EXPECT_EQ(time.step, 1u);
}

TEST(TrainStep, CleanPipelineMatchesPlainSgd) {
  HatModel hat({2, 5, 2}, Activation::kRelu, CrossbarConfig{}, 9);
  HatModel ref(hat);
  const Batch batch = small_batch();
  const TrainConfig cfg = plain_config();
  OptimizerState opt_hat{cfg.learning_rate, cfg.momentum, cfg.weight_decay, {}};
  OptimizerState opt_ref = opt_hat;
  TimeState time;
  for (int step = 0; step < 20; ++step) {
    hat_train_step(hat, batch, cfg, opt_hat, RngStream(10, "step").child("s", step), time);
    backward_pass(ad::softmax_cross_entropy(reference_forward(ref, batch.x), batch.labels));
    sgd_update(ref.parameters(), opt_ref);
  }
  const auto a = hat.parameters(), b = ref.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value(), b[i]->value()) << a[i]->name;
}

TEST(TrainStep, QuantizerWithoutSurrogateLeavesOnlyRegularizer) {
  HatModel m({2, 3, 2}, Activation::kRelu, CrossbarConfig{}, 11);
  m.layers()[0].weight.value()[0] = 0.97;
  AdcQuant q;
  q.surrogate = Surrogate::kNone;
  m.set_perturbations({q});
  TrainConfig cfg = plain_config();
  cfg.lambda_reg = 0.5;
  HatModel copy(m);
  backward_pass(ad::scale(range_regularization(copy, cfg.beta_reg), cfg.lambda_reg));

  NoiseStreams rng = NoiseStreams::from(RngStream(12, "step"));
  Var total = ad::add(ad::softmax_cross_entropy(model_forward(m, small_batch().x, rng, {}), small_batch().labels),
                      ad::scale(range_regularization(m, cfg.beta_reg), cfg.lambda_reg));
  backward_pass(total);
  const auto a = m.weights(), b = copy.weights();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->grad(), b[i]->grad());
  EXPECT_GT(max_abs(a[0]->grad()), 0.0);
}

TEST(TrainStep, NonFiniteLossRaisesDivergence) {
  HatModel m({2, 2}, Activation::kIdentity, CrossbarConfig{}, 13);
  Batch batch = small_batch();
  batch.x[0] = std::numeric_limits<double>::quiet_NaN();
  OptimizerState opt{0.1, 0.0, 0.0, {}};
  TimeState time;
  EXPECT_THROW(hat_train_step(m, batch, plain_config(), opt, RngStream(1, "s"), time), TrainingDivergence);
}

TEST(Evaluate, CleanIsDeterministic) {
  HatModel m({2, 4, 2}, Activation::kRelu, CrossbarConfig{}, 14);
  const DatasetSplits data = synth_dataset(DatasetKind::kRings, 400, 0.1, 3);
  const EvalResult a = evaluate(m, data.test, {}, RngStream(1, "eval"), 1, {});
  const EvalResult b = evaluate(m, data.test, {}, RngStream(2, "eval"), 6, {});
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(b.accuracy_std, 0.0);
}

TEST(Evaluate, ZeroNoiseRepeatsAcrossDraws) {
  HatModel m({2, 4, 2}, Activation::kRelu, CrossbarConfig{}, 15);
  const DatasetSplits data = synth_dataset(DatasetKind::kRings, 400, 0.1, 3);
  const EvalResult r = evaluate(m, data.test, {Additive{0.0}}, RngStream(1, "eval"), 5, {});
  for (double acc : r.draw_accuracy) EXPECT_EQ(acc, r.draw_accuracy.front());
}

TEST(Evaluate, RandomModelIsAtChance) {
  const std::size_t n = 10000;
  RngStream rng(16, "data");
  Dataset data{Tensor(Shape{n, 2}), std::vector<int>(n)};
  for (auto& v : data.features.data()) v = rng.normal();
  for (std::size_t i = 0; i < n; ++i) data.labels[i] = static_cast<int>(i % 2);
  HatModel m({2, 8, 2}, Activation::kRelu, CrossbarConfig{}, 17);
  const EvalResult r = evaluate(m, data, {}, RngStream(1, "eval"), 1, {});
  EXPECT_NEAR(r.accuracy, 0.5, 3.0 * std::sqrt(0.25 / n));
}

TEST(HatModel, CopyIsDeep) {
  HatModel a({2, 3, 2}, Activation::kRelu, CrossbarConfig{}, 18);
  HatModel b(a);
  b.layers()[0].weight.value()[0] += 1.0;
  EXPECT_NE(a.layers()[0].weight.value()[0], b.layers()[0].weight.value()[0]);
}

TEST(PipelineScope, RestoresPreviousPipeline) {
  HatModel m({2, 2}, Activation::kRelu, CrossbarConfig{}, 19);
  {
    PipelineScope scope(m, {StuckAt{0.5, StuckPolicy::kPinToBound}});
    m.prepare_faults();
    EXPECT_GT(m.frozen_fraction(), 0.0);
  }
  EXPECT_TRUE(m.layers()[0].perturbations.empty());
  EXPECT_EQ(m.frozen_fraction(), 0.0);
}
