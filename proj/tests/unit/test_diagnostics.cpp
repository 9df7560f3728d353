#include <gtest/gtest.h>

#include <cmath>

#include "hatdiag/diagnostics.hpp"

using namespace hatdiag;

namespace {

Batch batch_for(std::size_t n, std::size_t dims, std::uint64_t seed) {
  RngStream rng(seed, "batch");
  Batch b{Tensor(Shape{n, dims}), std::vector<int>(n)};
  for (auto& v : b.x.data()) v = rng.normal();
  for (std::size_t i = 0; i < n; ++i) b.labels[i] = static_cast<int>(i % 2);
  return b;
}

}  // namespace

TEST(Distortion, IdenticalOutputsGiveZero) {
  const Tensor y = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(distortion_delta(y, y), 0.0);
}

TEST(Distortion, HandNorms) {
  EXPECT_NEAR(distortion_delta(Tensor::matrix({{3, 4}}), Tensor::matrix({{3, 9}}), 1e-12), 1.0, 1e-12);
}

TEST(Distortion, ScaleInvariant) {
  const Tensor y = Tensor::matrix({{0.3, -1.2, 0.5}, {2.0, 0.1, -0.4}});
  const Tensor yt = Tensor::matrix({{0.35, -1.1, 0.45}, {1.9, 0.2, -0.4}});
  const double d = distortion_delta(y, yt);
  EXPECT_NEAR(distortion_delta(scaled(y, 7.5), scaled(yt, 7.5)), d, 1e-9);
  EXPECT_NEAR(distortion_global({y}, {yt}), distortion_global({scaled(y, 0.01)}, {scaled(yt, 0.01)}), 1e-9);
}

TEST(DistortionGlobal, SingleLayerAgreesWithDelta) {
  const Tensor y = Tensor::matrix({{3, 4}});
  const Tensor yt = Tensor::matrix({{3, 9}});
  EXPECT_NEAR(distortion_global({y}, {yt}), distortion_delta(y, yt), 1e-15);
  EXPECT_EQ(distortion_global({y, y}, {y, y}), 0.0);
}

TEST(DistortionGlobal, TwoLayersHand) {
  const std::vector<Tensor> clean{Tensor::matrix({{3, 4}}), Tensor::matrix({{0, 1}})};
  const std::vector<Tensor> pert{Tensor::matrix({{3, 9}}), Tensor::matrix({{0, 3}})};
  EXPECT_NEAR(distortion_global(clean, pert, 1e-12), (5.0 + 2.0) / (5.0 + 1.0), 1e-12);
}

TEST(Consistency, ZeroStrengthIsExactlyOne) {
  HatModel m({2, 4, 2}, Activation::kRelu, CrossbarConfig{}, 1);
  const ConsistencyResult r = expectation_consistency(m, batch_for(32, 2, 1), {Additive{0.0}}, 8, RngStream(1, "c"));
  EXPECT_EQ(r.cosine, 1.0);
  EXPECT_FALSE(r.degenerate);
}

TEST(Consistency, AdditiveOnLinearModel) {
  HatModel m({3, 2}, Activation::kIdentity, CrossbarConfig{}, 2);
  const ConsistencyResult r =
      expectation_consistency(m, batch_for(64, 3, 2), {Additive{1e-5}}, 256, RngStream(2, "c"));
  EXPECT_GE(r.cosine, 0.99);
}

TEST(Consistency, QuantizerWithoutSurrogateIsDegenerate) {
  HatModel m({2, 4, 2}, Activation::kRelu, CrossbarConfig{}, 3);
  AdcQuant q;
  q.surrogate = Surrogate::kNone;
  EXPECT_TRUE(expectation_consistency(m, batch_for(32, 2, 3), {q}, 4, RngStream(3, "c")).degenerate);
}

TEST(GradientVariance, ZeroStrengthIsZero) {
  HatModel m({2, 4, 2}, Activation::kRelu, CrossbarConfig{}, 4);
  EXPECT_EQ(gradient_variance_mc(m, batch_for(32, 2, 4), {Additive{0.0}}, 16, RngStream(4, "v")), 0.0);
}

TEST(GradientVariance, ScalarGaussianOracle) {
  const double w = 0.4, x = 1.5, y = 0.2, sigma = 0.3;
  RngStream rng(5, "v");
  auto sampler = [&](std::size_t) {
    const double e = rng.normal(0.0, sigma);
    return std::vector<double>{((w + e) * x - y) * x};
  };
  const double est = gradient_variance_mc(sampler, 100000);
  EXPECT_NEAR(est / (std::pow(x, 4) * sigma * sigma), 1.0, 0.03);
}

TEST(GradientVariance, MonotoneInReadNoise) {
  HatModel m({2, 8, 2}, Activation::kRelu, CrossbarConfig{}, 6);
  const Batch b = batch_for(64, 2, 6);
  double prev = -1.0;
  for (double sigma : {1e-7, 1e-6, 5e-6, 2e-5}) {
    const double v = gradient_variance_mc(m, b, {Additive{sigma}}, 128, RngStream(6, "v"));
    EXPECT_GT(v, prev) << "sigma_r " << sigma;
    prev = v;
  }
}

TEST(GradientVariance, NonFiniteDrawThrows) {
  auto sampler = [](std::size_t i) {
    return std::vector<double>{i == 3 ? std::numeric_limits<double>::infinity() : 1.0};
  };
  EXPECT_THROW(gradient_variance_mc(sampler, 8, "bad"), NonFiniteGradient);
}

TEST(Sensitivity, QuantizerWithoutSurrogateCollapses) {
  HatModel m({2, 4, 2}, Activation::kRelu, CrossbarConfig{}, 7);
  AdcQuant q;
  q.surrogate = Surrogate::kNone;
  const SensitivityResult none = sensitivity_probe(m, batch_for(32, 2, 7), {q}, RngStream(7, "s"));
  EXPECT_EQ(none.nonzero_fraction, 0.0);
  EXPECT_EQ(none.norm, 0.0);
  q.surrogate = Surrogate::kSte;
  EXPECT_GT(sensitivity_probe(m, batch_for(32, 2, 7), {q}, RngStream(7, "s")).nonzero_fraction, 0.0);
}

TEST(Sensitivity, StuckFractionTracksRho) {
  HatModel m({2, 64, 64, 2}, Activation::kRelu, CrossbarConfig{}, 8);
  const SensitivityResult r =
      sensitivity_probe(m, batch_for(32, 2, 8), {StuckAt{0.5, StuckPolicy::kPinToBound}}, RngStream(8, "s"));
  EXPECT_NEAR(r.frozen_fraction, 0.5, 0.05);
  EXPECT_GT(r.nonzero_fraction, 0.0);
  EXPECT_LE(r.nonzero_fraction, 1.0);
}

TEST(Trace, ConstantNormsHaveZeroStd) {
  GradientTrace t(4);
  for (int i = 0; i < 10; ++i) t.record(2.5);
  EXPECT_EQ(t.summary().std, 0.0);
  EXPECT_EQ(t.rolling_std().back(), 0.0);
}

TEST(Trace, TwoValues) {
  GradientTrace t;
  record_trace(t, StepRecord{0, 0, 0, 1.0, 0});
  record_trace(t, StepRecord{1, 0, 0, 3.0, 0});
  const TraceStats s = t.summary();
  EXPECT_DOUBLE_EQ(s.mean, 2.0);
  EXPECT_DOUBLE_EQ(s.std, 1.0);
  EXPECT_FALSE(s.empty);
}

TEST(Trace, EmptyIsFlagged) {
  const TraceStats s = GradientTrace().summary();
  EXPECT_TRUE(s.empty);
  EXPECT_EQ(s.mean, 0.0);
  EXPECT_EQ(s.std, 0.0);
}

TEST(Regime, Rules) {
  RegimeThresholds th;
  th.t_var = 1.0;
  DiagnosticsReport r;
  r.sensitivity_fraction = 1.0;
  EXPECT_EQ(classify_regime(r, th), Regime::kI);
  r.frozen_fraction = 0.2;
  EXPECT_EQ(classify_regime(r, th), Regime::kII);
  r.grad_variance = 2.0;
  EXPECT_EQ(classify_regime(r, th), Regime::kIII);
  r.grad_variance = 0.0;
  r.sensitivity_fraction = 0.0;
  EXPECT_EQ(classify_regime(r, th), Regime::kIII);
  r.sensitivity_fraction = 1.0;
  r.nonfinite = true;
  EXPECT_EQ(classify_regime(r, th), Regime::kIII);
  EXPECT_EQ(classify_regime(r, th), classify_regime(r, th));
}

TEST(Regime, DiagnoseSpecLabels) {
  HatModel m({2, 16, 2}, Activation::kRelu, CrossbarConfig{}, 9);
  const Batch b = batch_for(64, 2, 9);
  RegimeThresholds th;
  th.t_var = th.t_var_factor * gradient_variance_mc(m, b, {Additive{1e-7}}, 64, RngStream(9, "base"));
  const DiagnoseSettings settings{64, 64};
  EXPECT_EQ(diagnose_spec(m, b, {Additive{0.0}}, RngStream(9, "d"), th, settings).regime, Regime::kI);
  AdcQuant q;
  q.surrogate = Surrogate::kNone;
  EXPECT_EQ(diagnose_spec(m, b, {q}, RngStream(9, "d"), th, settings).regime, Regime::kIII);
  const StuckAt stuck{0.3, StuckPolicy::kHoldProgrammed};
  EXPECT_EQ(diagnose_spec(m, b, {stuck}, RngStream(9, "d"), th, settings).regime, Regime::kII);
}
