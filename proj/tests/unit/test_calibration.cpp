#include <gtest/gtest.h>

#include "hatdiag/calibration.hpp"
#include "hatdiag/diagnostics.hpp"

using namespace hatdiag;

TEST(Calibration, LinearFamilySequence) {
  CalibrationConfig cfg;
  cfg.target = 0.05;
  const CalibrationResult r = calibrate_strength([](double s) { return s; }, cfg);
  const std::vector<double> expected{1, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.046875};
  ASSERT_EQ(r.history.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_DOUBLE_EQ(r.history[i].s, expected[i]);
  EXPECT_TRUE(r.converged);
  EXPECT_DOUBLE_EQ(r.s_star, 0.046875);
  EXPECT_EQ(r.trials_used, 7);
}

TEST(Calibration, UnreachableTargetFallsBackToBestTrial) {
  CalibrationConfig cfg;
  const CalibrationResult r = calibrate_strength([](double) { return 0.0; }, cfg);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.trials_used, cfg.trials);
  EXPECT_EQ(r.delta, 0.0);
  for (const auto& t : r.history) {
    EXPECT_GE(t.s, cfg.s_min);
    EXPECT_LE(t.s, cfg.s_max);
  }
}

TEST(Calibration, ImmediateStop) {
  CalibrationConfig cfg;
  cfg.target = 0.2;
  const CalibrationResult r = calibrate_strength([](double s) { return 0.2 * s; }, cfg);
  EXPECT_EQ(r.trials_used, 1);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.s_star, 1.0);
}

TEST(Calibration, NonFiniteDistortionRaises) {
  CalibrationConfig cfg;
  try {
    calibrate_strength([](double s) { return s < 0.4 ? std::numeric_limits<double>::quiet_NaN() : 1.0; }, cfg);
    FAIL() << "expected CalibrationError";
  } catch (const CalibrationError& e) {
    EXPECT_EQ(e.history().size(), 2u);
  }
}

TEST(Calibration, InvalidConfigRejected) {
  CalibrationConfig cfg;
  cfg.trials = 0;
  EXPECT_THROW(calibrate_strength([](double s) { return s; }, cfg), std::invalid_argument);
}

TEST(Calibration, ModelFamilyIsReproducible) {
  HatModel m({2, 8, 2}, Activation::kRelu, CrossbarConfig{}, 3);
  const DatasetSplits data = synth_dataset(DatasetKind::kRings, 400, 0.1, 3);
  const SpecFamily family = [](double s) { return std::vector<PerturbationSpec>{Additive{s * 1e-5}}; };
  CalibrationConfig cfg;
  cfg.target = 0.02;
  const CalibrationResult a = calibrate_strength(m, data.train.features, family, cfg, RngStream(4, "cal"));
  const CalibrationResult b = calibrate_strength(m, data.train.features, family, cfg, RngStream(4, "cal"));
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].s, b.history[i].s);
    EXPECT_EQ(a.history[i].delta, b.history[i].delta);
  }
  EXPECT_LE(a.trials_used, cfg.trials);
}
