#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hatdiag/hat.hpp"

namespace hatdiag {

constexpr double kDefaultEpsNum = 1e-12;

/// Mean over rows of ||y~ - y|| / (||y|| + eps).
double distortion_delta(const Tensor& y_clean, const Tensor& y_perturbed, double eps_num = kDefaultEpsNum);

/// sum_l sum_n ||y~ - y|| / (sum_l sum_n ||y|| + eps), norms taken per row.
double distortion_global(const std::vector<Tensor>& clean, const std::vector<Tensor>& perturbed,
                         double eps_num = kDefaultEpsNum);

/// Raised when a Monte-Carlo draw yields a non-finite gradient.
class NonFiniteGradient : public std::runtime_error {
 public:
  NonFiniteGradient(std::string spec, std::size_t draw);
  const std::string& spec() const noexcept { return spec_; }
  std::size_t draw() const noexcept { return draw_; }

 private:
  std::string spec_;
  std::size_t draw_;
};

/// Flattened task-loss gradient over every crossbar weight matrix, frozen
/// coordinates zeroed.
std::vector<double> task_gradient(HatModel& model, const Batch& batch, NoiseStreams& rng, const TimeState& time,
                                  const ForwardOptions& options = {});

struct ConsistencyResult {
  double cosine = 0;
  bool degenerate = false;
};

/// Cosine between the mean of K per-draw gradients and the gradient at the
/// K-averaged effective weights. One programming event is shared by all draws;
/// read-time and compute-path noise is redrawn per draw.
ConsistencyResult expectation_consistency(HatModel& model, const Batch& batch,
                                          const std::vector<PerturbationSpec>& specs, std::size_t k,
                                          const RngStream& rng, const TimeState& time = {});

/// Mean over entries of the per-entry population variance of `sampler(i)` for
/// i = 0..k-1. Throws NonFiniteGradient on a non-finite draw.
double gradient_variance_mc(const std::function<std::vector<double>(std::size_t)>& sampler, std::size_t k,
                            const std::string& spec_name = "custom");

double gradient_variance_mc(HatModel& model, const Batch& batch, const std::vector<PerturbationSpec>& specs,
                            std::size_t k, const RngStream& rng, const TimeState& time = {});

struct SensitivityResult {
  double nonzero_fraction = 0;  // over active (non-frozen) coordinates
  double norm = 0;
  double frozen_fraction = 0;
};

SensitivityResult sensitivity_probe(HatModel& model, const Batch& batch, const std::vector<PerturbationSpec>& specs,
                                    const RngStream& rng, const TimeState& time = {});

/// Mean global distortion of layer outputs under `specs` relative to the clean
/// pipeline, over `draws` noise draws.
double measure_delta_global(HatModel& model, const Tensor& x, const std::vector<PerturbationSpec>& specs,
                            const RngStream& rng, std::size_t draws = 1, const TimeState& time = {});

struct TraceStats {
  double mean = 0;
  double std = 0;  // population
  bool empty = true;
};

class GradientTrace {
 public:
  explicit GradientTrace(std::size_t window = 50);

  void record(double norm);
  const std::vector<double>& norms() const noexcept { return norms_; }
  const std::vector<double>& rolling_mean() const noexcept { return rolling_mean_; }
  const std::vector<double>& rolling_std() const noexcept { return rolling_std_; }
  std::size_t window() const noexcept { return window_; }
  TraceStats summary() const;

 private:
  std::size_t window_;
  std::vector<double> norms_;
  std::vector<double> rolling_mean_;
  std::vector<double> rolling_std_;
};

void record_trace(GradientTrace& trace, const StepRecord& step);

enum class Regime { kI = 1, kII = 2, kIII = 3 };
std::string regime_name(Regime r);

struct RegimeThresholds {
  double t_sens = 0.01;
  double t_var = 0.0;  // 100x the additive baseline variance, measured per model
  double t_frozen = 0.01;
  double t_var_factor = 100.0;
};

struct DiagnosticsReport {
  std::string spec;
  double consistency_cosine = 0;
  bool consistency_degenerate = false;
  double grad_variance = 0;
  double sensitivity_fraction = 0;
  double sensitivity_norm = 0;
  double frozen_fraction = 0;
  double delta_global = 0;
  bool nonfinite = false;
  std::string failure;
  Regime regime = Regime::kI;
  RegimeThresholds thresholds;
};

Regime classify_regime(const DiagnosticsReport& report, const RegimeThresholds& thresholds);

struct DiagnoseSettings {
  std::size_t k_consistency = 256;
  std::size_t k_variance = 256;
};

/// Runs all diagnostics for `specs` on a fixed batch. `t_var` must already be set.
DiagnosticsReport diagnose_spec(HatModel& model, const Batch& batch, const std::vector<PerturbationSpec>& specs,
                                const RngStream& rng, const RegimeThresholds& thresholds,
                                const DiagnoseSettings& settings = {}, const TimeState& time = {});

}  // namespace hatdiag
