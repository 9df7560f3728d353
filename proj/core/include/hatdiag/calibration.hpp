#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

#include "hatdiag/hat.hpp"

namespace hatdiag {

struct CalibrationConfig {
  double target = 0.05;
  int trials = 20;
  double s0 = 1.0;
  double s_min = 1e-8;
  double s_max = 1.0;
  double band = 0.1;  // relative early-stop band around the target
  std::size_t samples = 512;

  void validate() const;
};

struct CalibrationTrial {
  double s = 0;
  double delta = 0;
};

struct CalibrationResult {
  double s_star = 0;
  double delta = 0;
  int trials_used = 0;
  std::vector<CalibrationTrial> history;
  bool converged = false;
};

class CalibrationError : public std::runtime_error {
 public:
  CalibrationError(const std::string& what, std::vector<CalibrationTrial> history);
  const std::vector<CalibrationTrial>& history() const noexcept { return history_; }

 private:
  std::vector<CalibrationTrial> history_;
};

/// Halve s while the distortion overshoots the target, otherwise grow it by 1.5,
/// clipped to [s_min, s_max]. Stops inside the band; falls back to the closest trial.
CalibrationResult calibrate_strength(const std::function<double(double)>& delta_of_s, const CalibrationConfig& cfg);

using SpecFamily = std::function<std::vector<PerturbationSpec>(double s)>;

/// Same search with delta_global of `family(s)` on `subset`, noise pinned by `rng`.
CalibrationResult calibrate_strength(HatModel& model, const Tensor& subset, const SpecFamily& family,
                                     const CalibrationConfig& cfg, const RngStream& rng, const TimeState& time = {});

}  // namespace hatdiag
