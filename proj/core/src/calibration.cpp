#include "hatdiag/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "hatdiag/diagnostics.hpp"

namespace hatdiag {

void CalibrationConfig::validate() const {
  if (!(target > 0)) throw std::invalid_argument("calibration: target must be > 0");
  if (trials < 1) throw std::invalid_argument("calibration: trials must be >= 1");
  if (!(s_min > 0 && s_min < s_max)) throw std::invalid_argument("calibration: require 0 < s_min < s_max");
  if (!(band > 0)) throw std::invalid_argument("calibration: band must be > 0");
  if (samples < 1) throw std::invalid_argument("calibration: samples must be >= 1");
}

CalibrationError::CalibrationError(const std::string& what, std::vector<CalibrationTrial> history)
    : std::runtime_error(what), history_(std::move(history)) {}

CalibrationResult calibrate_strength(const std::function<double(double)>& delta_of_s, const CalibrationConfig& cfg) {
  cfg.validate();
  CalibrationResult res;
  double s = std::clamp(cfg.s0, cfg.s_min, cfg.s_max);
  std::size_t best = 0;
  for (int t = 0; t < cfg.trials; ++t) {
    const double delta = delta_of_s(s);
    if (!std::isfinite(delta)) {
      throw CalibrationError("calibration: non-finite distortion at s=" + std::to_string(s), res.history);
    }
    res.history.push_back({s, delta});
    const double err = std::abs(delta - cfg.target);
    if (err < std::abs(res.history[best].delta - cfg.target)) best = res.history.size() - 1;
    if (err <= cfg.band * cfg.target) {
      res.converged = true;
      best = res.history.size() - 1;
      break;
    }
    s = std::clamp(delta > cfg.target ? s / 2.0 : s * 1.5, cfg.s_min, cfg.s_max);
  }
  res.trials_used = static_cast<int>(res.history.size());
  res.s_star = res.history[best].s;
  res.delta = res.history[best].delta;
  return res;
}

CalibrationResult calibrate_strength(HatModel& model, const Tensor& subset, const SpecFamily& family,
                                     const CalibrationConfig& cfg, const RngStream& rng, const TimeState& time) {
  return calibrate_strength(
      [&](double s) {
        try {
          return measure_delta_global(model, subset, family(s), rng, 1, time);
        } catch (const CoupledDivergence&) {
          return std::numeric_limits<double>::quiet_NaN();
        }
      },
      cfg);
}

}  // namespace hatdiag
