#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "hatdiag/autodiff.hpp"
#include "hatdiag/crossbar.hpp"
#include "hatdiag/rng.hpp"

namespace hatdiag {

enum class TimeMode { kFixed, kAccumulated };
enum class StuckPolicy { kHoldProgrammed, kPinToBound };
enum class RangePolicy { kFixed, kPerBatchMinMax };
enum class Surrogate { kNone, kSte, kStochastic, kSmooth };

struct Additive {
  double sigma_r = 1e-7;  // siemens
};

struct Multiplicative {
  double sigma_v = 0.1;
};

struct Drift {
  double alpha = 1e-4;
  double tau = 1.0;
  TimeMode time_mode = TimeMode::kAccumulated;
  double horizon = 1000.0;  // fixed mode: t ~ U[0, horizon) per step
};

struct StuckAt {
  double rho = 0.1;
  StuckPolicy policy = StuckPolicy::kPinToBound;
};

struct IrDropSimplified {
  double beta = 0.01;
};

/// Wire-resistance model solved by fixed-point iteration on the input-line
/// voltages: v_j <- x_j - s * r_wire * xi_j * position_j * S_j * h(v_j), with S_j the
/// line's total conductance and h(v) = v * (1 + k * tanh(v)^2). The factor
/// xi_j ~ U(1 - jitter, 1 + jitter) is redrawn on every read.
struct IrDropCoupled {
  double s = 1.0;
  double r_wire = 10.0;  // ohms per segment
  int max_iters = 200;
  double tol = 1e-12;
  double nonlinearity = 1.0;
  double jitter = 1.0;
};

struct AdcQuant {
  int bits = 8;
  RangePolicy range_policy = RangePolicy::kFixed;
  double lo = -1.0;
  double hi = 1.0;
  Surrogate surrogate = Surrogate::kSte;
  double smooth_alpha = 10.0;
};

struct WriteModelConfig {
  double a_plus = 4e-5;
  double a_minus = 3e-5;
  double p_plus = 1.0;
  double p_minus = 1.0;
  double gamma = 1.0;
  double sigma_w = 0.05;
  double v_write = 1.2;
  double t_min = 5e-9;
  double t_scale = 1e-6;
  int max_pulses = 200;
  double tolerance = 0.02;  // fraction of (g_max - g_min)

  void validate() const;
};

struct WriteProgram {
  WriteModelConfig config;
};

using PerturbationSpec =
    std::variant<Additive, Multiplicative, Drift, StuckAt, IrDropSimplified, IrDropCoupled, AdcQuant, WriteProgram>;

/// Where an operator sits in the physical pipeline; lists must be non-decreasing.
enum class Stage { kProgramming = 0, kTime = 1, kRead = 2, kCompute = 3, kOutput = 4 };

Stage stage_of(const PerturbationSpec& spec);
std::string kind_name(const PerturbationSpec& spec);
void validate(const PerturbationSpec& spec);
/// True when the operator has zero strength and is the exact identity.
bool is_identity(const PerturbationSpec& spec);

// ---- Conductance-domain operators -----------------------------------------

Tensor apply_read_noise(const Tensor& g, double sigma_r, RngStream& rng);
/// Per-entry factor 1+N(0, sigma_v^2), then clip to [g_min, g_max].
Tensor apply_variability(const Tensor& g, double sigma_v, const CrossbarConfig& cfg, RngStream& rng);

struct DriftResult {
  Tensor g;
  bool clipped = false;  // attenuation reached g_min for some entry
};
double drift_factor(double alpha, double tau, double t);
DriftResult apply_drift(const Tensor& g0, double alpha, double tau, double t, double g_min);

/// Per-weight fault state shared by both arrays of a differential pair.
/// mask == 1 means healthy; stuck entries read c_p / c_n.
struct StuckState {
  Tensor mask;
  Tensor c_p;
  Tensor c_n;
  double frozen_fraction() const;
};
StuckState sample_stuck_mask(const Shape& shape, double rho, StuckPolicy policy, const ProgrammedPair& programmed,
                             const CrossbarConfig& cfg, RngStream& rng);
Tensor apply_stuck(const Tensor& g, const Tensor& mask, const Tensor& stuck_values);

// ---- Compute-path operators ------------------------------------------------

/// Diagonal input attenuation 1 - beta*(depth/array_size)*m(x) per column block.
Tensor ir_drop_scaling(const Tensor& x, double beta, std::size_t array_size);
Tensor ir_drop_simplified(const Tensor& w_eff, const Tensor& x, double beta, std::size_t array_size);
Var ir_drop_inputs(const Var& x, double beta, std::size_t array_size);

/// Raised when the coupled fixed point grows for three consecutive iterations.
class CoupledDivergence : public std::runtime_error {
 public:
  CoupledDivergence(const std::string& what, Tensor last_iterate, int iterations);
  const Tensor& last_iterate() const noexcept { return last_; }
  int iterations() const noexcept { return iterations_; }

 private:
  Tensor last_;
  int iterations_;
};

struct CoupledSolve {
  Tensor voltages;  // same shape as x
  int iterations = 0;
  bool converged = false;
};

/// Draws the per-read segment resistance factors (one per input line).
Tensor sample_wire_jitter(std::size_t lines, double jitter, RngStream& rng);
CoupledSolve solve_coupled_voltages(const Tensor& x, const Tensor& g_sum, const IrDropCoupled& spec,
                                    std::size_t array_size, const Tensor& jitter);

struct CoupledResult {
  Tensor z;
  Tensor delta;  // z - W_eff x
  int iterations = 0;
  bool converged = false;
};
CoupledResult ir_drop_coupled(const ProgrammedPair& pair, const CrossbarConfig& cfg, const Tensor& x,
                              const IrDropCoupled& spec, RngStream& rng);
/// Graph node: effective line voltages. Gradients via implicit differentiation at
/// the fixed point.
Var coupled_voltages(const Var& x, const Var& g_sum, const IrDropCoupled& spec, std::size_t array_size,
                     const Tensor& jitter);

// ---- Output path -----------------------------------------------------------

struct QuantizerRange {
  double lo;
  double hi;
};
QuantizerRange quantizer_range(const Tensor& z, const AdcQuant& spec);
double quantize_value(double z, int bits, double lo, double hi);
/// Deterministic uniform quantizer (no surrogate noise).
Tensor adc_quantize(const Tensor& z, const AdcQuant& spec);
/// Graph node with the configured surrogate backward. `rng` feeds the
/// stochastic surrogate only.
Var adc_quantize(const Var& z, const AdcQuant& spec, RngStream& rng);

// ---- Programming model and fault statistics --------------------------------

struct WriteResult {
  Tensor g;
  int pulses = 0;       // max over entries
  double residual = 0;  // max |g - target|
  bool converged = false;
};
WriteResult write_program(const Tensor& target, const Tensor& init, const WriteModelConfig& wcfg,
                          const CrossbarConfig& cfg, RngStream& rng);

/// Smallest integer r with r >= p(1-p)(L_W C ||W|| / eps)^2.
std::uint64_t required_redundancy(double p, double lipschitz, double amplification, double weight_norm,
                                  double epsilon);

/// Monte-Carlo variance of the mean perturbation over r copies, each stuck to
/// alpha*w with probability p. Population variance over `samples` trials.
double averaged_stuck_variance_mc(double w, double alpha, double p, std::size_t r, std::size_t samples,
                                  RngStream& rng);

}  // namespace hatdiag
