#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hatdiag/autodiff.hpp"
#include "hatdiag/crossbar.hpp"
#include "hatdiag/dataset.hpp"
#include "hatdiag/optimizer.hpp"
#include "hatdiag/perturbation.hpp"
#include "hatdiag/rng.hpp"

namespace hatdiag {

enum class Activation { kIdentity, kRelu };

Activation parse_activation(const std::string& name);
std::string activation_name(Activation a);

struct TrainConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 128;
  std::size_t epochs = 100;
  std::size_t steps = 0;  // when non-zero, overrides epochs
  bool cosine = true;
  double lambda_reg = 0.0;
  double beta_reg = 0.9;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t total_steps(std::size_t train_size) const;
};

struct TimeState {
  std::size_t step = 0;
  TimeMode mode = TimeMode::kAccumulated;

  void advance() {
    if (mode == TimeMode::kAccumulated) ++step;
  }
};

struct StuckCache {
  double rho = 0;
  StuckPolicy policy = StuckPolicy::kPinToBound;
  StuckState state;
};

struct Layer {
  Parameter weight;  // (out, in)
  Parameter bias;    // (out)
  Activation activation = Activation::kRelu;
  CrossbarConfig crossbar;
  std::vector<PerturbationSpec> perturbations;
  std::optional<StuckCache> stuck;

  std::size_t inputs() const { return weight.value().cols(); }
  std::size_t outputs() const { return weight.value().rows(); }
};

/// Rejects out-of-order pipelines, more than one compute-path operator and more
/// than one stuck-at operator.
void validate_pipeline(const std::vector<PerturbationSpec>& specs);

/// Multi-layer perceptron whose linear layers run through the crossbar pipeline.
/// Copies are deep: the copy owns fresh parameter nodes.
class HatModel {
 public:
  HatModel() = default;
  /// `sizes` = {in, hidden..., out}; hidden layers use `hidden`, the last layer is
  /// linear. Weights and biases ~ U(-1/sqrt(in), 1/sqrt(in)).
  HatModel(const std::vector<std::size_t>& sizes, Activation hidden, const CrossbarConfig& crossbar,
           std::uint64_t seed);

  HatModel(const HatModel& other);
  HatModel& operator=(const HatModel& other);
  HatModel(HatModel&&) noexcept = default;
  HatModel& operator=(HatModel&&) noexcept = default;

  std::vector<Layer>& layers() noexcept { return layers_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::uint64_t seed() const noexcept { return seed_; }

  /// Installs the same pipeline on every layer. Fault state is dropped when the
  /// pipeline no longer contains a stuck-at operator.
  void set_perturbations(const std::vector<PerturbationSpec>& specs);
  std::vector<Parameter*> parameters();
  std::vector<Parameter*> weights();

  /// Stuck masks for the installed pipeline, sampled once from the model seed and
  /// kept while (rho, policy) stay the same. Frozen markers on W follow the mask.
  void prepare_faults();
  double frozen_fraction() const;

 private:
  std::vector<Layer> layers_;
  std::uint64_t seed_ = 0;
};

/// Installs a pipeline for the lifetime of the scope and then restores each
/// layer's previous pipeline, fault cache and frozen markers.
class PipelineScope {
 public:
  PipelineScope(HatModel& model, const std::vector<PerturbationSpec>& specs);
  ~PipelineScope();
  PipelineScope(const PipelineScope&) = delete;
  PipelineScope& operator=(const PipelineScope&) = delete;

 private:
  struct Saved {
    std::vector<PerturbationSpec> perturbations;
    std::optional<StuckCache> stuck;
    Tensor frozen;
  };
  HatModel& model_;
  std::vector<Saved> saved_;
};

/// Random streams for one forward pass: `program` feeds programming-time draws
/// (variability, write noise, fixed-mode drift time), `read` feeds per-read draws.
struct NoiseStreams {
  RngStream program;
  RngStream read;

  static NoiseStreams from(const RngStream& base) { return {base.child("program"), base.child("read")}; }
};

struct EffectiveWeights {
  Var w_eff;
  ProgrammedVars programmed;  // conductances after all conductance-domain ops
  bool bypass = false;        // identity pipeline: w_eff = clip(W)
  bool drift_clipped = false;
};

/// program -> programming ops -> drift -> read noise -> reconstruct. Sampled noise
/// enters as constants; stuck coordinates carry zero gradient.
EffectiveWeights build_effective_weights(Layer& layer, std::size_t layer_index, NoiseStreams& rng,
                                         const TimeState& time);

struct ForwardOptions {
  /// Replaces each layer's effective-weight value (gradient still reaches W through
  /// the clamp) and runs compute/output ops at their noise-free mean.
  const std::vector<Tensor>* mean_field_weights = nullptr;
  /// Collects each layer's pre-activation output z + b.
  std::vector<Tensor>* layer_outputs = nullptr;
  /// Collects each layer's effective-weight value.
  std::vector<Tensor>* effective_weights = nullptr;
};

Var model_forward(HatModel& model, const Tensor& x, NoiseStreams& rng, const TimeState& time,
                  const ForwardOptions& options = {});

/// (1/L) sum_l mean_i relu(|W_i| - beta_reg * W_max)^2.
Var range_regularization(HatModel& model, double beta_reg);

/// Raised when a step produces a non-finite loss or gradient.
class TrainingDivergence : public std::runtime_error {
 public:
  TrainingDivergence(std::size_t step, std::string spec, const std::string& what);
  std::size_t step() const noexcept { return step_; }
  const std::string& spec() const noexcept { return spec_; }

 private:
  std::size_t step_;
  std::string spec_;
};

struct Batch {
  Tensor x;
  std::vector<int> labels;
};

struct StepRecord {
  std::size_t step = 0;
  double task_loss = 0;
  double total_loss = 0;
  double grad_norm = 0;
  double learning_rate = 0;
};

/// One iteration of hardware-aware training: fresh noise, forward, task +
/// lambda_reg * L_reg, backward, SGD update, time advance.
StepRecord hat_train_step(HatModel& model, const Batch& batch, const TrainConfig& cfg, OptimizerState& opt,
                          const RngStream& rng, TimeState& time);

struct TrainResult {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_train_accuracy;
  std::vector<double> epoch_val_accuracy;
  TimeState time;
  bool diverged = false;
  std::size_t failed_step = 0;
  std::string failure;
};

/// Full training run. Batches are drawn by per-epoch shuffles from the config seed.
/// Divergence stops training and is reported in the result.
TrainResult hat_train(HatModel& model, const Dataset& train, const Dataset* val, const TrainConfig& cfg);

struct EvalResult {
  double accuracy = 0;
  double accuracy_std = 0;  // population std over draws
  std::vector<double> draw_accuracy;
  double delta_global = 0;  // mean over draws
  std::vector<double> draw_delta_global;
};

/// Accuracy under `eval_specs`, averaged over `n_noise_samples` draws. The model's
/// installed pipeline is restored afterwards.
EvalResult evaluate(HatModel& model, const Dataset& data, const std::vector<PerturbationSpec>& eval_specs,
                    const RngStream& rng, std::size_t n_noise_samples, const TimeState& time);

double accuracy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace hatdiag
