#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hatdiag/calibration.hpp"
#include "hatdiag/dataset.hpp"
#include "hatdiag/diagnostics.hpp"
#include "hatdiag/hat.hpp"

namespace hatdiag {

std::string_view artifact_version() noexcept;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSpec {
  DatasetKind kind = DatasetKind::kRings;
  std::size_t n = 2000;
  double noise = 0.1;
};

struct ModelSpec {
  std::vector<std::size_t> layers{2, 32, 2};
  Activation activation = Activation::kRelu;
};

struct SweepAxis {
  std::string parameter;  // "<kind>.<field>", e.g. "additive.sigma_r"
  std::vector<double> values;
};

struct DiagnoseConfig {
  std::size_t batch_size = 256;
  std::size_t k_consistency = 256;
  std::size_t k_variance = 256;
  double baseline_sigma_r = 1e-7;
  RegimeThresholds thresholds;
};

/// Calibrated spec: `parameter` of the `kind` entry in the evaluation pipeline is
/// set to s * span.
struct CalibrationFamily {
  std::string kind = "ir_drop_simplified";
  std::string parameter = "beta";
  double span = 1.0;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DatasetSpec dataset;
  ModelSpec model;
  CrossbarConfig crossbar;
  TrainConfig train;
  std::vector<PerturbationSpec> train_perturbations;
  std::vector<PerturbationSpec> eval_perturbations;
  std::size_t noise_samples = 8;
  std::optional<SweepAxis> sweep;
  DiagnoseConfig diagnose;
  CalibrationConfig calibration;
  CalibrationFamily family;
  std::string out_dir;  // not part of the hash

  void validate() const;
};

/// Parses a JSON document. Missing keys keep their defaults; unknown keys,
/// type mismatches and unresolvable sweep axes raise ConfigError.
ExperimentConfig parse_config(std::string_view json_text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Fully expanded config as sorted-key JSON without whitespace.
std::string canonical_config(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

std::string spec_to_json(const PerturbationSpec& spec);
PerturbationSpec spec_from_json(std::string_view json_text);

/// Sets `parameter` on every matching entry of both pipelines. Integer fields
/// require an integral value.
void apply_axis_value(ExperimentConfig& cfg, const std::string& parameter, double value);

struct RunRecord {
  std::string config_hash;
  std::uint64_t seed = 0;
  bool diverged = false;
  std::size_t failed_step = 0;
  std::string failure;

  std::vector<double> train_accuracy;  // per epoch, HAT-trained model
  std::vector<double> val_accuracy;
  std::vector<double> uncompensated_train_accuracy;
  std::vector<double> uncompensated_val_accuracy;

  double compensated_accuracy = 0;
  double compensated_accuracy_std = 0;
  double uncompensated_accuracy = 0;
  double uncompensated_accuracy_std = 0;
  double clean_accuracy = 0;  // uncompensated model, no perturbation
  double delta_global = 0;    // uncompensated model under the evaluation pipeline
  double trained_frozen_fraction = 0;

  std::vector<StepRecord> steps;
  GradientTrace trace = GradientTrace(50);
  TraceStats trace_summary;
  DiagnosticsReport diagnostics;

  double wall_clock_seconds = 0;
};

/// Reference model: same seed and schedule, trained with no perturbation.
HatModel build_model(const ExperimentConfig& cfg);
TrainConfig train_config(const ExperimentConfig& cfg);
Batch diagnostic_batch(const ExperimentConfig& cfg, const DatasetSplits& data);

RunRecord execute_run(const ExperimentConfig& cfg);
RunRecord execute_run(const ExperimentConfig& cfg, const DatasetSplits& data);

std::string run_record_json(const RunRecord& record);
std::string trace_csv(const RunRecord& record);
std::string epochs_csv(const RunRecord& record);
/// run.json, trace.csv, epochs.csv under `dir`.
void write_run_outputs(const RunRecord& record, const std::filesystem::path& dir);

struct SweepPoint {
  double value = 0;
  ExperimentConfig config;
  RunRecord record;
};

struct SweepResult {
  std::string config_hash;
  SweepAxis axis;
  std::vector<SweepPoint> points;
  bool any_diverged() const;
};

/// One run per axis value with seed = master seed XOR index; the dataset is drawn
/// once from the master seed. `jobs` > 1 runs points concurrently with identical
/// results.
SweepResult execute_sweep(const ExperimentConfig& cfg, std::size_t jobs = 1);

std::string sweep_csv(const SweepResult& result);
std::string sweep_json(const SweepResult& result);
/// sweep.csv, sweep.json and points/NNN/{run.json,trace.csv,epochs.csv}.
void write_sweep_outputs(const SweepResult& result, const std::filesystem::path& dir);

struct DiagnoseOutput {
  std::string config_hash;
  double reference_accuracy = 0;
  double baseline_variance = 0;
  RegimeThresholds thresholds;
  std::vector<DiagnosticsReport> reports;  // one per evaluation spec, or "clean"
};

/// Trains the reference model and diagnoses each evaluation spec on a fixed batch.
DiagnoseOutput execute_diagnose(const ExperimentConfig& cfg);
std::string diagnose_json(const DiagnoseOutput& out);
std::string report_json(const DiagnosticsReport& report);

struct CalibrateOutput {
  std::string config_hash;
  double target = 0;
  CalibrationFamily family;
  CalibrationResult result;
  bool failed = false;
  std::string failure;
};

/// Calibrates the family on the reference model over `calibration.samples` training
/// inputs, with `target` overriding the config's target.
CalibrateOutput execute_calibrate(const ExperimentConfig& cfg, double target);
std::string calibrate_json(const CalibrateOutput& out);

std::string dataset_csv(const Dataset& data);
/// train.csv, val.csv, test.csv and dataset.json under `dir`.
void write_dataset_outputs(const ExperimentConfig& cfg, const std::filesystem::path& dir);

/// {"artifact_version", "command", "config_hash", "wall_clock_seconds"}.
std::string timing_json(const std::string& command, const std::string& config_hash, double seconds);

}  // namespace hatdiag
