#include <chrono>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "hatdiag/experiment.hpp"
#include "hatdiag/io.hpp"

namespace fs = std::filesystem;
using namespace hatdiag;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitDivergence = 2;
constexpr int kExitUsage = 64;

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<double> target;
  std::size_t jobs = 1;
};

ExperimentConfig load(const Options& opt) {
  ExperimentConfig cfg = opt.config.empty() ? ExperimentConfig{} : load_config(opt.config);
  if (opt.seed) {
    cfg.seed = *opt.seed;
    cfg.validate();
  }
  return cfg;
}

fs::path out_dir(const Options& opt, const ExperimentConfig& cfg) {
  if (!opt.out.empty()) return opt.out;
  if (!cfg.out_dir.empty()) return cfg.out_dir;
  return "out";
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_run(const Options& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig cfg = load(opt);
  const fs::path dir = out_dir(opt, cfg);
  const RunRecord rec = execute_run(cfg);
  write_run_outputs(rec, dir);
  write_text_file(dir / "timing.json", timing_json("run", rec.config_hash, elapsed(t0)));
  std::printf("compensated %s  uncompensated %s  clean %s  regime %s\n", format_number(rec.compensated_accuracy).c_str(),
              format_number(rec.uncompensated_accuracy).c_str(), format_number(rec.clean_accuracy).c_str(),
              regime_name(rec.diagnostics.regime).c_str());
  if (rec.diverged) {
    std::fprintf(stderr, "training diverged at step %zu: %s\n", rec.failed_step, rec.failure.c_str());
    return kExitDivergence;
  }
  return kExitOk;
}

int cmd_sweep(const Options& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig cfg = load(opt);
  if (!cfg.sweep) throw ConfigError("sweep: config has no \"sweep\" section");
  const fs::path dir = out_dir(opt, cfg);
  const SweepResult res = execute_sweep(cfg, opt.jobs);
  write_sweep_outputs(res, dir);
  write_text_file(dir / "timing.json", timing_json("sweep", res.config_hash, elapsed(t0)));
  std::printf("%zu points written to %s\n", res.points.size(), (dir / "sweep.csv").string().c_str());
  return res.any_diverged() ? kExitDivergence : kExitOk;
}

int cmd_diagnose(const Options& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig cfg = load(opt);
  const fs::path dir = out_dir(opt, cfg);
  const DiagnoseOutput out = execute_diagnose(cfg);
  write_text_file(dir / "diagnostics.json", diagnose_json(out));
  write_text_file(dir / "timing.json", timing_json("diagnose", out.config_hash, elapsed(t0)));
  for (const auto& r : out.reports) {
    std::printf("%-24s regime %-3s cos %s var %s sens %s\n", r.spec.c_str(), regime_name(r.regime).c_str(),
                format_number(r.consistency_cosine).c_str(), format_number(r.grad_variance).c_str(),
                format_number(r.sensitivity_fraction).c_str());
  }
  return kExitOk;
}

int cmd_calibrate(const Options& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig cfg = load(opt);
  const fs::path dir = out_dir(opt, cfg);
  const CalibrateOutput out = execute_calibrate(cfg, *opt.target);
  write_text_file(dir / "calibration.json", calibrate_json(out));
  write_text_file(dir / "timing.json", timing_json("calibrate", out.config_hash, elapsed(t0)));
  if (out.failed) {
    std::fprintf(stderr, "calibration failed: %s\n", out.failure.c_str());
    return kExitFailure;
  }
  std::printf("s* = %s  delta = %s  trials = %d%s\n", format_number(out.result.s_star).c_str(),
              format_number(out.result.delta).c_str(), out.result.trials_used,
              out.result.converged ? "" : "  (best trial, band not reached)");
  return kExitOk;
}

int cmd_synth(const Options& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig cfg = load(opt);
  const fs::path dir = out_dir(opt, cfg);
  write_dataset_outputs(cfg, dir);
  write_text_file(dir / "timing.json", timing_json("synth-data", config_hash(cfg), elapsed(t0)));
  std::printf("dataset written to %s\n", dir.string().c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hardware-aware training and learnability diagnostics for analog crossbars"};
  app.set_version_flag("--version", std::string(artifact_version()));
  app.require_subcommand(1);

  Options opt;
  auto add_common = [&opt](CLI::App* sub, bool config_required) {
    auto* c = sub->add_option("--config", opt.config, "experiment config (JSON)")->check(CLI::ExistingFile);
    if (config_required) c->required();
    sub->add_option("--out", opt.out, "output directory");
    sub->add_option("--seed", opt.seed, "override the master seed");
  };

  auto* run = app.add_subcommand("run", "train compensated and uncompensated models, write a run record");
  add_common(run, true);
  auto* sweep = app.add_subcommand("sweep", "one run per sweep-axis value plus a combined CSV");
  add_common(sweep, true);
  sweep->add_option("--jobs", opt.jobs, "concurrent sweep points")->check(CLI::PositiveNumber);
  auto* diagnose = app.add_subcommand("diagnose", "learnability diagnostics per evaluation spec");
  add_common(diagnose, true);
  auto* calibrate = app.add_subcommand("calibrate", "search the family strength for a target distortion");
  add_common(calibrate, true);
  calibrate->add_option("--target", opt.target, "target delta_global")->required()->check(CLI::PositiveNumber);
  auto* synth = app.add_subcommand("synth-data", "write the synthetic dataset splits as CSV");
  add_common(synth, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (run->parsed()) return cmd_run(opt);
    if (sweep->parsed()) return cmd_sweep(opt);
    if (diagnose->parsed()) return cmd_diagnose(opt);
    if (calibrate->parsed()) return cmd_calibrate(opt);
    if (synth->parsed()) return cmd_synth(opt);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const TrainingDivergence& e) {
    std::fprintf(stderr, "training diverged at step %zu: %s\n", e.step(), e.what());
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitUsage;
}
