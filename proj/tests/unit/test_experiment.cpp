#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "hatdiag/experiment.hpp"
#include "hatdiag/io.hpp"

using namespace hatdiag;

namespace {

const char* kSmall = R"({
  "seed": 3,
  "dataset": {"kind": "rings", "n": 300, "noise": 0.1},
  "model": {"layers": [2, 8, 2], "activation": "relu"},
  "train": {"steps": 60, "batch_size": 32},
  "diagnose": {"batch_size": 32, "k_consistency": 8, "k_variance": 8}
})";

std::size_t count_lines(const std::string& csv) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < csv.size(); ++i) n += csv[i] == '\r' && csv[i + 1] == '\n';
  return n;
}

}  // namespace

TEST(Io, Sha256KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Io, CsvQuotingAndCrlf) {
  EXPECT_EQ(csv_field("plain"), "plain");
  EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
  EXPECT_EQ(csv_field("two\nlines"), "\"two\nlines\"");
  CsvWriter w({"name", "value"});
  w.add_row({"x,y", "1"});
  EXPECT_EQ(w.str(), "name,value\r\n\"x,y\",1\r\n");
  EXPECT_THROW(w.add_row({"only one"}), std::invalid_argument);
}

TEST(Io, NumbersRoundTrip) {
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(format_number(1e-7), "1e-07");
  EXPECT_EQ(format_number(std::numeric_limits<double>::quiet_NaN()), "nan");
  EXPECT_EQ(format_number(-std::numeric_limits<double>::infinity()), "-inf");
  const double v = 0.1 + 0.2;
  EXPECT_EQ(std::stod(format_number(v)), v);
}

TEST(Config, DefaultsAndOverrides) {
  const ExperimentConfig cfg = parse_config(kSmall);
  EXPECT_EQ(cfg.seed, 3u);
  EXPECT_EQ(cfg.dataset.n, 300u);
  EXPECT_EQ(cfg.train.steps, 60u);
  EXPECT_EQ(cfg.crossbar.array_size, 128u);
  EXPECT_TRUE(cfg.eval_perturbations.empty());
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config(R"({"bogus": 1})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"seed": "seven"})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"eval_perturbations": [{"kind": "laser"}]})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"eval_perturbations": [{"kind": "additive", "sigma": 1}]})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"sweep": {"parameter": "additive.sigma_r", "values": [1e-6]}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"model": {"layers": [3, 4, 2]}})"), ConfigError);
  EXPECT_THROW(parse_config("{not json"), ConfigError);
  try {
    parse_config(R"({"train": {"stepz": 1}})");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.stepz"), std::string::npos);
  }
}

TEST(Config, HashTracksSemanticFieldsOnly) {
  const ExperimentConfig base = parse_config(kSmall);
  const std::string h = config_hash(base);
  EXPECT_EQ(h.size(), 64u);

  ExperimentConfig same = base;
  same.out_dir = "elsewhere";
  EXPECT_EQ(config_hash(same), h);

  ExperimentConfig explicit_default = parse_config(R"({
    "dataset": {"noise": 0.1, "kind": "rings", "n": 300},
    "seed": 3,
    "model": {"activation": "relu", "layers": [2, 8, 2]},
    "train": {"batch_size": 32, "steps": 60, "learning_rate": 0.1},
    "diagnose": {"k_variance": 8, "k_consistency": 8, "batch_size": 32}
  })");
  EXPECT_EQ(config_hash(explicit_default), h);

  ExperimentConfig seed = base;
  seed.seed = 4;
  EXPECT_NE(config_hash(seed), h);
  ExperimentConfig spec = base;
  spec.eval_perturbations.push_back(Additive{1e-7});
  EXPECT_NE(config_hash(spec), h);
  ExperimentConfig bits = base;
  bits.crossbar.adc_bits = 6;
  EXPECT_NE(config_hash(bits), h);

  EXPECT_EQ(sha256_hex(canonical_config(base)), h);
  EXPECT_EQ(canonical_config(parse_config(canonical_config(base))), canonical_config(base));
}

TEST(Config, SpecJsonRoundTrip) {
  const std::vector<PerturbationSpec> specs{
      Additive{2e-7}, Multiplicative{0.2}, Drift{}, StuckAt{0.3, StuckPolicy::kHoldProgrammed},
      IrDropSimplified{0.5}, IrDropCoupled{}, AdcQuant{}, WriteProgram{}};
  for (const auto& s : specs) {
    const std::string j = spec_to_json(s);
    EXPECT_EQ(spec_to_json(spec_from_json(j)), j);
    EXPECT_EQ(nlohmann::json::parse(j).at("kind"), kind_name(s));
  }
}

TEST(Config, AxisValues) {
  ExperimentConfig cfg = parse_config(R"({"eval_perturbations": [{"kind": "adc_quant", "bits": 8}]})");
  apply_axis_value(cfg, "adc_quant.bits", 4);
  EXPECT_EQ(std::get<AdcQuant>(cfg.eval_perturbations[0]).bits, 4);
  EXPECT_THROW(apply_axis_value(cfg, "adc_quant.bits", 4.5), ConfigError);
  EXPECT_THROW(apply_axis_value(cfg, "adc_quant.nothing", 1), ConfigError);
}

TEST(Run, CleanPipelinesAgree) {
  const RunRecord r = execute_run(parse_config(kSmall));
  EXPECT_FALSE(r.diverged);
  EXPECT_EQ(r.compensated_accuracy, r.uncompensated_accuracy);
  EXPECT_EQ(r.compensated_accuracy, r.clean_accuracy);
  EXPECT_EQ(r.steps.size(), 60u);
  EXPECT_EQ(r.trace.norms().size(), 60u);

  const nlohmann::json j = nlohmann::json::parse(run_record_json(r));
  EXPECT_EQ(j.at("config_hash"), config_hash(parse_config(kSmall)));
  EXPECT_EQ(j.at("artifact_version"), std::string(artifact_version()));
  EXPECT_EQ(count_lines(trace_csv(r)), 61u);
}

TEST(Run, Deterministic) {
  const ExperimentConfig cfg = parse_config(kSmall);
  EXPECT_EQ(run_record_json(execute_run(cfg)), run_record_json(execute_run(cfg)));
}

TEST(Sweep, SinglePointAndRows) {
  ExperimentConfig cfg = parse_config(kSmall);
  cfg.eval_perturbations = {Additive{1e-7}};
  cfg.sweep = SweepAxis{"additive.sigma_r", {0.0, 2e-6}};
  const SweepResult one = execute_sweep(cfg, 1);
  ASSERT_EQ(one.points.size(), 2u);
  EXPECT_EQ(one.points[1].config.seed, cfg.seed ^ 1u);
  const std::string csv = sweep_csv(one);
  EXPECT_EQ(count_lines(csv), 3u);
  EXPECT_EQ(csv.substr(0, csv.find("\r\n")),
            "additive.sigma_r,seed,status,compensated_accuracy,uncompensated_accuracy,grad_norm_mean,"
            "grad_norm_std,grad_variance,regime,frozen_fraction");
  EXPECT_EQ(sweep_csv(execute_sweep(cfg, 2)), csv);
}

TEST(Diagnose, CleanReport) {
  const DiagnoseOutput out = execute_diagnose(parse_config(kSmall));
  ASSERT_EQ(out.reports.size(), 1u);
  EXPECT_EQ(out.reports[0].spec, "clean");
  EXPECT_EQ(out.reports[0].regime, Regime::kI);
  EXPECT_GT(out.thresholds.t_var, 0.0);
}

TEST(Calibrate, SimplifiedFamilyHitsTarget) {
  ExperimentConfig cfg = parse_config(kSmall);
  cfg.eval_perturbations = {IrDropSimplified{}};
  cfg.family.span = 10.0;
  cfg.calibration.samples = 64;
  const CalibrateOutput out = execute_calibrate(cfg, 0.02);
  ASSERT_FALSE(out.failed) << out.failure;
  EXPECT_LE(out.result.trials_used, 20);
  const nlohmann::json j = nlohmann::json::parse(calibrate_json(out));
  EXPECT_EQ(j.at("config_hash"), config_hash(cfg));
}

TEST(Dataset, CsvExport) {
  const DatasetSplits d = synth_dataset(DatasetKind::kXor, 100, 0.1, 1);
  const std::string csv = dataset_csv(d.test);
  EXPECT_EQ(count_lines(csv), d.test.size() + 1);
}
