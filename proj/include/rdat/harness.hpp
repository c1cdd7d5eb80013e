#pragma once

// Experiment orchestration: configuration, the defense x attack x strength
// grid over seeds, aggregation, and report files.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rdat/advtrain.hpp"
#include "rdat/datakit.hpp"
#include "rdat/forecaster.hpp"
#include "rdat/perturb.hpp"
#include "rdat/policy.hpp"

namespace rdat::harness {

inline constexpr const char* kVersion = "rdat 0.1.0";

struct DataSpec {
  std::string source = "synthetic";  // synthetic | csv
  std::size_t nodes = 20;
  std::size_t timesteps = 2000;
  std::string series_path;
  std::string adjacency_path;
};

struct EvalSettings {
  std::vector<perturb::Strategy> strategies{perturb::Strategy::Random, perturb::Strategy::Degree,
                                            perturb::Strategy::PageRank, perturb::Strategy::Centrality,
                                            perturb::Strategy::Tnds};
  std::vector<double> lambdas{20.0};  // percent of nodes attacked
  std::vector<double> sweep_lambdas{40.0, 60.0, 80.0, 100.0};
  double epsilon = 0.5;
  std::size_t steps = 5;
  double gamma = 0.1;
  std::size_t batch_size = 64;
};

// Defense names: "at" (random nodes, MSE, no teacher), "at_policy" (policy
// nodes, no teacher) and "rdat" (policy nodes with distillation). The
// undefended model is always trained and reported as "non_defense".
struct ExperimentConfig {
  DataSpec data;
  forecaster::ArchConfig arch;
  forecaster::TrainConfig train;
  policy::PolicyConfig policy;
  policy::PolicyTrainConfig policy_train;
  advtrain::ATConfig adversarial;
  bool init_from_clean = true;  // defenses start from the undefended weights
  EvalSettings eval;
  std::vector<std::string> defenses{"at", "rdat"};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  bool sweep = false;  // attack at eval.sweep_lambdas instead of eval.lambdas
};

// Throws ParameterError / ConfigError on invalid settings.
void validate(const ExperimentConfig& config);

// YAML with sections data, model, train, policy, policy_train, adversarial,
// evaluation, experiment. Missing keys keep defaults; unknown keys throw
// ConfigError.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& yaml_text);
std::string to_yaml(const ExperimentConfig& config);
// FNV-1a of the canonical YAML form.
std::uint64_t config_hash(const ExperimentConfig& config);

// ----------------------------------------------------------------- stages

struct RunData {
  datakit::Dataset raw;
  datakit::PreparedData prepared;
  perturb::GraphScores scores;
};

RunData build_data(const ExperimentConfig& config, std::uint64_t seed);

forecaster::Forecaster train_non_defense(const ExperimentConfig& config, const RunData& data, std::uint64_t seed);
policy::PolicyNet train_policy_net(const ExperimentConfig& config, const RunData& data,
                                   const forecaster::Forecaster& clean, std::uint64_t seed,
                                   policy::PolicyTrainResult* log = nullptr);
advtrain::ATResult train_defense(const std::string& defense, const ExperimentConfig& config, const RunData& data,
                                 const forecaster::Forecaster& clean, const policy::PolicyNet* policy,
                                 std::uint64_t seed);

std::size_t nodes_for_lambda(double lambda_percent, std::size_t n);

// Test-split metrics under one attack cell, in original units. Random node
// picks and PGD starts depend only on (seed, lambda, batch), so every model
// and every strategy faces the same draws.
forecaster::Metrics attack_metrics(const forecaster::Forecaster& model, const RunData& data, perturb::Strategy strategy,
                                   double lambda_percent, const EvalSettings& eval, std::uint64_t seed);
forecaster::Metrics clean_metrics(const forecaster::Forecaster& model, const RunData& data, const EvalSettings& eval);

// ----------------------------------------------------------------- report

struct CellResult {
  std::string defense;
  std::string attack;  // strategy name, or "clean"
  double lambda = 0.0;
  std::vector<double> mae;  // one per successful seed
  std::vector<double> rmse;
  std::vector<std::string> errors;  // one per failed seed

  bool failed() const { return !errors.empty(); }
  double mae_mean() const;
  double mae_std() const;
  double rmse_mean() const;
  double rmse_std() const;
};

struct EvalReport {
  std::vector<CellResult> clean;  // one per defense
  std::vector<CellResult> cells;
  std::vector<std::uint64_t> seeds;
  std::uint64_t config_hash = 0;

  const CellResult* find(const std::string& defense, const std::string& attack, double lambda) const;
};

EvalReport run_experiment(const ExperimentConfig& config);

// Writes report.csv, report.json, mae_<strategy>.svg per strategy and
// manifest.json (config hash, seeds, version, timestamp).
void emit_report(const EvalReport& report, const std::filesystem::path& out_dir);

// Rounds to 4 decimals, as written to the report files.
double report_round(double v);

}  // namespace rdat::harness
