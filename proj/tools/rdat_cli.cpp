// rdat command-line front end.
//
//   rdat synth-data --nodes 20 --timesteps 2000 --seed 7 --out data/
//   rdat train --config c.yaml --out run/model
//   rdat train-policy --config c.yaml --model run/model --out run/policy
//   rdat defend --config c.yaml --model run/model --policy run/policy --out run/rdat
//   rdat attack --config c.yaml --model run/rdat --out run/attack
//   rdat report --config c.yaml --out run/report
//   rdat sweep --config c.yaml --out run/sweep
//
// Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "rdat/errors.hpp"
#include "rdat/harness.hpp"
#include "rdat/log.hpp"

namespace fs = std::filesystem;
using namespace rdat;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::uint64_t seed = 1;
  std::string out;
  std::string data;
  bool verbose = false;
};

void add_common(CLI::App* app, Common& c, bool with_data = true) {
  app->add_option("--config", c.config, "YAML experiment config");
  app->add_option("--seed", c.seed, "experiment seed");
  app->add_option("--out", c.out, "output directory")->required();
  if (with_data) app->add_option("--data", c.data, "directory holding series.csv and adjacency.csv");
  app->add_flag("-v,--verbose", c.verbose, "progress messages on stderr");
}

harness::ExperimentConfig config_for(const Common& c) {
  harness::ExperimentConfig cfg = c.config.empty() ? harness::ExperimentConfig{} : harness::load_config(c.config);
  if (!c.data.empty()) {
    cfg.data.source = "csv";
    cfg.data.series_path = (fs::path(c.data) / "series.csv").string();
    cfg.data.adjacency_path = (fs::path(c.data) / "adjacency.csv").string();
  }
  harness::validate(cfg);
  return cfg;
}

void require_dir(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError("missing required input: " + what);
  if (!fs::exists(fs::path(path) / "manifest.txt")) {
    throw UsageError("missing required input: " + what + " (no checkpoint at '" + path + "')");
  }
}

Manifest seed_manifest(std::uint64_t seed) { return Manifest{{"seed", std::to_string(seed)}}; }

int run_synth(std::size_t nodes, std::size_t timesteps, const Common& c) {
  const datakit::Dataset d = datakit::synth_traffic(nodes, timesteps, c.seed);
  fs::create_directories(c.out);
  datakit::write_csv(d, fs::path(c.out) / "series.csv", fs::path(c.out) / "adjacency.csv");
  std::cout << "wrote " << (fs::path(c.out) / "series.csv").string() << " and adjacency.csv\n";
  return 0;
}

int run_train(const Common& c) {
  const auto cfg = config_for(c);
  const auto data = harness::build_data(cfg, c.seed);
  const auto model = harness::train_non_defense(cfg, data, c.seed);
  forecaster::save_forecaster(c.out, model, seed_manifest(c.seed));
  const auto m = harness::clean_metrics(model, data, cfg.eval);
  std::cout << "test MAE " << m.mae << " RMSE " << m.rmse << "\n";
  return 0;
}

int run_train_policy(const Common& c, const std::string& model_dir) {
  require_dir(model_dir, "--model forecaster checkpoint");
  const auto cfg = config_for(c);
  const auto data = harness::build_data(cfg, c.seed);
  const auto model = forecaster::load_forecaster(model_dir);
  policy::PolicyTrainResult log;
  const auto net = harness::train_policy_net(cfg, data, model, c.seed, &log);
  policy::save_policy(c.out, net, seed_manifest(c.seed));
  policy::write_policy_log(fs::path(c.out) / "policy_log.csv", log.log);
  std::cout << "policy steps " << log.policy_steps << ", final epoch reward " << log.epoch_reward_mean.back() << "\n";
  return 0;
}

int run_defend(const Common& c, const std::string& model_dir, const std::string& policy_dir, const std::string& defense) {
  require_dir(model_dir, "--model forecaster checkpoint");
  auto cfg = config_for(c);
  const bool needs_policy = defense == "rdat" || defense == "at_policy";
  std::optional<policy::PolicyNet> net;
  if (needs_policy) {
    require_dir(policy_dir, "--policy checkpoint (defense '" + defense + "' selects nodes with a policy)");
    net = policy::load_policy(policy_dir);
  }
  const auto data = harness::build_data(cfg, c.seed);
  const auto clean = forecaster::load_forecaster(model_dir);
  cfg.init_from_clean = true;  // the supplied checkpoint is the starting point
  const auto result = harness::train_defense(defense, cfg, data, clean, net ? &*net : nullptr, c.seed);

  Manifest extra = seed_manifest(c.seed);
  extra["defense"] = defense;
  extra["init_from"] = model_dir;
  forecaster::save_forecaster(c.out, result.model, extra);
  advtrain::write_train_log(fs::path(c.out) / "train_log.csv", result.log);
  std::ofstream lineage(fs::path(c.out) / "teacher_lineage.txt");
  lineage << "# epoch teacher_epoch teacher_checksum\n";
  for (const auto& r : result.log.epochs) lineage << r.epoch << ' ' << r.teacher_epoch << ' ' << r.teacher_checksum << '\n';
  const auto m = harness::clean_metrics(result.model, data, cfg.eval);
  std::cout << "test MAE " << m.mae << " RMSE " << m.rmse << "\n";
  return 0;
}

int run_attack(const Common& c, const std::string& model_dir) {
  require_dir(model_dir, "--model forecaster checkpoint");
  const auto cfg = config_for(c);
  const auto data = harness::build_data(cfg, c.seed);
  const auto model = forecaster::load_forecaster(model_dir);
  harness::EvalReport report;
  report.seeds = {c.seed};
  report.config_hash = harness::config_hash(cfg);
  const auto clean = harness::clean_metrics(model, data, cfg.eval);
  report.clean.push_back({"model", "clean", 0.0, {clean.mae}, {clean.rmse}, {}});
  for (auto s : cfg.eval.strategies) {
    for (double l : cfg.eval.lambdas) {
      harness::CellResult cell{"model", perturb::to_string(s), l, {}, {}, {}};
      try {
        const auto m = harness::attack_metrics(model, data, s, l, cfg.eval, c.seed);
        cell.mae.push_back(m.mae);
        cell.rmse.push_back(m.rmse);
      } catch (const std::exception& e) {
        cell.errors.push_back(e.what());
      }
      report.cells.push_back(cell);
    }
  }
  harness::emit_report(report, c.out);
  std::cout << "wrote " << (fs::path(c.out) / "report.csv").string() << "\n";
  return 0;
}

int run_report(const Common& c, bool sweep, bool seed_given) {
  auto cfg = config_for(c);
  if (sweep) cfg.sweep = true;
  if (seed_given) cfg.seeds = {c.seed};
  const auto report = harness::run_experiment(cfg);
  harness::emit_report(report, c.out);
  std::cout << "wrote " << (fs::path(c.out) / "report.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial training and evaluation for graph traffic forecasters"};
  app.require_subcommand(1);

  Common common;
  std::size_t nodes = 20, timesteps = 2000;
  std::string model_dir, policy_dir, defense = "rdat";

  auto* synth = app.add_subcommand("synth-data", "generate a synthetic dataset as CSV");
  add_common(synth, common, false);
  synth->add_option("--nodes", nodes, "node count");
  synth->add_option("--timesteps", timesteps, "series length");

  auto* train = app.add_subcommand("train", "train the undefended forecaster");
  add_common(train, common);

  auto* tpol = app.add_subcommand("train-policy", "train the node-selection policy");
  add_common(tpol, common);
  tpol->add_option("--model", model_dir, "forecaster checkpoint to attack during policy training");

  auto* defend = app.add_subcommand("defend", "adversarially train a forecaster");
  add_common(defend, common);
  defend->add_option("--model", model_dir, "starting forecaster checkpoint");
  defend->add_option("--policy", policy_dir, "policy checkpoint");
  defend->add_option("--defense", defense, "at | at_policy | rdat")
      ->check(CLI::IsMember({"at", "at_policy", "rdat"}));

  auto* attack = app.add_subcommand("attack", "evaluate a checkpoint under the attack grid");
  add_common(attack, common);
  attack->add_option("--model", model_dir, "forecaster checkpoint");

  auto* report = app.add_subcommand("report", "full experiment over the configured seeds");
  add_common(report, common);
  auto* sweep = app.add_subcommand("sweep", "full experiment over the sweep attack strengths");
  add_common(sweep, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }
  log::set_level(common.verbose ? log::Level::Info : log::Level::Warn);

  try {
    if (synth->parsed()) return run_synth(nodes, timesteps, common);
    if (train->parsed()) return run_train(common);
    if (tpol->parsed()) return run_train_policy(common, model_dir);
    if (defend->parsed()) return run_defend(common, model_dir, policy_dir, defense);
    if (attack->parsed()) return run_attack(common, model_dir);
    const CLI::App* sub = report->parsed() ? report : sweep;
    return run_report(common, sweep->parsed(), sub->count("--seed") > 0);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const ParameterError& e) {
    std::cerr << "invalid parameter: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return 2;
  }
}
