#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "rdat/errors.hpp"
#include "rdat/harness.hpp"

using namespace rdat;
using namespace rdat::harness;
namespace fs = std::filesystem;

namespace {

ExperimentConfig toy() { return load_config(fs::path(RDAT_SOURCE_DIR) / "configs" / "toy.yaml"); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_rows(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

fs::path fresh(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("rdat_test_" + name);
  fs::remove_all(d);
  return d;
}

// One toy run shared by the report tests.
const EvalReport& toy_report() {
  static const EvalReport r = [] {
    ExperimentConfig c = toy();
    c.defenses = {"at", "at_policy", "rdat"};
    c.eval.lambdas = {20, 100};
    return run_experiment(c);
  }();
  return r;
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("config file parses onto defaults") {
    const ExperimentConfig c = toy();
    CHECK(c.data.nodes == 8);
    CHECK(c.arch.hidden_channels == 8);
    CHECK(c.arch.dilations == std::vector<std::size_t>{1, 2});
    CHECK(c.arch.history == 12);
    CHECK(c.adversarial.epochs == 2);
    CHECK(c.adversarial.alpha == doctest::Approx(0.4));
    CHECK(c.eval.strategies.size() == 5);
    CHECK(c.defenses == std::vector<std::string>{"at", "rdat"});
    CHECK(c.seeds == std::vector<std::uint64_t>{1});
    CHECK(c.init_from_clean);
  }

  TEST_CASE("bad configs are rejected") {
    CHECK_THROWS_AS(parse_config("model:\n  hiden_channels: 3\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("modle:\n  blocks: 3\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("evaluation:\n  lambdas: [0]\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("evaluation:\n  lambdas: [120]\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("evaluation:\n  strategies: [random, fancy]\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("experiment:\n  defenses: [shield]\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("experiment:\n  seeds: []\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("model:\n  blocks: [1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("model:\n  blocks: many\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("adversarial:\n  pgd_loss: huber\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("data:\n  source: csv\n"), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/config.yaml"), std::exception);
    CHECK_NOTHROW(parse_config(""));
  }

  TEST_CASE("canonical YAML round trips and drives the hash") {
    ExperimentConfig c = toy();
    c.adversarial.scope = advtrain::SelectionScope::Epoch;
    c.adversarial.pgd_loss = advtrain::PgdLoss::Mse;
    c.policy_train.baseline = perturb::Strategy::Random;
    c.eval.lambdas = {12.5, 20};
    const std::string y = to_yaml(c);
    const ExperimentConfig back = parse_config(y);
    CHECK(to_yaml(back) == y);
    CHECK(config_hash(back) == config_hash(c));
    CHECK(back.adversarial.scope == advtrain::SelectionScope::Epoch);
    CHECK(back.eval.lambdas == std::vector<double>{12.5, 20});
    ExperimentConfig d = c;
    d.adversarial.alpha = 0.41;
    CHECK(config_hash(d) != config_hash(c));
  }

  TEST_CASE("attack strength maps to a node count") {
    CHECK(nodes_for_lambda(20, 20) == 4);
    CHECK(nodes_for_lambda(100, 20) == 20);
    CHECK(nodes_for_lambda(10, 8) == 1);
    CHECK(nodes_for_lambda(40, 8) == 4);
    CHECK_THROWS_AS(nodes_for_lambda(0, 8), ParameterError);
  }

  TEST_CASE("seed aggregates use the sample deviation") {
    CellResult c{"x", "random", 20, {1, 2, 3, 4}, {2, 2, 2, 2}, {}};
    CHECK(c.mae_mean() == doctest::Approx(2.5));
    CHECK(c.mae_std() == doctest::Approx(std::sqrt(5.0 / 3.0)));
    CHECK(c.rmse_std() == 0.0);
    CellResult one{"x", "random", 20, {1.5}, {2}, {}};
    CHECK(one.mae_std() == 0.0);
    CHECK(report_round(1.23456) == doctest::Approx(1.2346));
  }

  TEST_CASE("report grid covers every defense, attack and strength") {
    const EvalReport& r = toy_report();
    CHECK(r.clean.size() == 4);
    CHECK(r.cells.size() == 4 * 5 * 2);
    for (const auto& c : r.cells) {
      CHECK_FALSE(c.failed());
      CHECK(c.mae.size() == 1);
      CHECK(c.mae_std() == 0.0);
    }
    for (const char* d : {"non_defense", "at", "at_policy", "rdat"}) {
      REQUIRE(r.find(d, "clean", 0) != nullptr);
      // Every strategy attacks all nodes at 100% with the same PGD start.
      const double ref = r.find(d, "random", 100)->mae[0];
      for (const char* s : {"degree", "pagerank", "centrality", "tnds"}) CHECK(r.find(d, s, 100)->mae[0] == ref);
      CHECK(ref > r.find(d, "clean", 0)->mae[0]);
    }
  }

  TEST_CASE("clean row equals a direct evaluation of the undefended model") {
    const ExperimentConfig c = toy();
    const RunData data = build_data(c, 1);
    const auto model = train_non_defense(c, data, 1);
    const auto m = clean_metrics(model, data, c.eval);
    CHECK(toy_report().find("non_defense", "clean", 0)->mae[0] == m.mae);
    CHECK(attack_metrics(model, data, perturb::Strategy::Degree, 20, c.eval, 1).mae ==
          toy_report().find("non_defense", "degree", 20)->mae[0]);
  }

  TEST_CASE("report files agree with each other") {
    const fs::path dir = fresh("report");
    emit_report(toy_report(), dir);
    const auto rows = read_rows(dir / "report.csv");
    REQUIRE(rows.size() == 1 + 4 + 40);
    CHECK(rows[0] == std::vector<std::string>{"defense", "attack", "lambda", "mae_mean", "mae_std", "rmse_mean",
                                              "rmse_std", "seeds_ok", "status"});
    CHECK(rows[1][1] == "clean");
    const auto j = nlohmann::json::parse(slurp(dir / "report.json"));
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto& row = rows[i];
      const auto& cell = row[1] == "clean" ? j["defenses"][row[0]]["clean"]
                                           : j["defenses"][row[0]]["attacks"][row[1]][row[2]];
      CHECK(cell["mae_mean"].get<double>() == doctest::Approx(std::stod(row[3])).epsilon(1e-12));
      CHECK(cell["rmse_mean"].get<double>() == doctest::Approx(std::stod(row[5])).epsilon(1e-12));
      CHECK(row[8] == "ok");
    }
    for (const char* s : {"random", "degree", "pagerank", "centrality", "tnds"})
      CHECK(fs::exists(dir / (std::string("mae_") + s + ".svg")));
    const auto man = nlohmann::json::parse(slurp(dir / "manifest.json"));
    CHECK(man["version"] == kVersion);
    CHECK(man["seeds"].size() == 1);
  }

  TEST_CASE("failed cells are marked") {
    EvalReport r;
    r.seeds = {1, 2};
    r.clean.push_back({"at", "clean", 0, {1.0}, {1.5}, {"seed 2: diverged"}});
    r.cells.push_back({"at", "random", 20, {}, {}, {"seed 1: x", "seed 2: y"}});
    const fs::path dir = fresh("failed");
    emit_report(r, dir);
    const auto rows = read_rows(dir / "report.csv");
    CHECK(rows[1][8] == "failed");
    CHECK(rows[1][7] == "1");
    CHECK(rows[2][3] == "nan");
    const auto j = nlohmann::json::parse(slurp(dir / "report.json"));
    CHECK(j["defenses"]["at"]["attacks"]["random"]["20"]["mae_mean"].is_null());
    CHECK(j["defenses"]["at"]["attacks"]["random"]["20"]["errors"].size() == 2);
  }

  TEST_CASE("runs are reproducible and sweeps chart each strategy") {
    ExperimentConfig c = toy();
    c.sweep = true;
    c.defenses = {"at"};
    c.eval.strategies = {perturb::Strategy::Random, perturb::Strategy::Degree};
    const fs::path a = fresh("sweep_a"), b = fresh("sweep_b");
    emit_report(run_experiment(c), a);
    emit_report(run_experiment(c), b);
    CHECK(slurp(a / "report.csv") == slurp(b / "report.csv"));
    CHECK(slurp(a / "report.json") == slurp(b / "report.json"));
    std::size_t charts = 0;
    for (const auto& e : fs::directory_iterator(a)) charts += e.path().extension() == ".svg";
    CHECK(charts == 2);
    CHECK(read_rows(a / "report.csv").size() == 1 + 2 + 2 * 2 * 4);
  }
}
