#include "rdat/harness.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <json.hpp>

#include "rdat/errors.hpp"
#include "rdat/log.hpp"
#include "rdat/rng.hpp"

namespace rdat::harness {

using forecaster::Forecaster;
using perturb::Strategy;

// ----------------------------------------------------------------- config

namespace {

void check_keys(const YAML::Node& node, const std::string& where, const std::set<std::string>& allowed) {
  if (!node) return;
  if (!node.IsMap()) throw ConfigError("section '" + where + "' must be a mapping");
  for (const auto& kv : node) {
    const std::string key = kv.first.as<std::string>();
    if (!allowed.contains(key)) throw ConfigError("unknown key '" + where + "." + key + "'");
  }
}

template <class T>
void read(const YAML::Node& node, const char* key, T& out, const std::string& where) {
  if (!node) return;
  const YAML::Node v = node[key];
  if (!v) return;
  try {
    out = v.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError("bad value for '" + where + "." + key + "'");
  }
}

template <class E, class F>
void read_enum(const YAML::Node& node, const char* key, E& out, const std::string& where, F parse) {
  std::string s;
  read(node, key, s, where);
  if (s.empty()) return;
  try {
    out = parse(s);
  } catch (const std::exception&) {
    throw ConfigError("bad value '" + s + "' for '" + where + "." + key + "'");
  }
}

Strategy parse_strategy_cfg(const std::string& s) { return perturb::parse_strategy(s); }

advtrain::SelectionScope parse_scope(const std::string& s) {
  if (s == "batch") return advtrain::SelectionScope::Batch;
  if (s == "epoch") return advtrain::SelectionScope::Epoch;
  throw ParameterError("selection_scope must be batch or epoch");
}
std::string scope_name(advtrain::SelectionScope s) { return s == advtrain::SelectionScope::Batch ? "batch" : "epoch"; }

advtrain::PgdLoss parse_pgd_loss(const std::string& s) {
  if (s == "at_loss") return advtrain::PgdLoss::AtLoss;
  if (s == "mse") return advtrain::PgdLoss::Mse;
  throw ParameterError("pgd_loss must be at_loss or mse");
}
std::string pgd_loss_name(advtrain::PgdLoss l) { return l == advtrain::PgdLoss::AtLoss ? "at_loss" : "mse"; }

perturb::InitMode parse_init(const std::string& s) {
  if (s == "random") return perturb::InitMode::Random;
  if (s == "zero") return perturb::InitMode::Zero;
  throw ParameterError("init_mode must be random or zero");
}
std::string init_name(perturb::InitMode m) { return m == perturb::InitMode::Random ? "random" : "zero"; }

const std::set<std::string> kDefenses{"at", "at_policy", "rdat"};

}  // namespace

void validate(const ExperimentConfig& c) {
  if (c.data.source != "synthetic" && c.data.source != "csv") {
    throw ConfigError("data.source must be synthetic or csv, got '" + c.data.source + "'");
  }
  if (c.data.source == "csv" && (c.data.series_path.empty() || c.data.adjacency_path.empty())) {
    throw ConfigError("data.source=csv needs data.series and data.adjacency");
  }
  forecaster::validate(c.arch);
  advtrain::validate_config(c.adversarial);
  if (c.seeds.empty()) throw ConfigError("experiment.seeds must not be empty");
  for (const auto& d : c.defenses) {
    if (!kDefenses.contains(d)) throw ConfigError("unknown defense '" + d + "'");
  }
  const auto& lams = c.sweep ? c.eval.sweep_lambdas : c.eval.lambdas;
  if (lams.empty()) throw ConfigError("attack strength list must not be empty");
  for (double l : c.eval.lambdas) {
    if (!(l > 0.0 && l <= 100.0)) throw ConfigError("lambda values must lie in (0, 100]");
  }
  for (double l : c.eval.sweep_lambdas) {
    if (!(l > 0.0 && l <= 100.0)) throw ConfigError("lambda values must lie in (0, 100]");
  }
  if (c.eval.strategies.empty()) throw ConfigError("evaluation.strategies must not be empty");
  if (!(c.eval.epsilon > 0.0) || c.eval.steps == 0 || !(c.eval.gamma > 0.0) || c.eval.batch_size == 0) {
    throw ConfigError("evaluation: epsilon, steps, gamma and batch_size must be positive");
  }
}

ExperimentConfig parse_config(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  ExperimentConfig c;
  if (!root || root.IsNull()) return c;
  check_keys(root, "<root>",
             {"data", "model", "train", "policy", "policy_train", "adversarial", "evaluation", "experiment"});

  const YAML::Node data = root["data"];
  check_keys(data, "data", {"source", "nodes", "timesteps", "series", "adjacency"});
  read(data, "source", c.data.source, "data");
  read(data, "nodes", c.data.nodes, "data");
  read(data, "timesteps", c.data.timesteps, "data");
  read(data, "series", c.data.series_path, "data");
  read(data, "adjacency", c.data.adjacency_path, "data");

  const YAML::Node model = root["model"];
  check_keys(model, "model",
             {"blocks", "hidden_channels", "diffusion_depth", "temporal_kernel", "dilations", "node_embed_dim",
              "head_channels", "history", "horizon"});
  read(model, "blocks", c.arch.blocks, "model");
  read(model, "hidden_channels", c.arch.hidden_channels, "model");
  read(model, "diffusion_depth", c.arch.diffusion_depth, "model");
  read(model, "temporal_kernel", c.arch.temporal_kernel, "model");
  read(model, "dilations", c.arch.dilations, "model");
  read(model, "node_embed_dim", c.arch.node_embed_dim, "model");
  read(model, "head_channels", c.arch.head_channels, "model");
  read(model, "history", c.arch.history, "model");
  read(model, "horizon", c.arch.horizon, "model");

  const YAML::Node train = root["train"];
  check_keys(train, "train", {"epochs", "batch_size", "patience", "max_batches", "learning_rate"});
  read(train, "epochs", c.train.epochs, "train");
  read(train, "batch_size", c.train.batch_size, "train");
  read(train, "patience", c.train.patience, "train");
  read(train, "max_batches", c.train.max_batches, "train");
  read(train, "learning_rate", c.train.adam.learning_rate, "train");

  const YAML::Node pol = root["policy"];
  check_keys(pol, "policy",
             {"blocks", "hidden_channels", "dilations", "head_channels", "node_embed_dim", "embed_dim", "heads", "clip"});
  read(pol, "blocks", c.policy.blocks, "policy");
  read(pol, "hidden_channels", c.policy.hidden_channels, "policy");
  read(pol, "dilations", c.policy.dilations, "policy");
  read(pol, "head_channels", c.policy.head_channels, "policy");
  read(pol, "node_embed_dim", c.policy.node_embed_dim, "policy");
  read(pol, "embed_dim", c.policy.embed_dim, "policy");
  read(pol, "heads", c.policy.heads, "policy");
  read(pol, "clip", c.policy.clip, "policy");

  const YAML::Node pt = root["policy_train"];
  check_keys(pt, "policy_train",
             {"epochs", "inner_iters", "reward_offset", "learning_rate", "baseline", "batch_size", "update_model"});
  read(pt, "epochs", c.policy_train.epochs, "policy_train");
  read(pt, "inner_iters", c.policy_train.inner_iters, "policy_train");
  read(pt, "reward_offset", c.policy_train.reward_offset, "policy_train");
  read(pt, "learning_rate", c.policy_train.learning_rate, "policy_train");
  read_enum(pt, "baseline", c.policy_train.baseline, "policy_train", parse_strategy_cfg);
  read(pt, "batch_size", c.policy_train.batch_size, "policy_train");
  read(pt, "update_model", c.policy_train.update_model, "policy_train");

  const YAML::Node adv = root["adversarial"];
  check_keys(adv, "adversarial",
             {"alpha", "train_node_ratio", "epochs", "selection_scope", "pgd_loss", "init_mode", "epsilon", "steps",
              "gamma", "batch_size", "max_batches", "learning_rate", "validate", "val_attack_ratio", "val_windows",
              "init_from_clean"});
  auto& a = c.adversarial;
  read(adv, "alpha", a.alpha, "adversarial");
  read(adv, "train_node_ratio", a.train_node_ratio, "adversarial");
  read(adv, "epochs", a.epochs, "adversarial");
  read_enum(adv, "selection_scope", a.scope, "adversarial", parse_scope);
  read_enum(adv, "pgd_loss", a.pgd_loss, "adversarial", parse_pgd_loss);
  read_enum(adv, "init_mode", a.init, "adversarial", parse_init);
  read(adv, "epsilon", a.epsilon, "adversarial");
  read(adv, "steps", a.steps, "adversarial");
  read(adv, "gamma", a.gamma, "adversarial");
  read(adv, "batch_size", a.batch_size, "adversarial");
  read(adv, "max_batches", a.max_batches, "adversarial");
  read(adv, "learning_rate", a.adam.learning_rate, "adversarial");
  read(adv, "validate", a.validate, "adversarial");
  read(adv, "val_attack_ratio", a.val_attack_ratio, "adversarial");
  read(adv, "val_windows", a.val_windows, "adversarial");
  read(adv, "init_from_clean", c.init_from_clean, "adversarial");

  const YAML::Node ev = root["evaluation"];
  check_keys(ev, "evaluation", {"strategies", "lambdas", "sweep_lambdas", "epsilon", "steps", "gamma", "batch_size"});
  if (ev && ev["strategies"]) {
    std::vector<std::string> names;
    read(ev, "strategies", names, "evaluation");
    c.eval.strategies.clear();
    for (const auto& s : names) {
      try {
        c.eval.strategies.push_back(perturb::parse_strategy(s));
      } catch (const std::exception&) {
        throw ConfigError("unknown attack strategy '" + s + "'");
      }
    }
  }
  read(ev, "lambdas", c.eval.lambdas, "evaluation");
  read(ev, "sweep_lambdas", c.eval.sweep_lambdas, "evaluation");
  read(ev, "epsilon", c.eval.epsilon, "evaluation");
  read(ev, "steps", c.eval.steps, "evaluation");
  read(ev, "gamma", c.eval.gamma, "evaluation");
  read(ev, "batch_size", c.eval.batch_size, "evaluation");

  const YAML::Node ex = root["experiment"];
  check_keys(ex, "experiment", {"defenses", "seeds", "sweep"});
  read(ex, "defenses", c.defenses, "experiment");
  read(ex, "seeds", c.seeds, "experiment");
  read(ex, "sweep", c.sweep, "experiment");

  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_yaml(const ExperimentConfig& c) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap;
  out << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "source" << YAML::Value << c.data.source;
  out << YAML::Key << "nodes" << YAML::Value << c.data.nodes;
  out << YAML::Key << "timesteps" << YAML::Value << c.data.timesteps;
  out << YAML::Key << "series" << YAML::Value << c.data.series_path;
  out << YAML::Key << "adjacency" << YAML::Value << c.data.adjacency_path;
  out << YAML::EndMap;

  out << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "blocks" << YAML::Value << c.arch.blocks;
  out << YAML::Key << "hidden_channels" << YAML::Value << c.arch.hidden_channels;
  out << YAML::Key << "diffusion_depth" << YAML::Value << c.arch.diffusion_depth;
  out << YAML::Key << "temporal_kernel" << YAML::Value << c.arch.temporal_kernel;
  out << YAML::Key << "dilations" << YAML::Value << YAML::Flow << c.arch.dilations;
  out << YAML::Key << "node_embed_dim" << YAML::Value << c.arch.node_embed_dim;
  out << YAML::Key << "head_channels" << YAML::Value << c.arch.head_channels;
  out << YAML::Key << "history" << YAML::Value << c.arch.history;
  out << YAML::Key << "horizon" << YAML::Value << c.arch.horizon;
  out << YAML::EndMap;

  out << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "epochs" << YAML::Value << c.train.epochs;
  out << YAML::Key << "batch_size" << YAML::Value << c.train.batch_size;
  out << YAML::Key << "patience" << YAML::Value << c.train.patience;
  out << YAML::Key << "max_batches" << YAML::Value << c.train.max_batches;
  out << YAML::Key << "learning_rate" << YAML::Value << c.train.adam.learning_rate;
  out << YAML::EndMap;

  out << YAML::Key << "policy" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "blocks" << YAML::Value << c.policy.blocks;
  out << YAML::Key << "hidden_channels" << YAML::Value << c.policy.hidden_channels;
  out << YAML::Key << "dilations" << YAML::Value << YAML::Flow << c.policy.dilations;
  out << YAML::Key << "head_channels" << YAML::Value << c.policy.head_channels;
  out << YAML::Key << "node_embed_dim" << YAML::Value << c.policy.node_embed_dim;
  out << YAML::Key << "embed_dim" << YAML::Value << c.policy.embed_dim;
  out << YAML::Key << "heads" << YAML::Value << c.policy.heads;
  out << YAML::Key << "clip" << YAML::Value << c.policy.clip;
  out << YAML::EndMap;

  out << YAML::Key << "policy_train" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "epochs" << YAML::Value << c.policy_train.epochs;
  out << YAML::Key << "inner_iters" << YAML::Value << c.policy_train.inner_iters;
  out << YAML::Key << "reward_offset" << YAML::Value << c.policy_train.reward_offset;
  out << YAML::Key << "learning_rate" << YAML::Value << c.policy_train.learning_rate;
  out << YAML::Key << "baseline" << YAML::Value << perturb::to_string(c.policy_train.baseline);
  out << YAML::Key << "batch_size" << YAML::Value << c.policy_train.batch_size;
  out << YAML::Key << "update_model" << YAML::Value << c.policy_train.update_model;
  out << YAML::EndMap;

  const auto& a = c.adversarial;
  out << YAML::Key << "adversarial" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "alpha" << YAML::Value << a.alpha;
  out << YAML::Key << "train_node_ratio" << YAML::Value << a.train_node_ratio;
  out << YAML::Key << "epochs" << YAML::Value << a.epochs;
  out << YAML::Key << "selection_scope" << YAML::Value << scope_name(a.scope);
  out << YAML::Key << "pgd_loss" << YAML::Value << pgd_loss_name(a.pgd_loss);
  out << YAML::Key << "init_mode" << YAML::Value << init_name(a.init);
  out << YAML::Key << "epsilon" << YAML::Value << a.epsilon;
  out << YAML::Key << "steps" << YAML::Value << a.steps;
  out << YAML::Key << "gamma" << YAML::Value << a.gamma;
  out << YAML::Key << "batch_size" << YAML::Value << a.batch_size;
  out << YAML::Key << "max_batches" << YAML::Value << a.max_batches;
  out << YAML::Key << "learning_rate" << YAML::Value << a.adam.learning_rate;
  out << YAML::Key << "validate" << YAML::Value << a.validate;
  out << YAML::Key << "val_attack_ratio" << YAML::Value << a.val_attack_ratio;
  out << YAML::Key << "val_windows" << YAML::Value << a.val_windows;
  out << YAML::Key << "init_from_clean" << YAML::Value << c.init_from_clean;
  out << YAML::EndMap;

  out << YAML::Key << "evaluation" << YAML::Value << YAML::BeginMap;
  std::vector<std::string> names;
  for (Strategy s : c.eval.strategies) names.push_back(perturb::to_string(s));
  out << YAML::Key << "strategies" << YAML::Value << YAML::Flow << names;
  out << YAML::Key << "lambdas" << YAML::Value << YAML::Flow << c.eval.lambdas;
  out << YAML::Key << "sweep_lambdas" << YAML::Value << YAML::Flow << c.eval.sweep_lambdas;
  out << YAML::Key << "epsilon" << YAML::Value << c.eval.epsilon;
  out << YAML::Key << "steps" << YAML::Value << c.eval.steps;
  out << YAML::Key << "gamma" << YAML::Value << c.eval.gamma;
  out << YAML::Key << "batch_size" << YAML::Value << c.eval.batch_size;
  out << YAML::EndMap;

  out << YAML::Key << "experiment" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "defenses" << YAML::Value << YAML::Flow << c.defenses;
  out << YAML::Key << "seeds" << YAML::Value << YAML::Flow << c.seeds;
  out << YAML::Key << "sweep" << YAML::Value << c.sweep;
  out << YAML::EndMap;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

std::uint64_t config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : to_yaml(c)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

// ----------------------------------------------------------------- stages

RunData build_data(const ExperimentConfig& c, std::uint64_t seed) {
  RunData r;
  r.raw = c.data.source == "csv" ? datakit::load_csv(c.data.series_path, c.data.adjacency_path)
                                 : datakit::synth_traffic(c.data.nodes, c.data.timesteps, seed);
  r.prepared = datakit::prepare(r.raw, c.arch.history, c.arch.horizon);
  r.scores = perturb::score_graph(r.raw.graph);
  return r;
}

Forecaster train_non_defense(const ExperimentConfig& c, const RunData& data, std::uint64_t seed) {
  forecaster::ArchConfig arch = c.arch;
  arch.in_channels = data.prepared.normalized->channels();
  Forecaster model = forecaster::make_forecaster(arch, data.prepared.graph.n, derive_seed(seed, {stream::kModelInit}));
  forecaster::TrainConfig tc = c.train;
  tc.seed = seed;
  forecaster::train_clean(model, data.prepared.split, tc);
  return model;
}

policy::PolicyNet train_policy_net(const ExperimentConfig& c, const RunData& data, const Forecaster& clean,
                                   std::uint64_t seed, policy::PolicyTrainResult* log) {
  const std::size_t n = clean.nodes;
  policy::PolicyNet net = policy::make_policy(c.policy, n, clean.arch.history, clean.arch.in_channels,
                                              derive_seed(seed, {stream::kPolicyInit}));
  Forecaster partner = clean;  // policy training updates its own copy
  policy::PolicyTrainConfig pc = c.policy_train;
  pc.seed = derive_seed(seed, {stream::kPolicySample});
  const auto& a = c.adversarial;
  const perturb::PerturbBudget budget{a.epsilon, perturb::nodes_for_ratio(a.train_node_ratio, n), a.steps, a.gamma};
  auto result = policy::train_policy(net, partner, data.prepared.split, data.scores, pc, budget);
  if (log != nullptr) *log = std::move(result);
  return net;
}

advtrain::ATResult train_defense(const std::string& defense, const ExperimentConfig& c, const RunData& data,
                                 const Forecaster& clean, const policy::PolicyNet* policy, std::uint64_t seed) {
  const Forecaster init = c.init_from_clean
                              ? clean
                              : forecaster::make_forecaster(clean.arch, clean.nodes,
                                                            derive_seed(seed, {stream::kModelInit, 1}));
  const std::uint64_t s = derive_seed(seed, {stream::kDefense});
  advtrain::ATConfig a = c.adversarial;
  const auto& d = data.prepared;
  if (defense == "at") {
    a.alpha = 0.0;
    a.selection = advtrain::Selection::Random;
    return advtrain::plain_adversarial_train(init, d.split, a, d.graph, d.scaler, s);
  }
  if (defense == "at_policy" || defense == "rdat") {
    a.selection = advtrain::Selection::Policy;
    if (defense == "at_policy") a.alpha = 0.0;
    return advtrain::adversarial_train(init, policy, d.split, a, d.graph, d.scaler, s);
  }
  throw ConfigError("unknown defense '" + defense + "'");
}

std::size_t nodes_for_lambda(double lambda_percent, std::size_t n) {
  if (!(lambda_percent > 0.0 && lambda_percent <= 100.0)) throw ParameterError("lambda must lie in (0, 100]");
  return perturb::nodes_for_ratio(lambda_percent / 100.0, n);
}

forecaster::Metrics attack_metrics(const Forecaster& model, const RunData& data, Strategy strategy,
                                   double lambda_percent, const EvalSettings& eval, std::uint64_t seed) {
  const std::size_t n = model.nodes;
  const perturb::PerturbBudget budget{eval.epsilon, nodes_for_lambda(lambda_percent, n), eval.steps, eval.gamma};
  budget.validate(n);
  const auto code = static_cast<std::uint64_t>(std::llround(lambda_percent * 1000.0));
  std::vector<std::size_t> fixed;
  if (strategy != Strategy::Random && strategy != Strategy::Tnds) {
    fixed = perturb::select_static(strategy, data.scores, n, budget.eta, 0);
  }
  return forecaster::evaluate(
      model, data.prepared.split.test, data.prepared.scaler, eval.batch_size,
      [&](const forecaster::Batch& batch, std::size_t bi) {
        std::vector<std::vector<std::size_t>> omegas;
        if (strategy == Strategy::Tnds) {
          omegas = perturb::select_tnds_batch(model, batch, budget.eta);
        } else if (strategy == Strategy::Random) {
          for (std::size_t b = 0; b < batch.size; ++b) {
            omegas.push_back(perturb::select_static(Strategy::Random, data.scores, n, budget.eta,
                                                    derive_seed(seed, {stream::kEvaluation, code, bi, b, 1})));
          }
        } else {
          omegas.assign(batch.size, fixed);
        }
        std::vector<perturb::NodeIndicator> inds;
        for (const auto& o : omegas) inds.push_back(perturb::make_indicator(o, n));
        return perturb::pgd_attack_batch(model, batch.x, batch.size, inds, budget,
                                         perturb::AttackObjective{batch.y, {}, 0.0}, perturb::InitMode::Random,
                                         derive_seed(seed, {stream::kEvaluation, code, bi}))
            .x_adv;
      });
}

forecaster::Metrics clean_metrics(const Forecaster& model, const RunData& data, const EvalSettings& eval) {
  return forecaster::evaluate(model, data.prepared.split.test, data.prepared.scaler, eval.batch_size);
}

// ----------------------------------------------------------------- report

namespace {

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return v.empty() ? std::numeric_limits<double>::quiet_NaN() : 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

double CellResult::mae_mean() const { return mean_of(mae); }
double CellResult::mae_std() const { return std_of(mae); }
double CellResult::rmse_mean() const { return mean_of(rmse); }
double CellResult::rmse_std() const { return std_of(rmse); }

const CellResult* EvalReport::find(const std::string& defense, const std::string& attack, double lambda) const {
  if (attack == "clean") {
    for (const auto& c : clean) {
      if (c.defense == defense) return &c;
    }
    return nullptr;
  }
  for (const auto& c : cells) {
    if (c.defense == defense && c.attack == attack && std::abs(c.lambda - lambda) < 1e-9) return &c;
  }
  return nullptr;
}

EvalReport run_experiment(const ExperimentConfig& config) {
  validate(config);
  EvalReport report;
  report.seeds = config.seeds;
  report.config_hash = config_hash(config);

  std::vector<std::string> defenses{"non_defense"};
  defenses.insert(defenses.end(), config.defenses.begin(), config.defenses.end());
  const auto& lambdas = config.sweep ? config.eval.sweep_lambdas : config.eval.lambdas;
  for (const auto& d : defenses) {
    report.clean.push_back(CellResult{d, "clean", 0.0, {}, {}, {}});
    for (Strategy s : config.eval.strategies) {
      for (double l : lambdas) report.cells.push_back(CellResult{d, perturb::to_string(s), l, {}, {}, {}});
    }
  }
  const bool needs_policy = std::any_of(config.defenses.begin(), config.defenses.end(),
                                        [](const std::string& d) { return d == "at_policy" || d == "rdat"; });

  for (std::uint64_t seed : config.seeds) {
    const std::string tag = "seed " + std::to_string(seed) + ": ";
    std::optional<RunData> data;
    std::map<std::string, Forecaster> models;
    std::map<std::string, std::string> failures;
    try {
      data = build_data(config, seed);
      models.emplace("non_defense", train_non_defense(config, *data, seed));
    } catch (const std::exception& e) {
      for (const auto& d : defenses) failures[d] = tag + e.what();
    }
    if (models.contains("non_defense")) {
      std::optional<policy::PolicyNet> pol;
      std::string policy_error;
      if (needs_policy) {
        try {
          pol = train_policy_net(config, *data, models.at("non_defense"), seed);
        } catch (const std::exception& e) {
          policy_error = tag + "policy training failed: " + e.what();
        }
      }
      for (const auto& d : config.defenses) {
        if ((d == "at_policy" || d == "rdat") && !pol) {
          failures[d] = policy_error;
          continue;
        }
        try {
          models.emplace(d, train_defense(d, config, *data, models.at("non_defense"), pol ? &*pol : nullptr, seed).model);
        } catch (const std::exception& e) {
          failures[d] = tag + d + " training failed: " + e.what();
        }
      }
    }

    auto record = [&](CellResult& cell, const std::function<forecaster::Metrics(const Forecaster&)>& fn) {
      auto f = failures.find(cell.defense);
      if (f != failures.end()) {
        cell.errors.push_back(f->second);
        return;
      }
      try {
        const forecaster::Metrics m = fn(models.at(cell.defense));
        cell.mae.push_back(m.mae);
        cell.rmse.push_back(m.rmse);
      } catch (const std::exception& e) {
        cell.errors.push_back(tag + e.what());
      }
    };
    for (auto& cell : report.clean) {
      record(cell, [&](const Forecaster& m) { return clean_metrics(m, *data, config.eval); });
    }
    for (auto& cell : report.cells) {
      const Strategy s = perturb::parse_strategy(cell.attack);
      record(cell, [&](const Forecaster& m) { return attack_metrics(m, *data, s, cell.lambda, config.eval, seed); });
    }
    log::info("finished " + tag.substr(0, tag.size() - 2));
  }
  return report;
}

double report_round(double v) {
  if (!std::isfinite(v)) return v;
  return std::round(v * 1e4) / 1e4;
}

namespace {

std::string fmt4(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", report_round(v));
  return buf;
}

std::string fmt_lambda(double l) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", l);
  return buf;
}

nlohmann::json number_or_null(double v) {
  if (!std::isfinite(v)) return nullptr;
  return report_round(v);
}

nlohmann::json cell_json(const CellResult& c) {
  nlohmann::json j;
  j["mae_mean"] = number_or_null(c.mae_mean());
  j["mae_std"] = number_or_null(c.mae_std());
  j["rmse_mean"] = number_or_null(c.rmse_mean());
  j["rmse_std"] = number_or_null(c.rmse_std());
  j["seeds_ok"] = c.mae.size();
  j["status"] = c.failed() ? "failed" : "ok";
  if (c.failed()) j["errors"] = c.errors;
  return j;
}

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (ch == '<') out += "&lt;";
    else if (ch == '>') out += "&gt;";
    else if (ch == '&') out += "&amp;";
    else out += ch;
  }
  return out;
}

void write_chart(const std::filesystem::path& path, const std::string& strategy, const EvalReport& report) {
  std::map<std::string, std::vector<std::pair<double, double>>> lines;
  std::vector<std::string> order;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& c : report.cells) {
    if (c.attack != strategy) continue;
    if (!lines.contains(c.defense)) order.push_back(c.defense);
    auto& pts = lines[c.defense];
    const double y = c.mae_mean();
    if (!std::isfinite(y)) continue;
    pts.emplace_back(c.lambda, y);
    xmin = std::min(xmin, c.lambda);
    xmax = std::max(xmax, c.lambda);
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
  }
  if (xmin > xmax) xmin = 0.0, xmax = 100.0, ymin = 0.0, ymax = 1.0;
  if (xmax - xmin < 1e-9) xmin -= 10.0, xmax += 10.0;
  if (ymax - ymin < 1e-9) ymin -= 0.5, ymax += 0.5;
  const double pad = 0.08 * (ymax - ymin);
  ymin = std::max(0.0, ymin - pad);
  ymax += pad;

  const double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  auto sx = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto sy = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">MAE vs attacked nodes (%), "
      << svg_escape(strategy) << "</text>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double y = ymin + (ymax - ymin) * k / 4.0;
    out << "<text x=\"" << L - 6 << "\" y=\"" << sy(y) + 4 << "\" text-anchor=\"end\">" << fmt4(y) << "</text>\n";
    out << "<line x1=\"" << L << "\" y1=\"" << sy(y) << "\" x2=\"" << W - R << "\" y2=\"" << sy(y)
        << "\" stroke=\"#ddd\"/>\n";
  }
  std::set<double> xs;
  for (const auto& [d, pts] : lines) {
    for (const auto& p : pts) xs.insert(p.first);
  }
  for (double x : xs) {
    out << "<text x=\"" << sx(x) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << fmt_lambda(x) << "</text>\n";
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">lambda (%)</text>\n";
  for (std::size_t k = 0; k < order.size(); ++k) {
    const char* color = colors[k % 6];
    auto pts = lines[order[k]];
    std::sort(pts.begin(), pts.end());
    if (!pts.empty()) {
      out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (const auto& p : pts) out << sx(p.first) << ',' << sy(p.second) << ' ';
      out << "\"/>\n";
      for (const auto& p : pts) {
        out << "<circle cx=\"" << sx(p.first) << "\" cy=\"" << sy(p.second) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
      }
    }
    const double ly = T + 20.0 * static_cast<double>(k);
    out << "<line x1=\"" << W - R + 15 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 35 << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << W - R + 40 << "\" y=\"" << ly + 4 << "\">" << svg_escape(order[k]) << "</text>\n";
  }
  out << "</svg>\n";
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void emit_report(const EvalReport& report, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  {
    std::ofstream csv(out_dir / "report.csv");
    if (!csv) throw IoError("cannot write " + (out_dir / "report.csv").string());
    csv << "defense,attack,lambda,mae_mean,mae_std,rmse_mean,rmse_std,seeds_ok,status\n";
    auto row = [&](const CellResult& c) {
      csv << c.defense << ',' << c.attack << ',' << fmt_lambda(c.lambda) << ',' << fmt4(c.mae_mean()) << ','
          << fmt4(c.mae_std()) << ',' << fmt4(c.rmse_mean()) << ',' << fmt4(c.rmse_std()) << ',' << c.mae.size() << ','
          << (c.failed() ? "failed" : "ok") << '\n';
    };
    for (const auto& c : report.clean) row(c);
    for (const auto& c : report.cells) row(c);
    if (!csv) throw IoError("write failed for report.csv");
  }

  {
    nlohmann::ordered_json j;
    j["version"] = kVersion;
    j["config_hash"] = hex64(report.config_hash);
    j["seeds"] = report.seeds;
    nlohmann::ordered_json defs = nlohmann::ordered_json::object();
    for (const auto& c : report.clean) defs[c.defense]["clean"] = cell_json(c);
    for (const auto& c : report.cells) defs[c.defense]["attacks"][c.attack][fmt_lambda(c.lambda)] = cell_json(c);
    j["defenses"] = defs;
    std::ofstream out(out_dir / "report.json");
    if (!out) throw IoError("cannot write " + (out_dir / "report.json").string());
    out << j.dump(2) << '\n';
  }

  std::vector<std::string> strategies;
  for (const auto& c : report.cells) {
    if (std::find(strategies.begin(), strategies.end(), c.attack) == strategies.end()) strategies.push_back(c.attack);
  }
  for (const auto& s : strategies) write_chart(out_dir / ("mae_" + s + ".svg"), s, report);

  {
    nlohmann::ordered_json m;
    m["version"] = kVersion;
    m["config_hash"] = hex64(report.config_hash);
    m["seeds"] = report.seeds;
    m["timestamp"] = utc_timestamp();
    std::ofstream out(out_dir / "manifest.json");
    if (!out) throw IoError("cannot write " + (out_dir / "manifest.json").string());
    out << m.dump(2) << '\n';
  }
}

}  // namespace rdat::harness
