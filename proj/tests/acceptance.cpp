// End-to-end acceptance checks A1-A8 on the desk-scale synthetic setup.
// Prints one PASS/FAIL line per criterion and exits non-zero if any fails.
//
//   rdat_acceptance [--only A1,A4] [--seeds 1,2,3]

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "rdat/harness.hpp"
#include "rdat/log.hpp"
#include "rdat/rng.hpp"

using namespace rdat;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::string join(const std::vector<double>& v, const char* fmt = "%.3f") {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, fmt, v[i]);
    out += (i ? " " : "") + std::string(buf);
  }
  return out;
}

struct Outcome {
  std::string id;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

void report(const Outcome& o) {
  std::printf("%s %s (%.0fs) %s\n", o.id.c_str(), o.pass ? "PASS" : "FAIL", o.seconds, o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

// Per-seed artifacts shared by A1, A2 and A3.
struct SeedRun {
  harness::RunData data;
  forecaster::Forecaster clean;
  forecaster::Metrics clean_test, clean_adv;
  double base_seconds = 0.0;
  std::optional<forecaster::Forecaster> rdat;
  double rdat_seconds = 0.0;
};

class Desk {
 public:
  Desk(harness::ExperimentConfig cfg, std::vector<std::uint64_t> seeds) : cfg_(std::move(cfg)), seeds_(std::move(seeds)) {}

  const harness::ExperimentConfig& config() const { return cfg_; }
  const std::vector<std::uint64_t>& seeds() const { return seeds_; }

  SeedRun& base(std::uint64_t seed) {
    auto it = runs_.find(seed);
    if (it != runs_.end()) return it->second;
    const auto t = Clock::now();
    SeedRun r{harness::build_data(cfg_, seed), {}, {}, {}, 0.0, std::nullopt, 0.0};
    r.clean = harness::train_non_defense(cfg_, r.data, seed);
    r.clean_test = harness::clean_metrics(r.clean, r.data, cfg_.eval);
    r.clean_adv = harness::attack_metrics(r.clean, r.data, perturb::Strategy::Random, 20, cfg_.eval, seed);
    r.base_seconds = since(t);
    return runs_.emplace(seed, std::move(r)).first->second;
  }

  // RDAT at the configured ratio, reusing the seed's undefended model.
  const forecaster::Forecaster& rdat(std::uint64_t seed) {
    SeedRun& r = base(seed);
    if (!r.rdat) {
      const auto t = Clock::now();
      const auto net = harness::train_policy_net(cfg_, r.data, r.clean, seed);
      r.rdat = harness::train_defense("rdat", cfg_, r.data, r.clean, &net, seed).model;
      r.rdat_seconds = since(t);
    }
    return *r.rdat;
  }

  forecaster::Metrics adv(const forecaster::Forecaster& m, std::uint64_t seed) {
    return harness::attack_metrics(m, base(seed).data, perturb::Strategy::Random, 20, cfg_.eval, seed);
  }

 private:
  harness::ExperimentConfig cfg_;
  std::vector<std::uint64_t> seeds_;
  std::map<std::uint64_t, SeedRun> runs_;
};

Outcome a1(Desk& desk) {
  Outcome o{"A1"};
  std::vector<double> ratios;
  double secs = 0;
  for (auto s : desk.seeds()) {
    const SeedRun& r = desk.base(s);
    ratios.push_back(r.clean_adv.mae / r.clean_test.mae);
    secs += r.base_seconds;
  }
  const double med = median(ratios);
  o.seconds = secs;
  o.pass = med >= 1.5 && secs <= 600;
  o.detail = "adv/clean MAE of undefended model, median " + fmt("%.3f", med) + " (need >= 1.5; seeds " + join(ratios) +
             ")";
  return o;
}

Outcome a2(Desk& desk) {
  Outcome o{"A2"};
  std::vector<double> ratios, rd, nd;
  double secs = 0;
  for (auto s : desk.seeds()) {
    const auto& m = desk.rdat(s);
    const SeedRun& r = desk.base(s);
    const double adv = desk.adv(m, s).mae;
    rd.push_back(adv);
    nd.push_back(r.clean_adv.mae);
    ratios.push_back(adv / r.clean_adv.mae);
    secs += r.base_seconds + r.rdat_seconds;
  }
  const double med = median(ratios);
  o.seconds = secs;
  o.pass = med <= 0.7 && secs <= 900;
  o.detail = "RDAT/undefended adv MAE, median " + fmt("%.3f", med) + " (need <= 0.7; seeds " + join(ratios) +
             "; RDAT " + join(rd) + " vs undefended " + join(nd) + ")";
  return o;
}

Outcome a3(Desk& desk) {
  Outcome o{"A3"};
  const auto t = Clock::now();
  harness::ExperimentConfig wide = desk.config();
  wide.adversarial.train_node_ratio = 0.80;
  std::vector<double> clean_lo, clean_hi, adv_lo, adv_hi;
  for (auto s : desk.seeds()) {
    const auto& low = desk.rdat(s);
    SeedRun& r = desk.base(s);
    const auto net = harness::train_policy_net(wide, r.data, r.clean, s);
    const auto high = harness::train_defense("rdat", wide, r.data, r.clean, &net, s).model;
    clean_lo.push_back(harness::clean_metrics(low, r.data, wide.eval).mae);
    clean_hi.push_back(harness::clean_metrics(high, r.data, wide.eval).mae);
    adv_lo.push_back(desk.adv(low, s).mae);
    adv_hi.push_back(desk.adv(high, s).mae);
  }
  const double cl = median(clean_lo), ch = median(clean_hi), al = median(adv_lo), ah = median(adv_hi);
  o.seconds = since(t);
  o.pass = cl <= ch && al <= ah;
  o.detail = "ratio 0.10 vs 0.80: clean MAE " + fmt("%.3f vs %.3f", cl, ch) + ", adv MAE " + fmt("%.3f vs %.3f", al, ah) +
             " (medians)";
  return o;
}

// Greedy policy on a frozen n=6 model against the best fixed subset.
Outcome a4() {
  Outcome o{"A4"};
  const auto t = Clock::now();
  const std::size_t n = 6;
  const auto raw = datakit::synth_traffic(n, 1000, 4);
  const auto prep = datakit::prepare(raw, 12, 12);
  const auto scores = perturb::score_graph(raw.graph);
  forecaster::ArchConfig arch;
  arch.hidden_channels = 16;
  arch.head_channels = 32;
  auto model = forecaster::make_forecaster(arch, n, derive_seed(4, {stream::kModelInit}));
  forecaster::TrainConfig tc;
  tc.epochs = 5;
  tc.seed = 4;
  forecaster::train_clean(model, prep.split, tc);

  const std::size_t N = std::min<std::size_t>(prep.split.val.size(), 64);
  const auto batch = forecaster::make_batch(prep.split.val, 0, N);
  std::vector<std::uint64_t> deltas(N);
  for (std::size_t i = 0; i < N; ++i) deltas[i] = derive_seed(4, {stream::kEvaluation, i});
  auto mean_cost = [&](const std::vector<std::vector<std::size_t>>& omegas) {
    double s = 0;
    for (double c : policy::evaluate_cost_batch(model, batch, omegas, 0.5, deltas)) s += c;
    return s / static_cast<double>(N);
  };

  bool pass = true;
  std::string detail;
  for (std::size_t eta : {1u, 2u}) {
    auto net = policy::make_policy({}, n, 12, 1, derive_seed(4, {stream::kPolicyInit, eta}));
    policy::PolicyTrainConfig pc;
    pc.epochs = 10;
    pc.inner_iters = 30;
    pc.update_model = false;
    pc.baseline = perturb::Strategy::Random;
    pc.seed = derive_seed(4, {stream::kPolicySample, eta});
    auto frozen = model;
    policy::train_policy(net, frozen, prep.split, scores, pc, perturb::PerturbBudget{0.5, eta, 5, 0.1});

    std::vector<std::vector<std::size_t>> picks;
    for (auto& s : policy::sample_batch(net, batch.x, N, eta, policy::DecodeMode::Greedy, 0)) picks.push_back(s.omega);
    const double got = mean_cost(picks);
    double best = 0;
    std::size_t subsets = 0;
    for (std::size_t a = 0; a < n; ++a) {
      if (eta == 1) {
        best = std::max(best, mean_cost(std::vector<std::vector<std::size_t>>(N, {a})));
        ++subsets;
        continue;
      }
      for (std::size_t b = a + 1; b < n; ++b) {
        best = std::max(best, mean_cost(std::vector<std::vector<std::size_t>>(N, {a, b})));
        ++subsets;
      }
    }
    const double tol = eta == 1 ? 0.05 : 0.10;
    pass = pass && got >= (1.0 - tol) * best;
    detail += fmt("eta=%.0f policy/best %.4f over %.0f subsets; ", static_cast<double>(eta), got / best,
                  static_cast<double>(subsets));
  }
  o.seconds = since(t);
  o.pass = pass;
  o.detail = detail + "(need >= 0.95 and 0.90)";
  return o;
}

Outcome a5(Desk& desk) {
  Outcome o{"A5"};
  const auto t = Clock::now();
  harness::ExperimentConfig c = desk.config();
  c.policy_train.baseline = perturb::Strategy::Random;
  std::vector<double> first, last, gain;
  for (auto s : desk.seeds()) {
    SeedRun& r = desk.base(s);
    policy::PolicyTrainResult log;
    harness::train_policy_net(c, r.data, r.clean, s, &log);
    first.push_back(log.epoch_reward_mean.front());
    last.push_back(log.epoch_reward_mean.back());
    gain.push_back(last.back() - first.back());
  }
  o.seconds = since(t);
  o.pass = median(gain) > 0.0;
  o.detail = "final minus first epoch reward vs Random baseline, median " + fmt("%.3g", median(gain)) + " (first " +
             join(first, "%.3g") + "; final " + join(last, "%.3g") + ")";
  return o;
}

Outcome a6() {
  Outcome o{"A6"};
  const auto t = Clock::now();
  const std::string cmd = std::string(RDAT_TESTS_PATH) + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  o.seconds = since(t);
  o.pass = WIFEXITED(status) && WEXITSTATUS(status) == 0 && o.seconds <= 300;
  o.detail = "unit suites " + std::string(o.pass ? "passed" : "failed, run rdat_tests for details");
  return o;
}

Outcome a7(const Desk& desk) {
  Outcome o{"A7"};
  const auto t = Clock::now();
  const std::uint64_t seed = desk.seeds().front();
  const auto data = harness::build_data(desk.config(), seed);
  forecaster::ArchConfig arch = desk.config().arch;
  const auto init = forecaster::make_forecaster(arch, data.prepared.graph.n, derive_seed(seed, {stream::kModelInit}));
  advtrain::ATConfig c = desk.config().adversarial;
  c.alpha = 0.0;
  c.selection = advtrain::Selection::Random;
  c.epochs = 3;
  c.max_batches = 10;
  const auto& p = data.prepared;
  const auto a = advtrain::adversarial_train(init, nullptr, p.split, c, p.graph, p.scaler, seed);
  const auto b = advtrain::plain_adversarial_train(init, p.split, c, p.graph, p.scaler, seed);
  double worst = 0;
  for (std::size_t e = 0; e < c.epochs; ++e) {
    worst = std::max(worst, std::abs(a.log.epochs[e].adv_loss - b.log.epochs[e].adv_loss));
    worst = std::max(worst, std::abs(a.log.epochs[e].adv_val_mae - b.log.epochs[e].adv_val_mae));
  }
  o.seconds = since(t);
  o.pass = worst <= 1e-9 && a.log.epochs.size() == b.log.epochs.size();
  o.detail = "max per-epoch loss difference " + fmt("%.3g", worst) + " over 3 epochs (need <= 1e-9)";
  return o;
}

Outcome a8() {
  Outcome o{"A8"};
  const auto t = Clock::now();
  harness::ExperimentConfig c = harness::load_config(fs::path(RDAT_SOURCE_DIR) / "configs" / "toy.yaml");
  c.defenses = {"at", "at_policy", "rdat"};
  c.seeds = {1, 2};
  const auto r1 = harness::run_experiment(c);
  const auto r2 = harness::run_experiment(c);
  double worst = 0;
  std::size_t values = 0;
  auto cmp = [&](const harness::CellResult& x, const harness::CellResult& y) {
    if (x.mae.size() != y.mae.size()) worst = 1e300;
    for (std::size_t i = 0; i < std::min(x.mae.size(), y.mae.size()); ++i) {
      worst = std::max({worst, std::abs(x.mae[i] - y.mae[i]), std::abs(x.rmse[i] - y.rmse[i])});
      values += 2;
    }
  };
  for (std::size_t i = 0; i < r1.clean.size(); ++i) cmp(r1.clean[i], r2.clean[i]);
  for (std::size_t i = 0; i < r1.cells.size(); ++i) cmp(r1.cells[i], r2.cells[i]);
  o.seconds = since(t);
  o.pass = worst <= 1e-6 && values > 0;
  o.detail = fmt("max difference %.3g over %.0f report values (need <= 1e-6)", worst, static_cast<double>(values));
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string only;
  std::vector<std::uint64_t> seeds;
  app.add_option("--only", only, "comma-separated criteria, e.g. A1,A4");
  app.add_option("--seeds", seeds, "experiment seeds")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  log::set_level(log::Level::Warn);

  auto cfg = harness::load_config(fs::path(RDAT_SOURCE_DIR) / "configs" / "desk.yaml");
  if (seeds.empty()) seeds = cfg.seeds;
  Desk desk(cfg, seeds);

  std::set<std::string> wanted;
  std::stringstream ss(only);
  for (std::string id; std::getline(ss, id, ',');) wanted.insert(id);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks{
      {"A6", [] { return a6(); }},
      {"A7", [&] { return a7(desk); }},
      {"A8", [] { return a8(); }},
      {"A4", [] { return a4(); }},
      {"A1", [&] { return a1(desk); }},
      {"A5", [&] { return a5(desk); }},
      {"A2", [&] { return a2(desk); }},
      {"A3", [&] { return a3(desk); }},
  };
  int failures = 0;
  for (const auto& [id, fn] : checks) {
    if (!wanted.empty() && !wanted.contains(id)) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = Outcome{id, false, std::string("error: ") + e.what(), 0.0};
    }
    report(o);
    failures += !o.pass;
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
