#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "helpers.hpp"
#include "rdat/errors.hpp"
#include "rdat/perturb.hpp"
#include "rdat/rng.hpp"

using namespace rdat;
using namespace rdat::perturb;
using forecaster::Forecaster;

namespace {

// Sign-gradient ascent on one window, written against the single-window API.
// Zero start; the best iterate (strictly larger loss) wins.
std::pair<Tensor, double> reference_pgd(const Forecaster& m, const Tensor& x, const Tensor& y,
                                        const std::vector<std::size_t>& omega, double eps, double gamma,
                                        std::size_t steps) {
  Tensor cur = x, best = x;
  double best_loss = forecaster::mse_loss(forecaster::predict(m, x), y);
  const std::size_t tau = x.dim(0), c = x.dim(2);
  for (std::size_t s = 0; s < steps; ++s) {
    const Tensor g = forecaster::grad_input(m, cur, y);
    for (std::size_t t = 0; t < tau; ++t)
      for (std::size_t i : omega)
        for (std::size_t k = 0; k < c; ++k) {
          const double gv = g.at(t, i, k);
          double v = cur.at(t, i, k) + gamma * ((gv > 0) - (gv < 0));
          const double x0 = x.at(t, i, k);
          v = std::min(v, x0 + eps);
          v = std::max(v, x0 - eps);
          v = std::min(v, std::max(1.0, x0));
          v = std::max(v, std::min(0.0, x0));
          cur.at(t, i, k) = v;
        }
    const double l = forecaster::mse_loss(forecaster::predict(m, cur), y);
    if (l > best_loss) {
      best_loss = l;
      best = cur;
    }
  }
  return {best, best_loss};
}

Forecaster tiny_model(std::size_t n, std::uint64_t seed) { return forecaster::make_forecaster(testutil::tiny_arch(), n, seed); }

}  // namespace

TEST_SUITE("perturb") {
  TEST_CASE("node counts round up") {
    CHECK(nodes_for_ratio(0.10, 20) == 2);
    CHECK(nodes_for_ratio(0.20, 20) == 4);
    CHECK(nodes_for_ratio(0.15, 20) == 3);
    CHECK(nodes_for_ratio(0.01, 20) == 1);
    CHECK(nodes_for_ratio(1.0, 7) == 7);
    CHECK(nodes_for_ratio(0.3, 7) == 3);
    CHECK_THROWS_AS(nodes_for_ratio(0.0, 20), ParameterError);
    CHECK_THROWS_AS(nodes_for_ratio(1.5, 20), ParameterError);
  }

  TEST_CASE("budget validation") {
    PerturbBudget b;
    CHECK_NOTHROW(b.validate(5));
    b.eta = 6;
    CHECK_THROWS_AS(b.validate(5), ParameterError);
    b = PerturbBudget{};
    b.epsilon = 0;
    CHECK_THROWS_AS(b.validate(5), ParameterError);
    b = PerturbBudget{};
    b.steps = 0;
    CHECK_THROWS_AS(b.validate(5), ParameterError);
  }

  TEST_CASE("indicator") {
    const NodeIndicator ind = make_indicator({3, 0}, 5);
    CHECK(ind.contains(3));
    CHECK_FALSE(ind.contains(1));
    const auto m = ind.mask();
    CHECK(std::count(m.begin(), m.end(), true) == 2);
    const Tensor D = ind.matrix();
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) CHECK(D.at(i, j) == ((i == j && (i == 0 || i == 3)) ? 1.0 : 0.0));
    CHECK_THROWS_AS(make_indicator({1, 1}, 5), ContractError);
    CHECK_THROWS_AS(make_indicator({5}, 5), ContractError);
  }

  TEST_CASE("perturbations stay in the ball, the data range and the selected nodes") {
    Rng rng(4);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 3 + uniform_index(rng, 6), tau = 1 + uniform_index(rng, 5);
      const double eps = 0.05 + uniform_open(rng);
      const Tensor x = testutil::random_tensor({tau, n, 1}, 1000 + trial, -0.2, 1.2);
      const std::size_t eta = 1 + uniform_index(rng, n);
      const NodeIndicator ind = make_indicator(sample_without_replacement(rng, n, eta), n);
      const Tensor delta = sample_uniform_delta({tau, n, 1}, eps, 5000 + trial);
      Tensor big = testutil::random_tensor({tau, n, 1}, 9000 + trial, -3, 3);
      for (std::size_t k = 0; k < big.size(); ++k) big[k] += x[k];
      const Tensor a = apply_delta(x, delta, ind);
      const Tensor p = clip_project(big, x, eps);
      for (std::size_t t = 0; t < tau; ++t)
        for (std::size_t i = 0; i < n; ++i) {
          const double x0 = x.at(t, i, 0);
          CHECK(std::abs(delta.at(t, i, 0)) < eps);
          if (!ind.contains(i)) CHECK(a.at(t, i, 0) == x0);
          CHECK(std::abs(a.at(t, i, 0) - x0) <= eps + 1e-15);
          CHECK(a.at(t, i, 0) >= range_lo(x0));
          CHECK(a.at(t, i, 0) <= range_hi(x0));
          CHECK(std::abs(p.at(t, i, 0) - x0) <= eps + 1e-15);
          CHECK(p.at(t, i, 0) >= range_lo(x0));
          CHECK(p.at(t, i, 0) <= range_hi(x0));
        }
    }
  }

  TEST_CASE("PGD from zero matches a single-window reference") {
    const std::size_t n = 5;
    const Forecaster m = tiny_model(n, 6);
    for (std::uint64_t s = 0; s < 4; ++s) {
      const Tensor x = testutil::random_tensor({4, n, 1}, 70 + s, 0.0, 1.0);
      const Tensor y = testutil::random_tensor({4, n, 1}, 80 + s, 0.0, 1.0);
      const std::vector<std::size_t> omega{s % n, (s + 2) % n};
      PerturbBudget b{0.3, 2, 6, 0.07};
      AttackObjective obj{forecaster::pack_targets({y}), {}, 0.0};
      const PgdResult r = pgd_attack_batch(m, forecaster::pack_inputs({x}), 1, {make_indicator(omega, n)}, b, obj,
                                           InitMode::Zero, 1);
      const auto [want_x, want_loss] = reference_pgd(m, x, y, omega, 0.3, 0.07, 6);
      CHECK(r.best_loss[0] == doctest::Approx(want_loss).epsilon(1e-10));
      CHECK(max_abs_diff(r.x_adv.reshaped(x.shape()), want_x) <= 1e-12);
      CHECK(r.initial_loss[0] == doctest::Approx(forecaster::mse_loss(forecaster::predict(m, x), y)));
    }
  }

  TEST_CASE("PGD keeps the best iterate and respects the threat model") {
    const std::size_t n = 6, B = 3;
    const Forecaster m = tiny_model(n, 2);
    std::vector<Tensor> xs, ys;
    for (std::size_t b = 0; b < B; ++b) {
      xs.push_back(testutil::random_tensor({4, n, 1}, 10 + b, 0.0, 1.0));
      ys.push_back(testutil::random_tensor({4, n, 1}, 20 + b, 0.0, 1.0));
    }
    const Tensor packed = forecaster::pack_inputs(xs);
    std::vector<NodeIndicator> inds{make_indicator({0}, n), make_indicator({1, 4}, n), make_indicator({5, 2, 3}, n)};
    const PerturbBudget budget{0.5, 3, 5, 0.1};
    const AttackObjective obj{forecaster::pack_targets(ys), {}, 0.0};
    const PgdResult r = pgd_attack_batch(m, packed, B, inds, budget, obj, InitMode::Random, 99);
    const PgdResult again = pgd_attack_batch(m, packed, B, inds, budget, obj, InitMode::Random, 99);
    CHECK(r.x_adv == again.x_adv);

    const auto rows = packed_row_mask(inds, 4);
    for (std::size_t k = 0; k < packed.size(); ++k) {
      if (!rows[k]) CHECK(r.x_adv[k] == packed[k]);
      CHECK(std::abs(r.x_adv[k] - packed[k]) <= 0.5 + 1e-12);
    }
    const auto final_loss = per_sample_loss(forecaster::predict(m, r.x_adv, B), obj, B);
    for (std::size_t b = 0; b < B; ++b) {
      CHECK(r.best_loss[b] >= r.initial_loss[b]);
      CHECK(final_loss[b] == doctest::Approx(r.best_loss[b]).epsilon(1e-10));
      CHECK(r.best_iterate[b] <= budget.steps);
    }
  }

  TEST_CASE("teacher term enters the attack objective") {
    const Tensor pred = Tensor::matrix(2, 2, {1, 2, 3, 4});
    const Tensor target = Tensor::matrix(2, 2, {0, 2, 3, 2});
    const Tensor teacher = Tensor::matrix(2, 2, {1, 1, 3, 4});
    const auto plain = per_sample_loss(pred, {target, {}, 0.5}, 2);
    const auto both = per_sample_loss(pred, {target, teacher, 0.5}, 2);
    CHECK(plain[0] == doctest::Approx(0.5));
    CHECK(plain[1] == doctest::Approx(2.0));
    CHECK(both[0] == doctest::Approx(0.5 + 0.5 * 0.5));
    CHECK(both[1] == doctest::Approx(2.0));
  }

  TEST_CASE("attack inputs are checked") {
    const Forecaster m = tiny_model(4, 1);
    const Tensor packed({16, 1}, 0.5);
    const AttackObjective obj{Tensor({4, 4}), {}, 0.0};
    CHECK_THROWS_AS(pgd_attack_batch(m, packed, 1, {make_indicator({0}, 5)}, {}, obj, InitMode::Zero, 1),
                    ContractError);
    CHECK_THROWS_AS(pgd_attack_batch(m, packed, 1, {}, {}, obj, InitMode::Zero, 1), ContractError);
    CHECK_THROWS_AS(pgd_attack_batch(m, packed, 1, {make_indicator({0}, 4)}, {0.0, 1, 5, 0.1}, obj, InitMode::Zero, 1),
                    ParameterError);
  }

  TEST_CASE("top_k orders by score and breaks ties by index") {
    CHECK(top_k({0.1, 0.5, 0.5, 0.2, 0.5}, 2) == std::vector<std::size_t>{1, 2});
    CHECK(top_k({0.1, 0.5, 0.5, 0.2, 0.5}, 4) == std::vector<std::size_t>{1, 2, 4, 3});
    CHECK(top_k({3, 3, 3}, 3) == std::vector<std::size_t>{0, 1, 2});
    CHECK_THROWS_AS(top_k({1, 2}, 3), ContractError);
  }

  TEST_CASE("strategy names round trip") {
    for (auto s : {Strategy::Random, Strategy::Degree, Strategy::PageRank, Strategy::Centrality, Strategy::Tnds})
      CHECK(parse_strategy(to_string(s)) == s);
    CHECK_THROWS_AS(parse_strategy("bogus"), ParameterError);
  }

  TEST_CASE("static selectors") {
    const auto d = datakit::synth_traffic(9, 200, 3);
    const GraphScores g = score_graph(d.graph);
    const auto r1 = select_static(Strategy::Random, g, 9, 4, 5);
    CHECK(r1 == select_static(Strategy::Random, g, 9, 4, 5));
    CHECK(std::set<std::size_t>(r1.begin(), r1.end()).size() == 4);
    CHECK(select_static(Strategy::Degree, g, 9, 3, 0) == top_k(g.degree, 3));
    CHECK(select_static(Strategy::PageRank, g, 9, 3, 0) == top_k(g.pagerank, 3));
    CHECK(select_static(Strategy::Centrality, g, 9, 3, 0) == top_k(g.betweenness, 3));
    CHECK_THROWS_AS(select_static(Strategy::Tnds, g, 9, 3, 0), ContractError);
  }

  TEST_CASE("TNDS saliency is the per-node L1 input gradient") {
    const std::size_t n = 5;
    const Forecaster m = tiny_model(n, 12);
    const auto data = datakit::prepare(datakit::synth_traffic(n, 200, 1), 4, 4);
    const auto& w = data.split.test[3];
    const Tensor g = forecaster::grad_input(m, w.x(), w.y());
    const auto sal = tnds_saliency(m, w.x(), w.y());
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t t = 0; t < 4; ++t) s += std::abs(g.at(t, i, 0));
      CHECK(sal[i] == doctest::Approx(s).epsilon(1e-12));
    }
    CHECK(select_tnds(m, w, 2) == top_k(sal, 2));

    const auto batch = forecaster::make_batch(data.split.test, 0, 5);
    const auto picks = select_tnds_batch(m, batch, 2);
    for (std::size_t b = 0; b < 5; ++b) CHECK(picks[b] == select_tnds(m, data.split.test[b], 2));
  }
}
