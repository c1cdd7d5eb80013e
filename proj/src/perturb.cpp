#include "rdat/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rdat/errors.hpp"
#include "rdat/rng.hpp"

namespace rdat::perturb {

using forecaster::Forecaster;

void PerturbBudget::validate(std::size_t n) const {
  if (!(epsilon > 0.0)) throw ParameterError("PerturbBudget: epsilon must be > 0");
  if (eta < 1 || eta > n) {
    throw ParameterError("PerturbBudget: eta=" + std::to_string(eta) + " outside [1, " + std::to_string(n) + "]");
  }
  if (steps < 1) throw ParameterError("PerturbBudget: steps must be >= 1");
  if (!(gamma > 0.0)) throw ParameterError("PerturbBudget: gamma must be > 0");
}

std::size_t nodes_for_ratio(double ratio, std::size_t n) {
  if (!(ratio > 0.0) || ratio > 1.0) throw ParameterError("node ratio must lie in (0, 1]");
  // Guard against 0.1 * 20 landing a hair above 2.
  const double raw = ratio * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

bool NodeIndicator::contains(std::size_t node) const {
  return std::find(selected.begin(), selected.end(), node) != selected.end();
}

std::vector<bool> NodeIndicator::mask() const {
  std::vector<bool> m(n, false);
  for (std::size_t i : selected) m[i] = true;
  return m;
}

Tensor NodeIndicator::matrix() const {
  Tensor m({n, n});
  for (std::size_t i : selected) m.at(i, i) = 1.0;
  return m;
}

NodeIndicator make_indicator(const std::vector<std::size_t>& omega, std::size_t n) {
  std::vector<bool> seen(n, false);
  for (std::size_t i : omega) {
    if (i >= n) throw ContractError("make_indicator: node " + std::to_string(i) + " out of range for n=" + std::to_string(n));
    if (seen[i]) throw ContractError("make_indicator: duplicate node " + std::to_string(i));
    seen[i] = true;
  }
  return NodeIndicator{omega, n};
}

Tensor sample_uniform_delta(const std::vector<std::size_t>& shape, double epsilon, std::uint64_t seed) {
  if (!(epsilon > 0.0)) throw ParameterError("sample_uniform_delta: epsilon must be > 0");
  Rng rng(seed);
  Tensor d(shape);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = uniform_open(rng, -epsilon, epsilon);
  return d;
}

Tensor apply_delta(const Tensor& x, const Tensor& delta, const NodeIndicator& indicator) {
  if (x.shape() != delta.shape()) throw ContractError("apply_delta: delta shape does not match x");
  if (x.rank() != 3 || x.dim(1) != indicator.n) throw ContractError("apply_delta: x must be tau x n x c");
  Tensor out = x;
  const std::size_t tau = x.dim(0), c = x.dim(2);
  for (std::size_t t = 0; t < tau; ++t) {
    for (std::size_t i : indicator.selected) {
      for (std::size_t k = 0; k < c; ++k) {
        const double clean = x.at(t, i, k);
        out.at(t, i, k) = std::clamp(clean + delta.at(t, i, k), range_lo(clean), range_hi(clean));
      }
    }
  }
  return out;
}

Tensor clip_project(const Tensor& candidate, const Tensor& clean, double epsilon) {
  if (candidate.size() != clean.size()) throw ContractError("clip_project: shape mismatch");
  Tensor out = candidate;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = clean[i];
    const double lo = std::max(x - epsilon, range_lo(x));
    const double hi = std::min(x + epsilon, range_hi(x));
    out[i] = std::clamp(out[i], lo, hi);
  }
  return out;
}

// ------------------------------------------------------------------- PGD

std::vector<bool> packed_row_mask(const std::vector<NodeIndicator>& per_sample, std::size_t history) {
  if (per_sample.empty()) throw ContractError("packed_row_mask: no indicators");
  const std::size_t B = per_sample.size(), n = per_sample.front().n;
  std::vector<bool> rows(history * B * n, false);
  for (std::size_t b = 0; b < B; ++b) {
    if (per_sample[b].n != n) throw ContractError("packed_row_mask: indicators disagree on n");
    for (std::size_t i : per_sample[b].selected)
      for (std::size_t t = 0; t < history; ++t) rows[(t * B + b) * n + i] = true;
  }
  return rows;
}

std::vector<double> per_sample_loss(const Tensor& prediction, const AttackObjective& objective, std::size_t batch) {
  if (prediction.shape() != objective.target.shape()) throw ContractError("per_sample_loss: target shape mismatch");
  const bool with_teacher = !objective.teacher.empty();
  if (with_teacher && objective.teacher.shape() != prediction.shape()) {
    throw ContractError("per_sample_loss: teacher shape mismatch");
  }
  const std::size_t per = prediction.size() / batch;
  std::vector<double> out(batch, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    double sq = 0.0, kd = 0.0;
    for (std::size_t k = b * per; k < (b + 1) * per; ++k) {
      const double d = prediction[k] - objective.target[k];
      sq += d * d;
      if (with_teacher) {
        const double e = prediction[k] - objective.teacher[k];
        kd += e * e;
      }
    }
    out[b] = sq / static_cast<double>(per) + (with_teacher ? objective.alpha * kd / static_cast<double>(per) : 0.0);
  }
  return out;
}

PgdResult pgd_attack_batch(const Forecaster& model, const Tensor& packed_x, std::size_t batch,
                           const std::vector<NodeIndicator>& indicators, const PerturbBudget& budget,
                           const AttackObjective& objective, InitMode init, std::uint64_t seed) {
  const std::size_t n = model.nodes, tau = model.arch.history;
  if (indicators.size() != batch) throw ContractError("pgd_attack_batch: need one indicator per sample");
  if (packed_x.rows() != tau * batch * n) throw ContractError("pgd_attack_batch: packed input has wrong row count");
  for (const auto& ind : indicators) {
    if (ind.n != n) throw ContractError("pgd_attack_batch: indicator node count mismatch");
  }
  if (!(budget.epsilon > 0.0) || budget.steps < 1 || !(budget.gamma > 0.0)) {
    throw ParameterError("pgd_attack_batch: invalid budget");
  }
  const std::size_t c = packed_x.cols();
  const std::vector<bool> rows = packed_row_mask(indicators, tau);

  Tensor x = packed_x;
  if (init == InitMode::Random) {
    const Tensor delta = sample_uniform_delta(packed_x.shape(), budget.epsilon, seed);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (!rows[r]) continue;
      for (std::size_t k = 0; k < c; ++k) x[r * c + k] += delta[r * c + k];
    }
    x = clip_project(x, packed_x, budget.epsilon);
  }

  const bool with_teacher = !objective.teacher.empty();
  const double B = static_cast<double>(batch);
  const forecaster::OutputLoss loss = [&](ag::Var pred) {
    ag::Tape& t = *pred.tape;
    ag::Var l = ag::scale(ag::mse(pred, t.constant(objective.target)), B);
    if (with_teacher && objective.alpha != 0.0) {
      l = ag::add(l, ag::scale(ag::mse(pred, t.constant(objective.teacher)), objective.alpha * B));
    }
    return l;
  };

  PgdResult result;
  result.x_adv = x;
  result.best_iterate.assign(batch, 0);
  const std::size_t per_sample_rows = n;
  for (std::size_t it = 0; it <= budget.steps; ++it) {
    Tensor grad;
    std::vector<double> losses;
    if (it < budget.steps) {
      ag::Tape tape;
      BoundParams p(tape, model.params, false);
      ag::Var xv = tape.leaf(x, true);
      ag::Var pred = forecaster::forward(model.arch, p, xv, n, batch);
      losses = per_sample_loss(pred.value(), objective, batch);
      tape.backward(loss(pred));
      grad = tape.grad_or_zero(xv.id);
      if (!grad.all_finite()) throw AttackError("non-finite input gradient", static_cast<int>(it));
    } else {
      losses = per_sample_loss(forecaster::predict(model, x, batch), objective, batch);
    }
    if (it == 0) {
      result.initial_loss = losses;
      result.best_loss = losses;
    } else {
      for (std::size_t b = 0; b < batch; ++b) {
        if (!(losses[b] > result.best_loss[b])) continue;
        result.best_loss[b] = losses[b];
        result.best_iterate[b] = it;
        for (std::size_t t = 0; t < tau; ++t) {
          const std::size_t r0 = (t * batch + b) * per_sample_rows;
          std::copy_n(x.data() + r0 * c, per_sample_rows * c, result.x_adv.data() + r0 * c);
        }
      }
    }
    if (it == budget.steps) break;

    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (!rows[r]) continue;
      for (std::size_t k = 0; k < c; ++k) {
        const double g = grad[r * c + k];
        const double s = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
        x[r * c + k] += budget.gamma * s;
      }
    }
    x = clip_project(x, packed_x, budget.epsilon);
  }
  return result;
}

AdversarialSample pgd_attack(const Forecaster& model, const datakit::SampleWindow& sample,
                             const NodeIndicator& indicator, const PerturbBudget& budget, InitMode init,
                             std::uint64_t seed, const std::string& tag) {
  const Tensor x = sample.x();
  AttackObjective objective{forecaster::pack_targets({sample.y()}), {}, 0.0};
  PgdResult r = pgd_attack_batch(model, forecaster::pack_inputs({x}), 1, {indicator}, budget, objective, init, seed);
  return AdversarialSample{r.x_adv.reshaped(x.shape()), sample, indicator, budget, tag, r.best_loss[0]};
}

// ------------------------------------------------------------- selectors

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Random: return "random";
    case Strategy::Degree: return "degree";
    case Strategy::PageRank: return "pagerank";
    case Strategy::Centrality: return "centrality";
    case Strategy::Tnds: return "tnds";
  }
  return "unknown";
}

Strategy parse_strategy(const std::string& name) {
  std::string s;
  for (char ch : name) s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  if (s == "random") return Strategy::Random;
  if (s == "degree") return Strategy::Degree;
  if (s == "pagerank" || s == "pr") return Strategy::PageRank;
  if (s == "centrality" || s == "betweenness") return Strategy::Centrality;
  if (s == "tnds") return Strategy::Tnds;
  throw ParameterError("unknown attack strategy '" + name + "'");
}

std::vector<std::size_t> top_k(const std::vector<double>& scores, std::size_t k) {
  if (k > scores.size()) throw ContractError("top_k: k=" + std::to_string(k) + " exceeds " + std::to_string(scores.size()));
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(k);
  return idx;
}

GraphScores score_graph(const datakit::TrafficGraph& graph) {
  return GraphScores{datakit::degree_scores(graph), datakit::pagerank_scores(graph), datakit::betweenness_scores(graph)};
}

std::vector<std::size_t> select_static(Strategy strategy, const GraphScores& scores, std::size_t n, std::size_t eta,
                                       std::uint64_t seed) {
  if (eta > n) throw ContractError("select_static: eta=" + std::to_string(eta) + " exceeds n=" + std::to_string(n));
  switch (strategy) {
    case Strategy::Random: {
      Rng rng(seed);
      return sample_without_replacement(rng, n, eta);
    }
    case Strategy::Degree: return top_k(scores.degree, eta);
    case Strategy::PageRank: return top_k(scores.pagerank, eta);
    case Strategy::Centrality: return top_k(scores.betweenness, eta);
    case Strategy::Tnds: break;
  }
  throw ContractError("select_static: TNDS needs a model; use select_tnds");
}

namespace {

std::vector<double> node_saliency(const Tensor& grad, std::size_t batch, std::size_t sample, std::size_t n,
                                  std::size_t tau) {
  const std::size_t c = grad.cols();
  std::vector<double> s(n, 0.0);
  for (std::size_t t = 0; t < tau; ++t)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k) s[i] += std::abs(grad[((t * batch + sample) * n + i) * c + k]);
  return s;
}

}  // namespace

std::vector<double> tnds_saliency(const Forecaster& model, const Tensor& x, const Tensor& y) {
  const Tensor g = forecaster::grad_input(model, x, y);
  return node_saliency(g.reshaped({g.size() / g.dim(2), g.dim(2)}), 1, 0, model.nodes, model.arch.history);
}

std::vector<std::size_t> select_tnds(const Forecaster& model, const datakit::SampleWindow& sample, std::size_t eta) {
  if (eta > model.nodes) throw ContractError("select_tnds: eta exceeds node count");
  return top_k(tnds_saliency(model, sample.x(), sample.y()), eta);
}

std::vector<std::vector<std::size_t>> select_tnds_batch(const Forecaster& model, const forecaster::Batch& batch,
                                                        std::size_t eta) {
  if (eta > model.nodes) throw ContractError("select_tnds_batch: eta exceeds node count");
  const double B = static_cast<double>(batch.size);
  const Tensor g = forecaster::grad_input(model, batch.x, batch.size, [&](ag::Var pred) {
    return ag::scale(ag::mse(pred, pred.tape->constant(batch.y)), B);
  });
  std::vector<std::vector<std::size_t>> out;
  out.reserve(batch.size);
  for (std::size_t b = 0; b < batch.size; ++b) {
    out.push_back(top_k(node_saliency(g, batch.size, b, model.nodes, model.arch.history), eta));
  }
  return out;
}

}  // namespace rdat::perturb
