#pragma once

// Threat model: L-infinity perturbations restricted to a subset of nodes,
// the PGD attack, and the node selectors that pick the subset.

#include <cstdint>
#include <string>
#include <vector>

#include "rdat/datakit.hpp"
#include "rdat/forecaster.hpp"
#include "rdat/tensor.hpp"

namespace rdat::perturb {

struct PerturbBudget {
  double epsilon = 0.5;
  std::size_t eta = 1;
  std::size_t steps = 5;
  double gamma = 0.1;

  // Throws ParameterError unless epsilon > 0, 1 <= eta <= n, steps >= 1, gamma > 0.
  void validate(std::size_t n) const;
};

// Node count for a fraction of n, rounded up.
std::size_t nodes_for_ratio(double ratio, std::size_t n);

struct NodeIndicator {
  std::vector<std::size_t> selected;
  std::size_t n = 0;

  bool contains(std::size_t node) const;
  std::vector<bool> mask() const;
  // n x n diagonal 0/1 matrix.
  Tensor matrix() const;
};

NodeIndicator make_indicator(const std::vector<std::size_t>& omega, std::size_t n);

// I.i.d. uniform(-epsilon, epsilon) entries.
Tensor sample_uniform_delta(const std::vector<std::size_t>& shape, double epsilon, std::uint64_t seed);

// Valid range for a perturbed reading whose clean value is `clean`: [0, 1],
// widened to include the clean value itself when it already lies outside.
inline double range_lo(double clean) { return clean < 0.0 ? clean : 0.0; }
inline double range_hi(double clean) { return clean > 1.0 ? clean : 1.0; }

// x + delta on the selected nodes (x, delta: tau x n x c), then clamped to the
// data range. Rows of other nodes are copied unchanged.
Tensor apply_delta(const Tensor& x, const Tensor& delta, const NodeIndicator& indicator);

// Elementwise clamp into [clean - eps, clean + eps] intersected with the data range.
Tensor clip_project(const Tensor& candidate, const Tensor& clean, double epsilon);

// ------------------------------------------------------------------- PGD

enum class InitMode { Random, Zero };

// Per-sample attack loss: MSE(pred, target) + alpha * MSE(pred, teacher).
// With an empty teacher the second term is dropped.
struct AttackObjective {
  Tensor target;   // (B * n) x T
  Tensor teacher;  // (B * n) x T or empty
  double alpha = 0.0;
};

// Row mask over a packed (tau * B * n) x c input: true where the row's node is
// selected for its sample.
std::vector<bool> packed_row_mask(const std::vector<NodeIndicator>& per_sample, std::size_t history);

// Per-sample objective values for a (B * n) x T prediction.
std::vector<double> per_sample_loss(const Tensor& prediction, const AttackObjective& objective, std::size_t batch);

struct PgdResult {
  Tensor x_adv;  // packed like the input
  std::vector<double> initial_loss;
  std::vector<double> best_loss;
  std::vector<std::size_t> best_iterate;  // 0 is the initial point
};

// Sign-gradient ascent with projection, `budget.steps` iterations, keeping
// each sample's best iterate (the initial point included).
PgdResult pgd_attack_batch(const forecaster::Forecaster& model, const Tensor& packed_x, std::size_t batch,
                           const std::vector<NodeIndicator>& indicators, const PerturbBudget& budget,
                           const AttackObjective& objective, InitMode init, std::uint64_t seed);

struct AdversarialSample {
  Tensor x_adv;  // tau x n x c
  datakit::SampleWindow base;
  NodeIndicator indicator;
  PerturbBudget budget;
  std::string attack_tag;
  double loss = 0.0;
};

// Single-window attack against MSE on the window's target.
AdversarialSample pgd_attack(const forecaster::Forecaster& model, const datakit::SampleWindow& sample,
                             const NodeIndicator& indicator, const PerturbBudget& budget, InitMode init,
                             std::uint64_t seed, const std::string& tag = "pgd");

// ------------------------------------------------------------- selectors

enum class Strategy { Random, Degree, PageRank, Centrality, Tnds };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& name);

// Indices of the k largest scores; ties go to the lower index.
std::vector<std::size_t> top_k(const std::vector<double>& scores, std::size_t k);

struct GraphScores {
  std::vector<double> degree;
  std::vector<double> pagerank;
  std::vector<double> betweenness;
};
GraphScores score_graph(const datakit::TrafficGraph& graph);

// Random: uniform without replacement from `seed`. Score strategies: top-eta.
std::vector<std::size_t> select_static(Strategy strategy, const GraphScores& scores, std::size_t n, std::size_t eta,
                                       std::uint64_t seed);

// Gradient-saliency stand-in for TNDS: L1 norm of d MSE / d x per node.
std::vector<double> tnds_saliency(const forecaster::Forecaster& model, const Tensor& x, const Tensor& y);
std::vector<std::size_t> select_tnds(const forecaster::Forecaster& model, const datakit::SampleWindow& sample,
                                     std::size_t eta);
// Per-sample selections for a packed batch.
std::vector<std::vector<std::size_t>> select_tnds_batch(const forecaster::Forecaster& model,
                                                        const forecaster::Batch& batch, std::size_t eta);

}  // namespace rdat::perturb
