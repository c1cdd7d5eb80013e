#pragma once

// Node-subset policy: a graph-temporal encoder that embeds every node, and an
// attention decoder that picks nodes one at a time. Trained with REINFORCE on
// a reward measured against a baseline selector.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rdat/autograd.hpp"
#include "rdat/datakit.hpp"
#include "rdat/forecaster.hpp"
#include "rdat/params.hpp"
#include "rdat/perturb.hpp"

namespace rdat::policy {

struct PolicyConfig {
  std::size_t blocks = 2;
  std::size_t hidden_channels = 16;
  std::vector<std::size_t> dilations{1, 2};
  std::size_t head_channels = 32;
  std::size_t node_embed_dim = 10;
  std::size_t embed_dim = 16;  // d
  std::size_t heads = 4;       // M
  double clip = 10.0;          // C
};

struct PolicyNet {
  PolicyConfig config;
  forecaster::ArchConfig encoder;  // horizon == embed_dim
  std::size_t nodes = 0;
  ParamSet params;  // "enc.*" and "dec.*"
};

PolicyNet make_policy(const PolicyConfig& config, std::size_t nodes, std::size_t history, std::size_t in_channels,
                      std::uint64_t seed);

// ------------------------------------------------------------------ encoder

// Node embeddings for a packed batch: (B * n) x d, row b * n + i.
ag::Var encode_batch(const PolicyNet& net, const BoundParams& params, ag::Var packed_x, std::size_t batch);

struct Embedding {
  Tensor F;      // n x d
  Tensor u_bar;  // 1 x d
};
Embedding encode(const PolicyNet& net, const Tensor& x);

// ------------------------------------------------------------------ decoder

// Per-sample projections reused by every decoding step.
struct DecoderState {
  ag::Var F;       // n x d
  ag::Var u_bar;   // 1 x d
  ag::Var keys;    // n x d, heads side by side
  ag::Var values;  // n x d
  ag::Var final_keys;  // n x d
};

DecoderState prepare_decoder(const PolicyNet& net, const BoundParams& params, ag::Var F);

// Log-probabilities (1 x n) of the next pick. Masked nodes come out -inf.
ag::Var decode_step(const PolicyNet& net, const BoundParams& params, const DecoderState& state,
                    std::optional<std::size_t> last_selected, const std::vector<bool>& mask);
// Raw logits before masking and normalization, for inspection.
ag::Var decode_logits(const PolicyNet& net, const BoundParams& params, const DecoderState& state,
                      std::optional<std::size_t> last_selected);

// Value-only probabilities for an embedding F (n x d).
std::vector<double> step_probabilities(const PolicyNet& net, const Tensor& F, std::optional<std::size_t> last_selected,
                                       const std::vector<bool>& mask);

enum class DecodeMode { Sampled, Greedy };

struct NodeSolution {
  std::vector<std::size_t> omega;
  double logprob = 0.0;
  std::vector<double> step_logprobs;
  DecodeMode mode = DecodeMode::Greedy;
};

NodeSolution sample_solution(const PolicyNet& net, const Tensor& x, std::size_t eta, DecodeMode mode,
                             std::uint64_t seed);
// One solution per sample of a packed batch; sample b draws from
// derive_seed(seed, {b}).
std::vector<NodeSolution> sample_batch(const PolicyNet& net, const Tensor& packed_x, std::size_t batch,
                                       std::size_t eta, DecodeMode mode, std::uint64_t seed);

// log p(omega) recorded on the tape, teacher-forcing the given picks.
ag::Var solution_logprob(const PolicyNet& net, const BoundParams& params, const DecoderState& state,
                         const std::vector<std::size_t>& omega);

// ---------------------------------------------------------------- rewards

// MSE of the model on x + delta * I(omega) against y, delta drawn from
// uniform(-epsilon, epsilon) with `shared_seed`.
double evaluate_cost(const forecaster::Forecaster& model, const datakit::SampleWindow& sample,
                     const std::vector<std::size_t>& omega, double epsilon, std::uint64_t shared_seed);
// Batched form; seeds[b] is sample b's delta seed.
std::vector<double> evaluate_cost_batch(const forecaster::Forecaster& model, const forecaster::Batch& batch,
                                        const std::vector<std::vector<std::size_t>>& omegas, double epsilon,
                                        const std::vector<std::uint64_t>& seeds);

struct RewardRecord {
  double cost_policy = 0.0;
  double cost_baseline = 0.0;
  double reward = 0.0;
  std::uint64_t shared_delta_seed = 0;
};

RewardRecord balanced_reward(const forecaster::Forecaster& model, const datakit::SampleWindow& sample,
                             const std::vector<std::size_t>& omega_policy,
                             const std::vector<std::size_t>& omega_baseline, double epsilon,
                             std::uint64_t shared_seed);

// Baseline picks for each sample of a batch.
std::vector<std::vector<std::size_t>> baseline_selection(perturb::Strategy strategy,
                                                         const forecaster::Forecaster& model,
                                                         const forecaster::Batch& batch,
                                                         const perturb::GraphScores& scores, std::size_t eta,
                                                         std::uint64_t seed);

// One optimizer step on -mean((r + c) * log p(omega)). Returns the surrogate.
double reinforce_update(PolicyNet& net, Adam& optimizer, const Tensor& packed_x, std::size_t batch,
                        const std::vector<std::vector<std::size_t>>& omegas, const std::vector<double>& rewards,
                        double offset);

// --------------------------------------------------------------- training

struct PolicyTrainConfig {
  std::size_t epochs = 10;       // E
  std::size_t inner_iters = 30;  // b
  double reward_offset = 0.0;    // c
  double learning_rate = 1e-3;
  perturb::Strategy baseline = perturb::Strategy::Tnds;
  std::size_t batch_size = 16;
  bool update_model = true;  // false keeps the forecaster frozen
  AdamConfig model_optimizer;
  std::uint64_t seed = 0;
};

struct PolicyLogRow {
  std::size_t epoch = 0;
  std::size_t iter = 0;
  double reward_mean = 0.0;
  double surrogate = 0.0;
  double model_loss = 0.0;  // filled on the epoch's model step row
  bool model_step = false;
};

struct PolicyTrainResult {
  std::vector<PolicyLogRow> log;
  std::vector<double> epoch_reward_mean;
  std::size_t policy_steps = 0;
  std::size_t model_steps = 0;
};

// Alternates `inner_iters` policy updates with one forecaster update on
// PGD examples chosen by the current policy, for `epochs` rounds.
PolicyTrainResult train_policy(PolicyNet& net, forecaster::Forecaster& model, const datakit::DatasetSplit& split,
                               const perturb::GraphScores& scores, const PolicyTrainConfig& config,
                               const perturb::PerturbBudget& budget);

void write_policy_log(const std::filesystem::path& path, const std::vector<PolicyLogRow>& log);

void save_policy(const std::filesystem::path& dir, const PolicyNet& net, Manifest extra = {});
PolicyNet load_policy(const std::filesystem::path& dir);

}  // namespace rdat::policy
