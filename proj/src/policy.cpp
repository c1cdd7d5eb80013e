#include "rdat/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "rdat/errors.hpp"
#include "rdat/rng.hpp"

namespace rdat::policy {

using ag::Var;
using forecaster::Forecaster;

namespace {

Tensor uniform_tensor(Rng& rng, std::size_t rows, std::size_t cols, double bound) {
  Tensor t({rows, cols});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = uniform_open(rng, -bound, bound);
  return t;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

PolicyNet make_policy(const PolicyConfig& config, std::size_t nodes, std::size_t history, std::size_t in_channels,
                      std::uint64_t seed) {
  if (config.heads == 0 || config.embed_dim % config.heads != 0) {
    throw ParameterError("PolicyConfig: heads must divide embed_dim");
  }
  if (!(config.clip > 0.0)) throw ParameterError("PolicyConfig: clip must be > 0");
  PolicyNet net;
  net.config = config;
  net.nodes = nodes;
  auto& a = net.encoder;
  a.blocks = config.blocks;
  a.hidden_channels = config.hidden_channels;
  a.dilations = config.dilations;
  a.head_channels = config.head_channels;
  a.node_embed_dim = config.node_embed_dim;
  a.history = history;
  a.horizon = config.embed_dim;
  a.in_channels = in_channels;
  const Forecaster enc = forecaster::make_forecaster(a, nodes, derive_seed(seed, {stream::kPolicyInit}));
  for (const auto& [name, t] : enc.params.tensors()) net.params.add("enc." + name, t);

  Rng rng(derive_seed(seed, {stream::kPolicyInit, 1}));
  const std::size_t d = config.embed_dim;
  const double b1 = 1.0 / std::sqrt(static_cast<double>(d));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(2 * d));
  net.params.add("dec.wq_c", uniform_tensor(rng, 2 * d, d, b2));
  net.params.add("dec.wk", uniform_tensor(rng, d, d, b1));
  net.params.add("dec.wv", uniform_tensor(rng, d, d, b1));
  net.params.add("dec.wq", uniform_tensor(rng, d, d, b1));
  net.params.add("dec.wk_final", uniform_tensor(rng, d, d, b1));
  net.params.add("dec.v", uniform_tensor(rng, 1, d, 1.0));
  return net;
}

// ------------------------------------------------------------------ encoder

Var encode_batch(const PolicyNet& net, const BoundParams& params, Var packed_x, std::size_t batch) {
  return forecaster::forward(net.encoder, params.scoped("enc."), packed_x, net.nodes, batch);
}

Embedding encode(const PolicyNet& net, const Tensor& x) {
  ag::Tape tape;
  BoundParams p(tape, net.params, false);
  Var F = encode_batch(net, p, tape.constant(forecaster::pack_inputs({x})), 1);
  return Embedding{F.value(), ag::mean_rows(F).value()};
}

// ------------------------------------------------------------------ decoder

DecoderState prepare_decoder(const PolicyNet& net, const BoundParams& params, Var F) {
  if (F.rows() != net.nodes || F.cols() != net.config.embed_dim) {
    throw ContractError("prepare_decoder: embeddings must be n x d, got " + shape_string(F.value().shape()));
  }
  return DecoderState{F, ag::mean_rows(F), ag::matmul(F, params("dec.wk")), ag::matmul(F, params("dec.wv")),
                      ag::matmul(F, params("dec.wk_final"))};
}

Var decode_logits(const PolicyNet& net, const BoundParams& params, const DecoderState& s,
                  std::optional<std::size_t> last_selected) {
  const std::size_t d = net.config.embed_dim, M = net.config.heads, dk = d / M;
  Var last = last_selected ? ag::gather_row(s.F, *last_selected) : params("dec.v");
  Var context = ag::concat_cols({s.u_bar, last});
  Var q = ag::matmul(context, params("dec.wq_c"));
  std::vector<Var> heads;
  heads.reserve(M);
  for (std::size_t j = 0; j < M; ++j) {
    Var qj = ag::slice_cols(q, j * dk, dk);
    Var kj = ag::slice_cols(s.keys, j * dk, dk);
    Var vj = ag::slice_cols(s.values, j * dk, dk);
    Var att = ag::softmax_rows(ag::scale(ag::matmul_nt(qj, kj), 1.0 / std::sqrt(static_cast<double>(dk))));
    heads.push_back(ag::matmul(att, vj));
  }
  Var glimpse = ag::concat_cols(heads);
  Var qf = ag::matmul(glimpse, params("dec.wq"));
  Var compat = ag::scale(ag::matmul_nt(qf, s.final_keys), 1.0 / std::sqrt(static_cast<double>(d)));
  return ag::scale(ag::tanh(compat), net.config.clip);
}

Var decode_step(const PolicyNet& net, const BoundParams& params, const DecoderState& state,
                std::optional<std::size_t> last_selected, const std::vector<bool>& mask) {
  if (mask.size() != net.nodes) throw ContractError("decode_step: mask size mismatch");
  if (std::all_of(mask.begin(), mask.end(), [](bool m) { return m; })) {
    throw ContractError("decode_step: every node is masked");
  }
  return ag::log_softmax_masked(decode_logits(net, params, state, last_selected), mask);
}

std::vector<double> step_probabilities(const PolicyNet& net, const Tensor& F, std::optional<std::size_t> last_selected,
                                       const std::vector<bool>& mask) {
  ag::Tape tape;
  BoundParams p(tape, net.params, false);
  const DecoderState state = prepare_decoder(net, p, tape.constant(F));
  const Tensor lp = decode_step(net, p, state, last_selected, mask).value();
  std::vector<double> probs(lp.size());
  for (std::size_t j = 0; j < lp.size(); ++j) probs[j] = mask[j] ? 0.0 : std::exp(lp[j]);
  return probs;
}

namespace {

std::size_t choose(const Tensor& logp, const std::vector<bool>& mask, DecodeMode mode, Rng* rng) {
  const std::size_t n = logp.size();
  std::size_t best = n;
  for (std::size_t j = 0; j < n; ++j) {
    if (mask[j]) continue;
    if (best == n || logp[j] > logp[best]) best = j;
  }
  if (mode == DecodeMode::Greedy) return best;
  const double u = uniform_open(*rng);
  double cumulative = 0.0;
  std::size_t last = best;
  for (std::size_t j = 0; j < n; ++j) {
    if (mask[j]) continue;
    cumulative += std::exp(logp[j]);
    last = j;
    if (u <= cumulative) return j;
  }
  return last;  // rounding left u just above the final cumulative sum
}

}  // namespace

std::vector<NodeSolution> sample_batch(const PolicyNet& net, const Tensor& packed_x, std::size_t batch,
                                       std::size_t eta, DecodeMode mode, std::uint64_t seed) {
  const std::size_t n = net.nodes;
  if (eta > n) throw ContractError("sample_batch: eta=" + std::to_string(eta) + " exceeds n=" + std::to_string(n));
  ag::Tape tape;
  BoundParams p(tape, net.params, false);
  Var all = encode_batch(net, p, tape.constant(packed_x), batch);
  std::vector<NodeSolution> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const DecoderState state = prepare_decoder(net, p, ag::slice_rows(all, b * n, n));
    Rng rng(derive_seed(seed, {b}));
    NodeSolution sol;
    sol.mode = mode;
    std::vector<bool> mask(n, false);
    std::optional<std::size_t> last;
    for (std::size_t k = 0; k < eta; ++k) {
      const Tensor logp = decode_step(net, p, state, last, mask).value();
      const std::size_t pick = choose(logp, mask, mode, &rng);
      sol.omega.push_back(pick);
      sol.step_logprobs.push_back(logp[pick]);
      sol.logprob += logp[pick];
      mask[pick] = true;
      last = pick;
    }
    out.push_back(std::move(sol));
  }
  return out;
}

NodeSolution sample_solution(const PolicyNet& net, const Tensor& x, std::size_t eta, DecodeMode mode,
                             std::uint64_t seed) {
  return sample_batch(net, forecaster::pack_inputs({x}), 1, eta, mode, seed).front();
}

Var solution_logprob(const PolicyNet& net, const BoundParams& params, const DecoderState& state,
                     const std::vector<std::size_t>& omega) {
  if (omega.empty()) throw ContractError("solution_logprob: empty solution");
  std::vector<bool> mask(net.nodes, false);
  std::optional<std::size_t> last;
  std::vector<Var> terms;
  for (std::size_t pick : omega) {
    if (pick >= net.nodes || mask[pick]) throw ContractError("solution_logprob: invalid or repeated node");
    terms.push_back(ag::pick(decode_step(net, params, state, last, mask), pick));
    mask[pick] = true;
    last = pick;
  }
  return ag::sum_scalars(terms);
}

// ---------------------------------------------------------------- rewards

std::vector<double> evaluate_cost_batch(const Forecaster& model, const forecaster::Batch& batch,
                                        const std::vector<std::vector<std::size_t>>& omegas, double epsilon,
                                        const std::vector<std::uint64_t>& seeds) {
  const std::size_t B = batch.size, n = model.nodes, tau = model.arch.history, c = batch.x.cols();
  if (omegas.size() != B || seeds.size() != B) throw ContractError("evaluate_cost_batch: need one omega and seed per sample");
  Tensor x = batch.x;
  for (std::size_t b = 0; b < B; ++b) {
    const perturb::NodeIndicator ind = perturb::make_indicator(omegas[b], n);
    if (ind.selected.empty()) continue;
    const Tensor delta = perturb::sample_uniform_delta({tau, n, c}, epsilon, seeds[b]);
    for (std::size_t t = 0; t < tau; ++t) {
      for (std::size_t i : ind.selected) {
        for (std::size_t k = 0; k < c; ++k) {
          double& v = x[((t * B + b) * n + i) * c + k];
          const double clean = v;
          v = std::clamp(clean + delta.at(t, i, k), perturb::range_lo(clean), perturb::range_hi(clean));
        }
      }
    }
  }
  const Tensor pred = forecaster::predict(model, x, B);
  return perturb::per_sample_loss(pred, perturb::AttackObjective{batch.y, {}, 0.0}, B);
}

double evaluate_cost(const Forecaster& model, const datakit::SampleWindow& sample, const std::vector<std::size_t>& omega,
                     double epsilon, std::uint64_t shared_seed) {
  const forecaster::Batch batch = forecaster::make_batch({sample}, 0, 1);
  return evaluate_cost_batch(model, batch, {omega}, epsilon, {shared_seed}).front();
}

RewardRecord balanced_reward(const Forecaster& model, const datakit::SampleWindow& sample,
                             const std::vector<std::size_t>& omega_policy,
                             const std::vector<std::size_t>& omega_baseline, double epsilon,
                             std::uint64_t shared_seed) {
  RewardRecord r;
  r.shared_delta_seed = shared_seed;
  r.cost_policy = evaluate_cost(model, sample, omega_policy, epsilon, shared_seed);
  r.cost_baseline = evaluate_cost(model, sample, omega_baseline, epsilon, shared_seed);
  r.reward = r.cost_policy - r.cost_baseline;
  return r;
}

std::vector<std::vector<std::size_t>> baseline_selection(perturb::Strategy strategy, const Forecaster& model,
                                                         const forecaster::Batch& batch,
                                                         const perturb::GraphScores& scores, std::size_t eta,
                                                         std::uint64_t seed) {
  if (strategy == perturb::Strategy::Tnds) return perturb::select_tnds_batch(model, batch, eta);
  std::vector<std::vector<std::size_t>> out;
  out.reserve(batch.size);
  for (std::size_t b = 0; b < batch.size; ++b) {
    out.push_back(perturb::select_static(strategy, scores, model.nodes, eta, derive_seed(seed, {b})));
  }
  return out;
}

double reinforce_update(PolicyNet& net, Adam& optimizer, const Tensor& packed_x, std::size_t batch,
                        const std::vector<std::vector<std::size_t>>& omegas, const std::vector<double>& rewards,
                        double offset) {
  if (omegas.size() != batch || rewards.size() != batch) {
    throw ContractError("reinforce_update: need one solution and reward per sample");
  }
  ag::Tape tape;
  BoundParams p(tape, net.params, true);
  Var all = encode_batch(net, p, tape.constant(packed_x), batch);
  std::vector<Var> terms;
  terms.reserve(batch);
  const double inv_b = 1.0 / static_cast<double>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const DecoderState state = prepare_decoder(net, p, ag::slice_rows(all, b * net.nodes, net.nodes));
    // Rewards enter as plain numbers, so no gradient reaches them.
    terms.push_back(ag::scale(solution_logprob(net, p, state, omegas[b]), -(rewards[b] + offset) * inv_b));
  }
  Var surrogate = ag::sum_scalars(terms);
  const double value = surrogate.scalar();
  if (!std::isfinite(value)) throw TrainingError("non-finite policy surrogate", -1);
  tape.backward(surrogate);
  optimizer.step(net.params, p.gradients());
  return value;
}

// --------------------------------------------------------------- training

PolicyTrainResult train_policy(PolicyNet& net, Forecaster& model, const datakit::DatasetSplit& split,
                               const perturb::GraphScores& scores, const PolicyTrainConfig& config,
                               const perturb::PerturbBudget& budget) {
  if (config.epochs < 1 || config.inner_iters < 1) throw ParameterError("train_policy: epochs and inner_iters must be >= 1");
  if (split.train.empty()) throw ParameterError("train_policy: empty training split");
  if (net.nodes != model.nodes) throw ContractError("train_policy: policy and model disagree on node count");
  budget.validate(model.nodes);

  Adam policy_opt(AdamConfig{config.learning_rate, 0.9, 0.999, 1e-8});
  Adam model_opt(config.model_optimizer);
  const std::size_t B = std::min(config.batch_size, split.train.size());
  PolicyTrainResult result;

  auto draw_batch = [&](std::uint64_t s) {
    Rng rng(s);
    return forecaster::make_batch(split.train, sample_without_replacement(rng, split.train.size(), B));
  };

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double reward_sum = 0.0;
    try {
      for (std::size_t it = 0; it < config.inner_iters; ++it) {
        const forecaster::Batch batch = draw_batch(derive_seed(config.seed, {stream::kPolicySample, epoch, it, 0}));
        const auto sols = sample_batch(net, batch.x, B, budget.eta, DecodeMode::Sampled,
                                       derive_seed(config.seed, {stream::kPolicySample, epoch, it, 1}));
        std::vector<std::vector<std::size_t>> omegas;
        for (const auto& s : sols) omegas.push_back(s.omega);
        const auto base = baseline_selection(config.baseline, model, batch, scores, budget.eta,
                                             derive_seed(config.seed, {stream::kBaseline, epoch, it}));
        std::vector<std::uint64_t> seeds(B);
        for (std::size_t b = 0; b < B; ++b) seeds[b] = derive_seed(config.seed, {stream::kRewardDelta, epoch, it, b});
        const auto cost_p = evaluate_cost_batch(model, batch, omegas, budget.epsilon, seeds);
        const auto cost_b = evaluate_cost_batch(model, batch, base, budget.epsilon, seeds);
        std::vector<double> rewards(B);
        double mean_r = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
          rewards[b] = cost_p[b] - cost_b[b];
          mean_r += rewards[b] / static_cast<double>(B);
        }
        const double surrogate = reinforce_update(net, policy_opt, batch.x, B, omegas, rewards, config.reward_offset);
        ++result.policy_steps;
        reward_sum += mean_r;
        result.log.push_back(PolicyLogRow{epoch, it, mean_r, surrogate, 0.0, false});
      }
    } catch (const TrainingError& e) {
      throw TrainingError(std::string("policy update failed: ") + e.what(), static_cast<int>(epoch));
    }
    result.epoch_reward_mean.push_back(reward_sum / static_cast<double>(config.inner_iters));

    if (config.update_model) {
      const forecaster::Batch batch = draw_batch(derive_seed(config.seed, {stream::kShuffle, epoch}));
      const auto sols = sample_batch(net, batch.x, B, budget.eta, DecodeMode::Greedy, 0);
      std::vector<perturb::NodeIndicator> inds;
      for (const auto& s : sols) inds.push_back(perturb::make_indicator(s.omega, model.nodes));
      const perturb::PgdResult adv =
          perturb::pgd_attack_batch(model, batch.x, B, inds, budget, perturb::AttackObjective{batch.y, {}, 0.0},
                                    perturb::InitMode::Random, derive_seed(config.seed, {stream::kPgdInit, epoch}));
      ParamSet grads;
      const double loss = forecaster::loss_and_grads(model, adv.x_adv, B, [&](Var pred) {
        return ag::mse(pred, pred.tape->constant(batch.y));
      }, grads);
      if (!std::isfinite(loss)) throw TrainingError("non-finite forecasting loss in policy training", static_cast<int>(epoch));
      model_opt.step(model.params, grads);
      ++result.model_steps;
      PolicyLogRow row;
      row.epoch = epoch;
      row.iter = config.inner_iters;
      row.model_loss = loss;
      row.model_step = true;
      result.log.push_back(row);
    }
  }
  return result;
}

void write_policy_log(const std::filesystem::path& path, const std::vector<PolicyLogRow>& log) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,iter,step,reward_mean,surrogate_loss,model_loss\n";
  for (const auto& r : log) {
    out << r.epoch << ',' << r.iter << ',' << (r.model_step ? "model" : "policy") << ',' << format_double(r.reward_mean)
        << ',' << format_double(r.surrogate) << ',' << format_double(r.model_loss) << '\n';
  }
}

void save_policy(const std::filesystem::path& dir, const PolicyNet& net, Manifest extra) {
  Manifest m = forecaster::arch_manifest(net.encoder, net.nodes);
  m["kind"] = "policy";
  m["policy.embed_dim"] = std::to_string(net.config.embed_dim);
  m["policy.heads"] = std::to_string(net.config.heads);
  m["policy.clip"] = format_double(net.config.clip);
  for (auto& [k, v] : extra) m[k] = v;
  save_checkpoint(dir, net.params, m);
}

PolicyNet load_policy(const std::filesystem::path& dir) {
  Checkpoint ck = load_checkpoint(dir);
  auto kind = ck.manifest.find("kind");
  if (kind == ck.manifest.end() || kind->second != "policy") throw ParseError(dir.string() + " is not a policy checkpoint");
  std::size_t nodes = 0;
  const forecaster::ArchConfig a = forecaster::arch_from_manifest(ck.manifest, &nodes);
  PolicyConfig c;
  c.blocks = a.blocks;
  c.hidden_channels = a.hidden_channels;
  c.dilations = a.dilations;
  c.head_channels = a.head_channels;
  c.node_embed_dim = a.node_embed_dim;
  try {
    c.embed_dim = std::stoul(ck.manifest.at("policy.embed_dim"));
    c.heads = std::stoul(ck.manifest.at("policy.heads"));
    c.clip = std::stod(ck.manifest.at("policy.clip"));
  } catch (const std::exception&) {
    throw ParseError(dir.string() + ": malformed policy fields in manifest");
  }
  PolicyNet net = make_policy(c, nodes, a.history, a.in_channels, 0);
  for (const auto& [name, t] : net.params.tensors()) {
    if (!ck.params.contains(name) || ck.params.at(name).shape() != t.shape()) {
      throw ParseError(dir.string() + ": array '" + name + "' missing or misshapen");
    }
  }
  net.params = std::move(ck.params);
  return net;
}

}  // namespace rdat::policy
