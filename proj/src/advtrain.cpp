#include "rdat/advtrain.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>

#include "rdat/errors.hpp"
#include "rdat/log.hpp"
#include "rdat/rng.hpp"

namespace rdat::advtrain {

using ag::Var;
using forecaster::Forecaster;

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

perturb::PerturbBudget train_budget(const ATConfig& c, std::size_t n) {
  perturb::PerturbBudget b{c.epsilon, perturb::nodes_for_ratio(c.train_node_ratio, n), c.steps, c.gamma};
  b.validate(n);
  return b;
}

std::vector<datakit::SampleWindow> validation_subset(const datakit::DatasetSplit& split, const ATConfig& c) {
  if (c.val_windows == 0 || c.val_windows >= split.val.size()) return split.val;
  return {split.val.begin(), split.val.begin() + static_cast<std::ptrdiff_t>(c.val_windows)};
}

// Clean and PGD-Random validation MAE. Attack seeds do not depend on the
// epoch, so successive epochs face the same draws.
void validate_epoch(const Forecaster& model, const std::vector<datakit::SampleWindow>& val, const ATConfig& c,
                    const datakit::Scaler& scaler, std::uint64_t seed, EpochRecord& rec) {
  if (!c.validate || val.empty()) return;
  rec.clean_val_mae = forecaster::evaluate(model, val, scaler).mae;
  perturb::PerturbBudget budget{c.epsilon, perturb::nodes_for_ratio(c.val_attack_ratio, model.nodes), c.steps, c.gamma};
  budget.validate(model.nodes);
  rec.adv_val_mae =
      forecaster::evaluate(model, val, scaler, 64, [&](const forecaster::Batch& batch, std::size_t bi) {
        std::vector<perturb::NodeIndicator> inds;
        for (std::size_t b = 0; b < batch.size; ++b) {
          Rng rng(derive_seed(seed, {stream::kEvaluation, bi, b}));
          inds.push_back(perturb::make_indicator(sample_without_replacement(rng, model.nodes, budget.eta), model.nodes));
        }
        return perturb::pgd_attack_batch(model, batch.x, batch.size, inds, budget,
                                         perturb::AttackObjective{batch.y, {}, 0.0}, perturb::InitMode::Random,
                                         derive_seed(seed, {stream::kEvaluation, bi, 1u << 20}))
            .x_adv;
      }).mae;
}

std::vector<perturb::NodeIndicator> indicators(const std::vector<std::vector<std::size_t>>& omegas, std::size_t n) {
  std::vector<perturb::NodeIndicator> out;
  out.reserve(omegas.size());
  for (const auto& o : omegas) out.push_back(perturb::make_indicator(o, n));
  return out;
}

std::vector<std::size_t> epoch_selection(const ATConfig& c, const policy::PolicyNet* policy,
                                         const datakit::DatasetSplit& split, const std::vector<std::size_t>& order,
                                         std::size_t n, std::size_t eta, std::uint64_t seed, std::size_t epoch) {
  if (c.selection == Selection::Policy) {
    return policy::sample_solution(*policy, split.train[order.front()].x(), eta, policy::DecodeMode::Greedy, 0).omega;
  }
  Rng rng(derive_seed(seed, {stream::kSelection, epoch}));
  return sample_without_replacement(rng, n, eta);
}

void check_inputs(const Forecaster& model, const datakit::DatasetSplit& split, const datakit::TrafficGraph& graph) {
  if (split.train.empty()) throw ParameterError("adversarial training: empty training split");
  if (graph.n != model.nodes) throw ContractError("adversarial training: graph and model disagree on node count");
}

}  // namespace

void validate_config(const ATConfig& c) {
  if (!(c.alpha >= 0.0) || !std::isfinite(c.alpha)) throw ParameterError("alpha must be >= 0");
  if (!(c.train_node_ratio > 0.0 && c.train_node_ratio <= 1.0)) throw ParameterError("train_node_ratio must be in (0, 1]");
  if (!(c.val_attack_ratio > 0.0 && c.val_attack_ratio <= 1.0)) throw ParameterError("val_attack_ratio must be in (0, 1]");
  if (c.batch_size == 0) throw ParameterError("batch_size must be >= 1");
}

TeacherSnapshot snapshot_teacher(const Forecaster& model, std::size_t epoch) {
  return TeacherSnapshot{model.params, epoch, checksum(model.params)};
}

double kd_loss(const Tensor& student, const Tensor& teacher) {
  if (student.shape() != teacher.shape()) throw ContractError("kd_loss: shape mismatch");
  return forecaster::mse_loss(student, teacher);
}

Var kd_loss(Var student, const Tensor& teacher) {
  if (student.value().shape() != teacher.shape()) throw ContractError("kd_loss: shape mismatch");
  return ag::mse(student, student.tape->constant(teacher));
}

double at_loss(double mse, double kd_term, double alpha, bool is_first_epoch) {
  return is_first_epoch ? mse : mse + alpha * kd_term;
}

Var at_loss(Var pred_adv, const Tensor& y, Var kd_term, double alpha, bool is_first_epoch) {
  Var m = ag::mse(pred_adv, pred_adv.tape->constant(y));
  if (is_first_epoch) return m;
  return ag::add(m, ag::scale(kd_term, alpha));
}

std::vector<std::vector<std::size_t>> select_training_nodes(const ATConfig& c, const policy::PolicyNet* policy,
                                                            const forecaster::Batch& batch, std::size_t n,
                                                            std::size_t eta, std::uint64_t seed, std::size_t epoch,
                                                            std::size_t batch_index,
                                                            const std::vector<std::size_t>* epoch_omega) {
  if (c.scope == SelectionScope::Epoch) {
    if (epoch_omega == nullptr) throw ContractError("epoch-scoped selection needs the epoch's node set");
    return std::vector<std::vector<std::size_t>>(batch.size, *epoch_omega);
  }
  std::vector<std::vector<std::size_t>> out;
  if (c.selection == Selection::Policy) {
    if (policy == nullptr) throw ConfigError("policy selection requested without a policy");
    for (auto& s : policy::sample_batch(*policy, batch.x, batch.size, eta, policy::DecodeMode::Greedy, 0)) {
      out.push_back(std::move(s.omega));
    }
    return out;
  }
  for (std::size_t b = 0; b < batch.size; ++b) {
    Rng rng(derive_seed(seed, {stream::kSelection, epoch, batch_index, b}));
    out.push_back(sample_without_replacement(rng, n, eta));
  }
  return out;
}

ATResult adversarial_train(const Forecaster& initial, const policy::PolicyNet* policy,
                           const datakit::DatasetSplit& split, const ATConfig& c, const datakit::TrafficGraph& graph,
                           const datakit::Scaler& scaler, std::uint64_t seed) {
  validate_config(c);
  check_inputs(initial, split, graph);
  if (c.selection == Selection::Policy) {
    if (policy == nullptr) throw ConfigError("strategy 'policy' requires a trained policy");
    if (policy->nodes != initial.nodes) throw ContractError("policy and model disagree on node count");
  }
  const std::size_t n = initial.nodes;
  const perturb::PerturbBudget budget = train_budget(c, n);
  const auto val = validation_subset(split, c);

  ATResult result{initial, {}};
  Forecaster& model = result.model;
  Adam opt(c.adam);
  std::optional<TeacherSnapshot> teacher;
  std::optional<Forecaster> teacher_model;

  for (std::size_t e = 0; e < c.epochs; ++e) {
    const bool first = e == 0;
    const bool use_kd = !first && c.alpha > 0.0;
    EpochRecord rec;
    rec.epoch = e + 1;
    if (use_kd) {
      rec.teacher_epoch = teacher->source_epoch;
      rec.teacher_checksum = teacher->checksum;
    }
    const auto order = forecaster::epoch_order(split.train.size(), seed, e);
    std::size_t batches = (order.size() + c.batch_size - 1) / c.batch_size;
    if (c.max_batches > 0) batches = std::min(batches, c.max_batches);
    std::vector<std::size_t> epoch_omega;
    if (c.scope == SelectionScope::Epoch) epoch_omega = epoch_selection(c, policy, split, order, n, budget.eta, seed, e);

    double loss_sum = 0.0, kd_sum = 0.0;
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const std::size_t begin = bi * c.batch_size;
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), begin + c.batch_size)));
      const forecaster::Batch batch = forecaster::make_batch(split.train, idx);
      const auto omegas = select_training_nodes(c, policy, batch, n, budget.eta, seed, e, bi, &epoch_omega);
      if (bi == 0) rec.selected = omegas.front();

      Tensor teacher_pred;
      if (use_kd) teacher_pred = forecaster::predict(*teacher_model, batch.x, batch.size);
      const bool kd_in_pgd = use_kd && c.pgd_loss == PgdLoss::AtLoss;
      perturb::PgdResult adv;
      try {
        adv = perturb::pgd_attack_batch(
            model, batch.x, batch.size, indicators(omegas, n), budget,
            perturb::AttackObjective{batch.y, kd_in_pgd ? teacher_pred : Tensor{}, kd_in_pgd ? c.alpha : 0.0}, c.init,
            derive_seed(seed, {stream::kPgdInit, e, bi}));
      } catch (const AttackError& err) {
        throw TrainingError(std::string("attack failed during training: ") + err.what(), static_cast<int>(e + 1));
      }

      double kd_value = 0.0;
      ParamSet grads;
      const double loss = forecaster::loss_and_grads(model, adv.x_adv, batch.size, [&](Var pred) {
        Var kd = use_kd ? kd_loss(pred, teacher_pred) : pred.tape->constant(Tensor({1, 1}));
        if (use_kd) kd_value = kd.value()[0];
        return at_loss(pred, batch.y, kd, c.alpha, first || !use_kd);
      }, grads);
      if (!std::isfinite(loss) || !grads.all_finite()) {
        throw TrainingError("non-finite adversarial training loss", static_cast<int>(e + 1));
      }
      opt.step(model.params, grads);
      loss_sum += loss;
      kd_sum += kd_value;
    }
    rec.adv_loss = loss_sum / static_cast<double>(batches);
    rec.kd_loss = kd_sum / static_cast<double>(batches);
    validate_epoch(model, val, c, scaler, seed, rec);
    log::info("at epoch " + std::to_string(rec.epoch) + " loss " + format_double(rec.adv_loss) + " val_mae " +
              format_double(rec.clean_val_mae) + " adv_val_mae " + format_double(rec.adv_val_mae));
    result.log.epochs.push_back(std::move(rec));

    teacher = snapshot_teacher(model, e + 1);
    teacher_model = Forecaster{model.arch, model.nodes, teacher->params};
  }
  return result;
}

ATResult plain_adversarial_train(const Forecaster& initial, const datakit::DatasetSplit& split, const ATConfig& c,
                                 const datakit::TrafficGraph& graph, const datakit::Scaler& scaler, std::uint64_t seed) {
  validate_config(c);
  check_inputs(initial, split, graph);
  const std::size_t n = initial.nodes;
  const perturb::PerturbBudget budget = train_budget(c, n);
  const auto val = validation_subset(split, c);

  ATResult result{initial, {}};
  Forecaster& model = result.model;
  Adam opt(c.adam);
  for (std::size_t e = 0; e < c.epochs; ++e) {
    EpochRecord rec;
    rec.epoch = e + 1;
    const auto order = forecaster::epoch_order(split.train.size(), seed, e);
    std::size_t batches = (order.size() + c.batch_size - 1) / c.batch_size;
    if (c.max_batches > 0) batches = std::min(batches, c.max_batches);
    std::vector<std::size_t> shared;
    if (c.scope == SelectionScope::Epoch) {
      Rng rng(derive_seed(seed, {stream::kSelection, e}));
      shared = sample_without_replacement(rng, n, budget.eta);
    }

    double loss_sum = 0.0;
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const std::size_t begin = bi * c.batch_size;
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), begin + c.batch_size)));
      const forecaster::Batch batch = forecaster::make_batch(split.train, idx);
      std::vector<perturb::NodeIndicator> inds;
      for (std::size_t b = 0; b < batch.size; ++b) {
        if (c.scope == SelectionScope::Epoch) {
          inds.push_back(perturb::make_indicator(shared, n));
        } else {
          Rng rng(derive_seed(seed, {stream::kSelection, e, bi, b}));
          inds.push_back(perturb::make_indicator(sample_without_replacement(rng, n, budget.eta), n));
        }
      }
      if (bi == 0) rec.selected = inds.front().selected;
      perturb::PgdResult adv;
      try {
        adv = perturb::pgd_attack_batch(model, batch.x, batch.size, inds, budget,
                                        perturb::AttackObjective{batch.y, {}, 0.0}, c.init,
                                        derive_seed(seed, {stream::kPgdInit, e, bi}));
      } catch (const AttackError& err) {
        throw TrainingError(std::string("attack failed during training: ") + err.what(), static_cast<int>(e + 1));
      }
      ParamSet grads;
      const double loss = forecaster::loss_and_grads(model, adv.x_adv, batch.size, [&](Var pred) {
        return ag::mse(pred, pred.tape->constant(batch.y));
      }, grads);
      if (!std::isfinite(loss) || !grads.all_finite()) {
        throw TrainingError("non-finite adversarial training loss", static_cast<int>(e + 1));
      }
      opt.step(model.params, grads);
      loss_sum += loss;
    }
    rec.adv_loss = loss_sum / static_cast<double>(batches);
    validate_epoch(model, val, c, scaler, seed, rec);
    log::info("plain at epoch " + std::to_string(rec.epoch) + " loss " + format_double(rec.adv_loss));
    result.log.epochs.push_back(std::move(rec));
  }
  return result;
}

void write_train_log(const std::filesystem::path& path, const TrainLog& log) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,adv_loss,kd_loss,clean_val_mae,adv_val_mae,teacher_epoch,teacher_checksum,selected\n";
  for (const auto& r : log.epochs) {
    out << r.epoch << ',' << format_double(r.adv_loss) << ',' << format_double(r.kd_loss) << ','
        << format_double(r.clean_val_mae) << ',' << format_double(r.adv_val_mae) << ',' << r.teacher_epoch << ','
        << r.teacher_checksum << ',';
    for (std::size_t i = 0; i < r.selected.size(); ++i) out << (i ? " " : "") << r.selected[i];
    out << '\n';
  }
}

}  // namespace rdat::advtrain
