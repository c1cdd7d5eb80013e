#pragma once

// Defense training: PGD examples on policy- or randomly-chosen nodes, with
// the previous epoch's model acting as a distillation teacher.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "rdat/autograd.hpp"
#include "rdat/datakit.hpp"
#include "rdat/forecaster.hpp"
#include "rdat/params.hpp"
#include "rdat/perturb.hpp"
#include "rdat/policy.hpp"

namespace rdat::advtrain {

enum class Selection { Policy, Random };
enum class SelectionScope { Batch, Epoch };
enum class PgdLoss { AtLoss, Mse };

struct ATConfig {
  double alpha = 0.4;
  double train_node_ratio = 0.10;
  std::size_t epochs = 30;
  Selection selection = Selection::Policy;
  SelectionScope scope = SelectionScope::Batch;
  PgdLoss pgd_loss = PgdLoss::AtLoss;
  perturb::InitMode init = perturb::InitMode::Random;
  double epsilon = 0.5;
  std::size_t steps = 5;
  double gamma = 0.1;
  std::size_t batch_size = 16;
  std::size_t max_batches = 0;  // per epoch; 0 means all
  AdamConfig adam;
  // Per-epoch validation: clean MAE and MAE under PGD-Random at this ratio.
  bool validate = true;
  double val_attack_ratio = 0.20;
  std::size_t val_windows = 0;  // 0 means the whole validation split
};

void validate_config(const ATConfig& config);

struct TeacherSnapshot {
  ParamSet params;
  std::size_t source_epoch = 0;
  std::uint64_t checksum = 0;
};

// Deep copy of the model parameters after epoch `epoch` (1-based).
TeacherSnapshot snapshot_teacher(const forecaster::Forecaster& model, std::size_t epoch);

// MSE between the student's prediction on adversarial input and the
// teacher's prediction on clean input.
double kd_loss(const Tensor& student_pred_on_adv, const Tensor& teacher_pred_on_clean);
ag::Var kd_loss(ag::Var student_pred_on_adv, const Tensor& teacher_pred_on_clean);

// MSE(pred, y) + alpha * kd, or plain MSE on the first epoch.
double at_loss(double mse, double kd_term, double alpha, bool is_first_epoch);
ag::Var at_loss(ag::Var pred_adv, const Tensor& y, ag::Var kd_term, double alpha, bool is_first_epoch);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double adv_loss = 0.0;  // mean training objective
  double kd_loss = 0.0;   // mean KD term entering the objective, 0 when unused
  double clean_val_mae = 0.0;
  double adv_val_mae = 0.0;
  std::vector<std::size_t> selected;  // first batch's first sample
  std::size_t teacher_epoch = 0;      // 0 when no teacher was used
  std::uint64_t teacher_checksum = 0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

struct ATResult {
  forecaster::Forecaster model;
  TrainLog log;
};

// Trains `model` in place of its current parameters. A policy is required
// when config.selection is Policy. Validation metrics use `scaler` units.
ATResult adversarial_train(const forecaster::Forecaster& model, const policy::PolicyNet* policy,
                           const datakit::DatasetSplit& split, const ATConfig& config,
                           const datakit::TrafficGraph& graph, const datakit::Scaler& scaler, std::uint64_t seed);

// Classic adversarial training: random nodes, MSE objective, no teacher.
// Draws the same random streams as adversarial_train with random selection.
ATResult plain_adversarial_train(const forecaster::Forecaster& model, const datakit::DatasetSplit& split,
                                 const ATConfig& config, const datakit::TrafficGraph& graph,
                                 const datakit::Scaler& scaler, std::uint64_t seed);

// Per-sample node picks for one training batch (exposed for tests).
std::vector<std::vector<std::size_t>> select_training_nodes(const ATConfig& config, const policy::PolicyNet* policy,
                                                            const forecaster::Batch& batch, std::size_t nodes,
                                                            std::size_t eta, std::uint64_t seed, std::size_t epoch,
                                                            std::size_t batch_index,
                                                            const std::vector<std::size_t>* epoch_omega);

void write_train_log(const std::filesystem::path& path, const TrainLog& log);

}  // namespace rdat::advtrain
