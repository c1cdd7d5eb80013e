#pragma once

// Graph-temporal forecaster: stacked gated dilated causal convolutions along
// time, diffusion over a learned adjacency along nodes, residual links, and a
// two-layer head that emits every horizon step at once.
//
// Batched tensors use one row per (time, sample, node) in that nesting order:
// row (t * B + b) * n + i holds the channels of node i in sample b at step t.
// Predictions come back as (B * n) x T with row b * n + i.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "rdat/autograd.hpp"
#include "rdat/datakit.hpp"
#include "rdat/params.hpp"
#include "rdat/tensor.hpp"

namespace rdat::forecaster {

struct ArchConfig {
  std::size_t blocks = 4;
  std::size_t hidden_channels = 32;
  std::size_t diffusion_depth = 2;  // L
  std::size_t temporal_kernel = 2;
  std::vector<std::size_t> dilations{1, 2, 1, 2};
  std::size_t node_embed_dim = 10;
  std::size_t head_channels = 64;
  std::size_t history = 12;  // tau
  std::size_t horizon = 12;  // T
  std::size_t in_channels = 1;

  // 1 + sum over blocks of (kernel - 1) * dilation.
  std::size_t receptive_field() const;
};

void validate(const ArchConfig& arch);

struct Forecaster {
  ArchConfig arch;
  std::size_t nodes = 0;
  ParamSet params;
};

Forecaster make_forecaster(const ArchConfig& arch, std::size_t nodes, std::uint64_t seed);

// ------------------------------------------------------------------- layers

// row-softmax(relu(E1 * E2^T)).
ag::Var adaptive_adjacency(ag::Var source, ag::Var target);
Tensor adaptive_adjacency(const Forecaster& model);

// tanh(conv(E; filter)) * sigmoid(conv(E; gate)), causal with zero left padding.
ag::Var temporal_layer(ag::Var e, ag::Var filter_w, ag::Var filter_b, ag::Var gate_w, ag::Var gate_b,
                       std::size_t group_rows, std::size_t dilation, std::size_t taps);

// sum_{i=0..L} A^i Z' W^i, with L = weights.size() - 1.
ag::Var spatial_layer(ag::Var z, ag::Var adjacency, const std::vector<ag::Var>& weights, std::size_t nodes);

// ------------------------------------------------------------------ batching

Tensor pack_inputs(const std::vector<Tensor>& xs);   // each tau x n x c
Tensor pack_targets(const std::vector<Tensor>& ys);  // each T x n x 1
// One sample's T x n x 1 prediction out of a (B * n) x T output.
Tensor unpack_prediction(const Tensor& out, std::size_t sample, std::size_t nodes);

struct Batch {
  Tensor x;  // (tau * B * n) x c
  Tensor y;  // (B * n) x T
  std::size_t size = 0;
};

Batch make_batch(const std::vector<datakit::SampleWindow>& windows, const std::vector<std::size_t>& indices);
Batch make_batch(const std::vector<datakit::SampleWindow>& windows, std::size_t begin, std::size_t count);

// ------------------------------------------------------------------- forward

// With `full_sequence` every block runs over all tau steps; otherwise each
// block only computes the suffix of steps that reaches the last-step outputs.
// Both give the same prediction.
ag::Var forward(const ArchConfig& arch, const BoundParams& params, ag::Var x, std::size_t nodes, std::size_t batch,
                bool full_sequence = false);

Tensor predict(const Forecaster& model, const Tensor& packed_x, std::size_t batch);
// Single window: tau x n x c in, T x n x 1 out.
Tensor predict(const Forecaster& model, const Tensor& x);

// Loss over a (B * n) x T prediction.
using OutputLoss = std::function<ag::Var(ag::Var prediction)>;

// d loss / d packed_x. Parameters are held constant.
Tensor grad_input(const Forecaster& model, const Tensor& packed_x, std::size_t batch, const OutputLoss& loss,
                  double* loss_value = nullptr);
// Single window with MSE against y (T x n x 1).
Tensor grad_input(const Forecaster& model, const Tensor& x, const Tensor& y);

// Loss value and parameter gradients at fixed inputs.
double loss_and_grads(const Forecaster& model, const Tensor& packed_x, std::size_t batch, const OutputLoss& loss,
                      ParamSet& grads);

// ------------------------------------------------------------------- metrics

double mse_loss(const Tensor& y_hat, const Tensor& y);
double mae_metric(const Tensor& y_hat, const Tensor& y);
double rmse_metric(const Tensor& y_hat, const Tensor& y);

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
};

// Maps a packed input to the input the model actually sees (for attacks).
using InputTransform = std::function<Tensor(const Batch& batch, std::size_t batch_index)>;

// Metrics in original units over the given windows. With `transform` each
// batch input is replaced before prediction.
Metrics evaluate(const Forecaster& model, const std::vector<datakit::SampleWindow>& windows,
                 const datakit::Scaler& scaler, std::size_t batch_size = 64, const InputTransform& transform = {});

// -------------------------------------------------------------------- training

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  std::size_t patience = 5;
  std::size_t max_batches = 0;  // per epoch; 0 means all
  AdamConfig adam;
  std::uint64_t seed = 0;
};

struct TrainHistory {
  std::vector<double> train_loss;  // mean batch MSE per epoch
  std::vector<double> val_mae;     // normalized units
  std::size_t best_epoch = 0;
};

// Adam on MSE with early stopping on validation MAE; restores the best epoch.
TrainHistory train_clean(Forecaster& model, const datakit::DatasetSplit& split, const TrainConfig& config);

// Normalized-unit MAE over windows (used for early stopping).
double normalized_mae(const Forecaster& model, const std::vector<datakit::SampleWindow>& windows,
                      std::size_t batch_size = 64);

// Epoch order for a training set, deterministic in (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch);

// ----------------------------------------------------------------- checkpoints

Manifest arch_manifest(const ArchConfig& arch, std::size_t nodes);
ArchConfig arch_from_manifest(const Manifest& manifest, std::size_t* nodes = nullptr);
void save_forecaster(const std::filesystem::path& dir, const Forecaster& model, Manifest extra = {});
Forecaster load_forecaster(const std::filesystem::path& dir);

}  // namespace rdat::forecaster
