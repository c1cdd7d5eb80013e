#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "rdat/tensor.hpp"

namespace rdat::datakit {

// Weighted adjacency over n sensor nodes. Weights are non-negative and the
// diagonal is zero.
struct TrafficGraph {
  std::size_t n = 0;
  Tensor adjacency;  // n x n
  std::vector<std::string> node_ids;

  double weight(std::size_t i, std::size_t j) const { return adjacency.at(i, j); }
};

// timesteps x nodes x channels. Channel 0 is the forecast target; any extra
// channels are carried through untouched.
struct TrafficSeries {
  Tensor values;
  int interval_minutes = 5;
  std::vector<std::string> channel_names{"traffic"};

  std::size_t timesteps() const { return values.rank() ? values.dim(0) : 0; }
  std::size_t nodes() const { return values.rank() > 1 ? values.dim(1) : 0; }
  std::size_t channels() const { return values.rank() > 2 ? values.dim(2) : 0; }
};

struct Dataset {
  TrafficGraph graph;
  TrafficSeries series;
  std::size_t imputed_cells = 0;
};

void validate_graph(const TrafficGraph& graph);
bool is_connected(const TrafficGraph& graph);

// Random geometric graph plus a daily-periodic series with graph-diffused
// AR(1) noise. Deterministic in `seed`.
Dataset synth_traffic(std::size_t n, std::size_t timesteps, std::uint64_t seed);

// Series CSV: header of node ids, one row per timestep. Adjacency CSV: either
// a dense n x n grid (optionally preceded by a header row of node ids) or an
// edge list `src,dst,weight` (optionally with that header). Blank or `nan`
// cells are forward-filled, then filled with the column mean.
Dataset load_csv(const std::filesystem::path& series_path, const std::filesystem::path& adjacency_path);
// Writes the series (channel 0) and a dense adjacency grid with a header row.
void write_csv(const Dataset& data, const std::filesystem::path& series_path,
               const std::filesystem::path& adjacency_path);

// ------------------------------------------------------------------- windows

// A (history, target) pair cut from one series: x covers
// [t_origin, t_origin + history) with every channel, y covers the following
// `horizon` steps of channel 0.
struct SampleWindow {
  std::shared_ptr<const TrafficSeries> series;
  std::size_t t_origin = 0;
  std::size_t history = 0;
  std::size_t horizon = 0;

  Tensor x() const;  // history x n x c
  Tensor y() const;  // horizon x n x 1
  std::size_t end() const { return t_origin + history + horizon; }
};

struct DatasetSplit {
  std::vector<SampleWindow> train;
  std::vector<SampleWindow> val;
  std::vector<SampleWindow> test;
  std::array<double, 3> ratios{0.70, 0.10, 0.20};
};

std::vector<SampleWindow> make_windows(std::shared_ptr<const TrafficSeries> series, std::size_t history,
                                       std::size_t horizon);
// Time-ordered split; val and test sizes are floor(ratio * count) and the
// remainder goes to train.
DatasetSplit split_windows(const std::vector<SampleWindow>& windows, std::array<double, 3> ratios = {0.70, 0.10, 0.20});
// Same split structure, windows re-pointed at another series of equal length.
DatasetSplit rebind(const DatasetSplit& split, std::shared_ptr<const TrafficSeries> series);

// -------------------------------------------------------------------- scaler

// Per-channel min-max map onto [0, 1], fitted on the training time range.
struct Scaler {
  std::vector<double> min;
  std::vector<double> max;
  std::string fitted_on = "train";

  double apply(std::size_t channel, double v) const { return (v - min[channel]) / (max[channel] - min[channel]); }
  double invert(std::size_t channel, double v) const { return min[channel] + v * (max[channel] - min[channel]); }
  TrafficSeries apply(const TrafficSeries& series) const;
  TrafficSeries invert(const TrafficSeries& series) const;
};

Scaler fit_scaler(const TrafficSeries& series, const DatasetSplit& split);

// Everything the training and evaluation code needs from one dataset.
struct PreparedData {
  TrafficGraph graph;
  Scaler scaler;
  std::shared_ptr<const TrafficSeries> normalized;
  DatasetSplit split;
};

PreparedData prepare(const Dataset& data, std::size_t history, std::size_t horizon,
                     std::array<double, 3> ratios = {0.70, 0.10, 0.20});

// ------------------------------------------------------------- graph scores

std::vector<double> degree_scores(const TrafficGraph& g);
std::vector<double> pagerank_scores(const TrafficGraph& g, double damping = 0.85, std::size_t max_iters = 10000,
                                    double tolerance = 1e-10);
std::vector<double> betweenness_scores(const TrafficGraph& g);

}  // namespace rdat::datakit
