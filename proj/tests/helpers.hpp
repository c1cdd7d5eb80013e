#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "rdat/forecaster.hpp"
#include "rdat/tensor.hpp"

namespace testutil {

inline rdat::Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double lo = -1.0,
                                  double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  rdat::Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

// Small model for gradient and shape checks: tau = T = 4.
inline rdat::forecaster::ArchConfig tiny_arch() {
  rdat::forecaster::ArchConfig a;
  a.blocks = 2;
  a.hidden_channels = 4;
  a.diffusion_depth = 2;
  a.temporal_kernel = 2;
  a.dilations = {1, 2};
  a.node_embed_dim = 3;
  a.head_channels = 6;
  a.history = 4;
  a.horizon = 4;
  return a;
}

inline rdat::forecaster::ArchConfig small_arch() {
  rdat::forecaster::ArchConfig a;
  a.blocks = 2;
  a.hidden_channels = 8;
  a.dilations = {1, 2};
  a.head_channels = 16;
  return a;
}

// Central difference of f at x[i].
inline double central_difference(const std::function<double()>& f, double& x, double h) {
  const double keep = x;
  x = keep + h;
  const double up = f();
  x = keep - h;
  const double down = f();
  x = keep;
  return (up - down) / (2.0 * h);
}

// |a - b| <= rel * max(|a|, |b|, floor)
inline bool close_rel(double a, double b, double rel, double floor = 1e-6) {
  return std::abs(a - b) <= rel * std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace testutil
