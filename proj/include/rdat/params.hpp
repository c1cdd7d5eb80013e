#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "rdat/autograd.hpp"
#include "rdat/tensor.hpp"

namespace rdat {

// Named, ordered collection of trainable arrays.
class ParamSet {
 public:
  Tensor& add(const std::string& name, Tensor value);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.contains(name); }

  std::map<std::string, Tensor>& tensors() { return tensors_; }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  std::size_t scalar_count() const;
  bool all_finite() const;
  // Same names and shapes, all zeros.
  ParamSet zeros_like() const;

  bool operator==(const ParamSet&) const = default;

 private:
  std::map<std::string, Tensor> tensors_;
};

// 64-bit FNV-1a over names, shapes and raw values.
std::uint64_t checksum(const ParamSet& params);

// Parameters recorded as tape leaves for one forward/backward pass.
class BoundParams {
 public:
  BoundParams(ag::Tape& tape, const ParamSet& params, bool requires_grad);
  ag::Var operator()(const std::string& name) const;
  // View whose lookups prepend `prefix` to every name.
  BoundParams scoped(const std::string& prefix) const;
  // Gradients collected after tape.backward(); zeros for untouched leaves.
  ParamSet gradients() const;

 private:
  BoundParams() = default;
  ag::Tape* tape_ = nullptr;
  std::map<std::string, ag::Var> vars_;
  std::string prefix_;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}
  void step(ParamSet& params, const ParamSet& grads);
  std::size_t steps() const { return step_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::size_t step_ = 0;
  std::map<std::string, Tensor> first_;
  std::map<std::string, Tensor> second_;
};

// ----------------------------------------------------------------- checkpoints
//
// A checkpoint is a directory holding one NPY (v1.0, little-endian float64)
// file per named array plus `manifest.txt`, a plain-text list of `key = value`
// metadata lines followed by one `array <name> <shape>` line per array.

using Manifest = std::map<std::string, std::string>;

struct Checkpoint {
  ParamSet params;
  Manifest manifest;
};

void write_npy(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_npy(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& dir, const ParamSet& params, const Manifest& manifest);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace rdat
