#pragma once

#include <stdexcept>
#include <string>

namespace rdat {

// Bad sizes or counts handed to a generator, windowing, or selection routine.
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Caller broke a documented precondition (shape mismatch, duplicate index, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Input files whose structure does not match what the loader expects.
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateChannelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite loss during optimization. Carries the epoch that diverged.
struct TrainingError : std::runtime_error {
  TrainingError(const std::string& what, int epoch_index)
      : std::runtime_error(what + " (epoch " + std::to_string(epoch_index) + ")"),
        epoch(epoch_index) {}
  int epoch;
};

// Non-finite gradient inside an attack. Carries the PGD iteration.
struct AttackError : std::runtime_error {
  AttackError(const std::string& what, int iteration_index)
      : std::runtime_error(what + " (iteration " + std::to_string(iteration_index) + ")"),
        iteration(iteration_index) {}
  int iteration;
};

}  // namespace rdat
