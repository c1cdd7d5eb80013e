#pragma once

// Reverse-mode differentiation over 2-D row-major tensors.
//
// A Tape records every operation in creation order; `backward` walks it in
// reverse. Nodes that do not depend on any gradient-requiring leaf carry no
// gradient and their closures never run, so the same forward code serves
// inference, input-gradient attacks, and parameter training.

#include <cstddef>
#include <functional>
#include <vector>

#include "rdat/tensor.hpp"

namespace rdat::ag {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double scalar() const;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);
  Var push(Tensor value, bool requires_grad, Backward backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Gradient buffer for a node, zero-allocated on first access.
  Tensor& grad(std::size_t id);
  // Zero tensor when the node received no gradient.
  Tensor grad_or_zero(std::size_t id) const;

  // Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every leaf.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// Elementwise.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);
// a + bias, where bias is 1 x cols(a) and broadcasts over rows.
Var add_row(Var a, Var bias);

// Products.
Var matmul(Var a, Var b);     // (R x K)(K x N)
Var matmul_nt(Var a, Var b);  // (R x K)(N x K)^T

// Structure.
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_cols(const std::vector<Var>& parts);
Var gather_row(Var a, std::size_t row);
Var mean_rows(Var a);  // 1 x cols

// Y[g] = A * X[g] for every consecutive block of n rows of X.
Var node_mix(Var adjacency, Var x, std::size_t n);

// Causal dilated convolution along the block-time axis. X holds
// `rows/group_rows` time steps of `group_rows` rows each; the weight stacks
// `taps` (Cin x Cout) matrices, the last tap aligned with the current step.
// Steps before the start of the sequence read as zero.
Var causal_conv(Var x, Var weight, Var bias, std::size_t group_rows, std::size_t dilation,
                std::size_t taps);

// Row-wise softmax.
Var softmax_rows(Var a);
// Log-softmax of a 1 x n row where mask[j] == true removes entry j. Removed
// entries come out as -inf and receive no gradient.
Var log_softmax_masked(Var logits, const std::vector<bool>& masked);

// Reductions to 1 x 1.
Var sum(Var a);
Var mean(Var a);
Var mse(Var a, Var b);
Var pick(Var a, std::size_t index);
Var sum_scalars(const std::vector<Var>& terms);

}  // namespace rdat::ag
