#include "rdat/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rdat/errors.hpp"
#include "rdat/kernels.hpp"

namespace rdat::ag {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ContractError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                        shape_string(b.shape()));
  }
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw ContractError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
}

Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor t({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
  return t;
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename F>
Var unary(Var a, F&& f, Tape::Backward bw) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return t.push(std::move(y), t.requires_grad(a.id), std::move(bw));
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw ContractError("operands recorded on different tapes");
  return *a.tape;
}

}  // namespace

const Tensor& Var::value() const { return tape->value(id); }
const Tensor& Var::grad() const { return tape->grad(id); }
double Var::scalar() const {
  const Tensor& v = value();
  if (v.size() != 1) throw ContractError("scalar(): tensor has shape " + shape_string(v.shape()));
  return v[0];
}

Var Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Var Tape::leaf(Tensor value, bool requires_grad) { return push(std::move(value), requires_grad, nullptr); }

Var Tape::push(Tensor value, bool requires_grad, Backward backward) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, requires_grad ? std::move(backward) : nullptr});
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.size() != node.value.size() || node.grad.shape() != node.value.shape()) {
    node.grad = Tensor(node.value.shape());
  }
  return node.grad;
}

Tensor Tape::grad_or_zero(std::size_t id) const {
  const Node& node = nodes_[id];
  if (node.grad.shape() == node.value.shape()) return node.grad;
  return Tensor(node.value.shape());
}

void Tape::backward(Var root) {
  if (root.tape != this) throw ContractError("backward: root belongs to another tape");
  if (value(root.id).size() != 1) throw ContractError("backward: root must be a scalar");
  if (!nodes_[root.id].requires_grad) return;
  grad(root.id)[0] = 1.0;
  for (std::size_t k = root.id + 1; k-- > 0;) {
    Node& node = nodes_[k];
    if (!node.requires_grad || !node.backward) continue;
    if (node.grad.shape() != node.value.shape()) continue;  // unreachable from root
    node.backward(*this, k);
  }
}

// ---------------------------------------------------------------- elementwise

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(std::move(y), rg, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (Var p : {a, b}) {
      if (!t.requires_grad(p.id)) continue;
      Tensor& gp = t.grad(p.id);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(std::move(y), rg, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a.id)) {
      Tensor& ga = t.grad(a.id);
      const Tensor& bv = t.value(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b.id)) {
      Tensor& gb = t.grad(b.id);
      const Tensor& av = t.value(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [a, s](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); }, [a](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var sigmoid(Var a) {
  return unary(a, sigmoid_scalar, [a](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [a](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(a.id);
    Tensor& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += g[i];
  });
}

Var add_row(Var a, Var bias) {
  Tape& t = tape_of(a, bias);
  const Tensor& x = a.value();
  const Tensor& b = bias.value();
  const std::size_t R = x.rows(), C = x.cols();
  if (b.size() != C) {
    throw ContractError("add_row: bias of size " + std::to_string(b.size()) + " for " + std::to_string(C) + " columns");
  }
  Tensor y = x;
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) y[r * C + c] += b[c];
  const bool rg = t.requires_grad(a.id) || t.requires_grad(bias.id);
  return t.push(std::move(y), rg, [a, bias, R, C](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a.id)) {
      Tensor& ga = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(bias.id)) {
      Tensor& gb = t.grad(bias.id);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) gb[c] += g[r * C + c];
    }
  });
}

// ------------------------------------------------------------------ products

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_matrix(A, "matmul");
  require_matrix(B, "matmul");
  const std::size_t R = A.rows(), K = A.cols(), N = B.cols();
  if (B.rows() != K) {
    throw ContractError("matmul: inner dimensions " + shape_string(A.shape()) + " * " + shape_string(B.shape()));
  }
  Tensor y({R, N});
  kernels::gemm_nn(R, K, N, A.data(), B.data(), y.data());
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(std::move(y), rg, [a, b, R, K, N](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a.id)) {
      const Tensor bt = transpose(t.value(b.id));
      kernels::gemm_nn(R, N, K, g.data(), bt.data(), t.grad(a.id).data());
    }
    if (t.requires_grad(b.id)) {
      kernels::gemm_tn(K, R, N, t.value(a.id).data(), g.data(), t.grad(b.id).data());
    }
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_matrix(A, "matmul_nt");
  require_matrix(B, "matmul_nt");
  const std::size_t R = A.rows(), K = A.cols(), N = B.rows();
  if (B.cols() != K) {
    throw ContractError("matmul_nt: inner dimensions " + shape_string(A.shape()) + " * " +
                        shape_string(B.shape()) + "^T");
  }
  Tensor y({R, N});
  kernels::gemm_nt(R, K, N, A.data(), B.data(), y.data());
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(std::move(y), rg, [a, b, R, K, N](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    // dA = G B, dB = G^T A
    if (t.requires_grad(a.id)) kernels::gemm_nn(R, N, K, g.data(), t.value(b.id).data(), t.grad(a.id).data());
    if (t.requires_grad(b.id)) kernels::gemm_tn(N, R, K, g.data(), t.value(a.id).data(), t.grad(b.id).data());
  });
}

// ----------------------------------------------------------------- structure

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  const std::size_t C = x.cols();
  if (begin + count > x.rows()) throw ContractError("slice_rows: range past end of " + shape_string(x.shape()));
  Tensor y({count, C});
  std::copy_n(x.data() + begin * C, count * C, y.data());
  return t.push(std::move(y), t.requires_grad(a.id), [a, begin, count, C](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    double* ga = t.grad(a.id).data() + begin * C;
    for (std::size_t i = 0; i < count * C; ++i) ga[i] += g[i];
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  const std::size_t R = x.rows(), C = x.cols();
  if (begin + count > C) throw ContractError("slice_cols: range past end of " + shape_string(x.shape()));
  Tensor y({R, count});
  for (std::size_t r = 0; r < R; ++r) std::copy_n(x.data() + r * C + begin, count, y.data() + r * count);
  return t.push(std::move(y), t.requires_grad(a.id), [a, begin, count, R, C](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(a.id);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < count; ++c) ga[r * C + begin + c] += g[r * count + c];
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Tape& t = *parts.front().tape;
  const std::size_t R = parts.front().rows();
  std::size_t total = 0;
  bool rg = false;
  for (Var p : parts) {
    if (p.tape != &t) throw ContractError("concat_cols: operands recorded on different tapes");
    if (p.rows() != R) throw ContractError("concat_cols: row count mismatch");
    total += p.cols();
    rg = rg || t.requires_grad(p.id);
  }
  Tensor y({R, total});
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& x = p.value();
    const std::size_t C = x.cols();
    for (std::size_t r = 0; r < R; ++r) std::copy_n(x.data() + r * C, C, y.data() + r * total + offset);
    offset += C;
  }
  return t.push(std::move(y), rg, [parts, R, total](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    std::size_t offset = 0;
    for (Var p : parts) {
      const std::size_t C = t.value(p.id).cols();
      if (t.requires_grad(p.id)) {
        Tensor& gp = t.grad(p.id);
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) gp[r * C + c] += g[r * total + offset + c];
      }
      offset += C;
    }
  });
}

Var gather_row(Var a, std::size_t row) { return slice_rows(a, row, 1); }

Var mean_rows(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  const std::size_t R = x.rows(), C = x.cols();
  if (R == 0) throw ContractError("mean_rows: empty input");
  Tensor y({1, C});
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) y[c] += x[r * C + c];
  for (std::size_t c = 0; c < C; ++c) y[c] /= static_cast<double>(R);
  return t.push(std::move(y), t.requires_grad(a.id), [a, R, C](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(a.id);
    const double inv = 1.0 / static_cast<double>(R);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) ga[r * C + c] += g[c] * inv;
  });
}

Var node_mix(Var adjacency, Var x, std::size_t n) {
  Tape& t = tape_of(adjacency, x);
  const Tensor& A = adjacency.value();
  const Tensor& X = x.value();
  if (A.rank() != 2 || A.rows() != n || A.cols() != n) {
    throw ContractError("node_mix: adjacency must be " + std::to_string(n) + "x" + std::to_string(n) + ", got " +
                        shape_string(A.shape()));
  }
  if (n == 0 || X.rows() % n != 0) throw ContractError("node_mix: rows not a multiple of node count");
  const std::size_t groups = X.rows() / n, C = X.cols();
  Tensor y(X.shape());
  kernels::node_mix(groups, n, C, A.data(), X.data(), y.data());
  const bool rg = t.requires_grad(adjacency.id) || t.requires_grad(x.id);
  return t.push(std::move(y), rg, [adjacency, x, n, groups, C](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(x.id)) {
      kernels::node_mix_grad_input(groups, n, C, t.value(adjacency.id).data(), g.data(), t.grad(x.id).data());
    }
    if (t.requires_grad(adjacency.id)) {
      kernels::node_mix_grad_adj(groups, n, C, t.value(x.id).data(), g.data(), t.grad(adjacency.id).data());
    }
  });
}

Var causal_conv(Var x, Var weight, Var bias, std::size_t group_rows, std::size_t dilation, std::size_t taps) {
  Tape& t = tape_of(x, weight);
  if (bias.tape != &t) throw ContractError("causal_conv: bias recorded on a different tape");
  const Tensor& X = x.value();
  const Tensor& W = weight.value();
  const std::size_t R = X.rows(), Cin = X.cols();
  if (taps == 0 || W.rows() != taps * Cin) {
    throw ContractError("causal_conv: weight " + shape_string(W.shape()) + " does not stack " +
                        std::to_string(taps) + " taps of " + std::to_string(Cin) + " inputs");
  }
  if (group_rows == 0 || R % group_rows != 0) throw ContractError("causal_conv: rows not a multiple of group size");
  const std::size_t Cout = W.cols();
  if (bias.value().size() != Cout) throw ContractError("causal_conv: bias size mismatch");

  Tensor y({R, Cout});
  const Tensor& b = bias.value();
  for (std::size_t r = 0; r < R; ++r) std::copy_n(b.data(), Cout, y.data() + r * Cout);
  for (std::size_t k = 0; k < taps; ++k) {
    const std::size_t shift = (taps - 1 - k) * dilation * group_rows;
    if (shift >= R) continue;
    kernels::gemm_nn(R - shift, Cin, Cout, X.data(), W.data() + k * Cin * Cout, y.data() + shift * Cout);
  }
  const bool rg = t.requires_grad(x.id) || t.requires_grad(weight.id) || t.requires_grad(bias.id);
  return t.push(std::move(y), rg, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& X = t.value(x.id);
    const Tensor& W = t.value(weight.id);
    for (std::size_t k = 0; k < taps; ++k) {
      const std::size_t shift = (taps - 1 - k) * dilation * group_rows;
      if (shift >= R) continue;
      const std::size_t len = R - shift;
      if (t.requires_grad(x.id)) {
        Tensor wk({Cin, Cout});
        std::copy_n(W.data() + k * Cin * Cout, Cin * Cout, wk.data());
        const Tensor wkt = transpose(wk);
        kernels::gemm_nn(len, Cout, Cin, g.data() + shift * Cout, wkt.data(), t.grad(x.id).data());
      }
      if (t.requires_grad(weight.id)) {
        kernels::gemm_tn(Cin, len, Cout, X.data(), g.data() + shift * Cout, t.grad(weight.id).data() + k * Cin * Cout);
      }
    }
    if (t.requires_grad(bias.id)) {
      Tensor& gb = t.grad(bias.id);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < Cout; ++c) gb[c] += g[r * Cout + c];
    }
  });
}

// ------------------------------------------------------------------- softmax

Var softmax_rows(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  const std::size_t R = x.rows(), C = x.cols();
  Tensor y(x.shape());
  for (std::size_t r = 0; r < R; ++r) {
    const double* xr = x.data() + r * C;
    double* yr = y.data() + r * C;
    const double m = *std::max_element(xr, xr + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += (yr[c] = std::exp(xr[c] - m));
    for (std::size_t c = 0; c < C; ++c) yr[c] /= z;
  }
  return t.push(std::move(y), t.requires_grad(a.id), [a, R, C](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(a.id);
    for (std::size_t r = 0; r < R; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) s += g[r * C + c] * y[r * C + c];
      for (std::size_t c = 0; c < C; ++c) ga[r * C + c] += y[r * C + c] * (g[r * C + c] - s);
    }
  });
}

Var log_softmax_masked(Var logits, const std::vector<bool>& masked) {
  Tape& t = *logits.tape;
  const Tensor& x = logits.value();
  const std::size_t C = x.size();
  if (masked.size() != C) throw ContractError("log_softmax_masked: mask size mismatch");
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < C; ++c)
    if (!masked[c]) m = std::max(m, x[c]);
  if (!std::isfinite(m)) throw ContractError("log_softmax_masked: every entry is masked");
  double z = 0.0;
  for (std::size_t c = 0; c < C; ++c)
    if (!masked[c]) z += std::exp(x[c] - m);
  const double log_z = m + std::log(z);
  Tensor y(x.shape());
  for (std::size_t c = 0; c < C; ++c) y[c] = masked[c] ? -std::numeric_limits<double>::infinity() : x[c] - log_z;
  return t.push(std::move(y), t.requires_grad(logits.id), [logits, masked, C](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(logits.id);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c)
      if (!masked[c]) s += g[c];
    for (std::size_t c = 0; c < C; ++c)
      if (!masked[c]) ga[c] += g[c] - std::exp(y[c]) * s;
  });
}

// ---------------------------------------------------------------- reductions

Var sum(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.values()) s += v;
  return t.push(Tensor({1, 1}, {s}), t.requires_grad(a.id), [a](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    Tensor& ga = t.grad(a.id);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ContractError("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var mse(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "mse");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t n = x.size();
  if (n == 0) throw ContractError("mse: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(Tensor({1, 1}, {s / static_cast<double>(n)}), rg, [a, b, n](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] * 2.0 / static_cast<double>(n);
    const Tensor& x = t.value(a.id);
    const Tensor& y = t.value(b.id);
    if (t.requires_grad(a.id)) {
      Tensor& ga = t.grad(a.id);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g * (x[i] - y[i]);
    }
    if (t.requires_grad(b.id)) {
      Tensor& gb = t.grad(b.id);
      for (std::size_t i = 0; i < n; ++i) gb[i] -= g * (x[i] - y[i]);
    }
  });
}

Var pick(Var a, std::size_t index) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  if (index >= x.size()) throw ContractError("pick: index out of range");
  return t.push(Tensor({1, 1}, {x[index]}), t.requires_grad(a.id), [a, index](Tape& t, std::size_t self) {
    t.grad(a.id)[index] += t.grad(self)[0];
  });
}

Var sum_scalars(const std::vector<Var>& terms) {
  if (terms.empty()) throw ContractError("sum_scalars: no terms");
  Var acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace rdat::ag
