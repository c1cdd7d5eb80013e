#include "rdat/forecaster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "rdat/errors.hpp"
#include "rdat/rng.hpp"

namespace rdat::forecaster {

using ag::Var;

std::size_t ArchConfig::receptive_field() const {
  std::size_t r = 1;
  for (std::size_t d : dilations) r += (temporal_kernel - 1) * d;
  return r;
}

void validate(const ArchConfig& a) {
  auto fail = [](const std::string& m) { throw ParameterError("ArchConfig: " + m); };
  if (a.blocks == 0) fail("blocks must be >= 1");
  if (a.dilations.size() != a.blocks) fail("need one dilation per block");
  for (std::size_t d : a.dilations)
    if (d == 0) fail("dilations must be >= 1");
  if (a.hidden_channels == 0 || a.head_channels == 0 || a.node_embed_dim == 0) fail("widths must be >= 1");
  if (a.temporal_kernel == 0) fail("temporal_kernel must be >= 1");
  if (a.history == 0 || a.horizon == 0) fail("history and horizon must be >= 1");
  if (a.in_channels == 0) fail("in_channels must be >= 1");
  if (a.receptive_field() > a.history) {
    fail("receptive field " + std::to_string(a.receptive_field()) + " exceeds history " + std::to_string(a.history));
  }
}

namespace {

Tensor uniform_tensor(Rng& rng, std::size_t rows, std::size_t cols, double bound) {
  Tensor t({rows, cols});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = uniform_open(rng, -bound, bound);
  return t;
}

std::string block_key(std::size_t k, const std::string& rest) { return "block" + std::to_string(k) + "." + rest; }

}  // namespace

Forecaster make_forecaster(const ArchConfig& arch, std::size_t nodes, std::uint64_t seed) {
  validate(arch);
  if (nodes == 0) throw ParameterError("make_forecaster: need at least one node");
  Forecaster m{arch, nodes, {}};
  Rng rng(derive_seed(seed, {stream::kModelInit}));
  const std::size_t H = arch.hidden_channels, K = arch.temporal_kernel;
  const auto inv_sqrt = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

  m.params.add("start.w", uniform_tensor(rng, arch.in_channels, H, inv_sqrt(arch.in_channels)));
  m.params.add("start.b", uniform_tensor(rng, 1, H, inv_sqrt(arch.in_channels)));
  for (std::size_t k = 0; k < arch.blocks; ++k) {
    for (const char* part : {"filter", "gate"}) {
      m.params.add(block_key(k, std::string(part) + ".w"), uniform_tensor(rng, K * H, H, inv_sqrt(K * H)));
      m.params.add(block_key(k, std::string(part) + ".b"), uniform_tensor(rng, 1, H, inv_sqrt(K * H)));
    }
    const double spatial_bound = inv_sqrt(H * (arch.diffusion_depth + 1));
    for (std::size_t i = 0; i <= arch.diffusion_depth; ++i) {
      m.params.add(block_key(k, "spatial.w" + std::to_string(i)), uniform_tensor(rng, H, H, spatial_bound));
    }
  }
  Tensor e1({nodes, arch.node_embed_dim}), e2({nodes, arch.node_embed_dim});
  for (std::size_t i = 0; i < e1.size(); ++i) e1[i] = standard_normal(rng);
  for (std::size_t i = 0; i < e2.size(); ++i) e2[i] = standard_normal(rng);
  m.params.add("embed.source", std::move(e1));
  m.params.add("embed.target", std::move(e2));
  const std::size_t skip = arch.blocks * H;
  m.params.add("head.w1", uniform_tensor(rng, skip, arch.head_channels, inv_sqrt(skip)));
  m.params.add("head.b1", uniform_tensor(rng, 1, arch.head_channels, inv_sqrt(skip)));
  m.params.add("head.w2", uniform_tensor(rng, arch.head_channels, arch.horizon, inv_sqrt(arch.head_channels)));
  m.params.add("head.b2", uniform_tensor(rng, 1, arch.horizon, inv_sqrt(arch.head_channels)));
  return m;
}

// -------------------------------------------------------------------- layers

Var adaptive_adjacency(Var source, Var target) { return ag::softmax_rows(ag::relu(ag::matmul_nt(source, target))); }

Tensor adaptive_adjacency(const Forecaster& model) {
  ag::Tape tape;
  Var e1 = tape.constant(model.params.at("embed.source"));
  Var e2 = tape.constant(model.params.at("embed.target"));
  return adaptive_adjacency(e1, e2).value();
}

Var temporal_layer(Var e, Var filter_w, Var filter_b, Var gate_w, Var gate_b, std::size_t group_rows,
                   std::size_t dilation, std::size_t taps) {
  Var f = ag::tanh(ag::causal_conv(e, filter_w, filter_b, group_rows, dilation, taps));
  Var g = ag::sigmoid(ag::causal_conv(e, gate_w, gate_b, group_rows, dilation, taps));
  return ag::mul(f, g);
}

Var spatial_layer(Var z, Var adjacency, const std::vector<Var>& weights, std::size_t nodes) {
  if (weights.empty()) throw ContractError("spatial_layer: need at least W^0");
  const std::size_t H = z.cols();
  for (Var w : weights) {
    if (w.rows() != H) throw ContractError("spatial_layer: weight rows do not match channel count");
  }
  Var power = z;
  Var out = ag::matmul(z, weights[0]);
  for (std::size_t i = 1; i < weights.size(); ++i) {
    power = ag::node_mix(adjacency, power, nodes);
    out = ag::add(out, ag::matmul(power, weights[i]));
  }
  return out;
}

// ------------------------------------------------------------------ batching

Tensor pack_inputs(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ContractError("pack_inputs: empty batch");
  const std::size_t B = xs.size();
  const std::size_t tau = xs[0].dim(0), n = xs[0].dim(1), c = xs[0].dim(2);
  Tensor out({tau * B * n, c});
  for (std::size_t b = 0; b < B; ++b) {
    if (xs[b].shape() != xs[0].shape()) throw ContractError("pack_inputs: ragged batch");
    for (std::size_t t = 0; t < tau; ++t) {
      std::copy_n(xs[b].data() + t * n * c, n * c, out.data() + (t * B + b) * n * c);
    }
  }
  return out;
}

Tensor pack_targets(const std::vector<Tensor>& ys) {
  if (ys.empty()) throw ContractError("pack_targets: empty batch");
  const std::size_t B = ys.size();
  const std::size_t T = ys[0].dim(0), n = ys[0].dim(1);
  Tensor out({B * n, T});
  for (std::size_t b = 0; b < B; ++b) {
    if (ys[b].shape() != ys[0].shape()) throw ContractError("pack_targets: ragged batch");
    for (std::size_t h = 0; h < T; ++h)
      for (std::size_t i = 0; i < n; ++i) out.at(b * n + i, h) = ys[b].at(h, i, 0);
  }
  return out;
}

Tensor unpack_prediction(const Tensor& out, std::size_t sample, std::size_t nodes) {
  const std::size_t T = out.cols();
  Tensor y({T, nodes, 1});
  for (std::size_t h = 0; h < T; ++h)
    for (std::size_t i = 0; i < nodes; ++i) y.at(h, i, 0) = out.at(sample * nodes + i, h);
  return y;
}

Batch make_batch(const std::vector<datakit::SampleWindow>& windows, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("make_batch: no windows");
  std::vector<Tensor> xs, ys;
  xs.reserve(indices.size());
  ys.reserve(indices.size());
  for (std::size_t k : indices) {
    xs.push_back(windows.at(k).x());
    ys.push_back(windows.at(k).y());
  }
  return Batch{pack_inputs(xs), pack_targets(ys), indices.size()};
}

Batch make_batch(const std::vector<datakit::SampleWindow>& windows, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> idx(count);
  for (std::size_t k = 0; k < count; ++k) idx[k] = begin + k;
  return make_batch(windows, idx);
}

// ------------------------------------------------------------------- forward

Var forward(const ArchConfig& arch, const BoundParams& p, Var x, std::size_t nodes, std::size_t batch,
            bool full_sequence) {
  const std::size_t G = batch * nodes;
  const std::size_t tau = arch.history;
  if (x.rows() != tau * G || x.cols() != arch.in_channels) {
    throw ContractError("forward: input " + shape_string(x.value().shape()) + " does not match tau=" +
                        std::to_string(tau) + ", batch=" + std::to_string(batch) + ", n=" + std::to_string(nodes) +
                        ", c=" + std::to_string(arch.in_channels));
  }
  if (!x.value().all_finite()) throw ContractError("forward: non-finite input");

  // Number of trailing steps each block has to produce.
  const std::size_t L = arch.blocks;
  std::vector<std::size_t> need_out(L), need_in(L);
  for (std::size_t k = L; k-- > 0;) {
    const std::size_t reach = (arch.temporal_kernel - 1) * arch.dilations[k];
    if (full_sequence) {
      need_out[k] = need_in[k] = tau;
      continue;
    }
    need_out[k] = k + 1 == L ? 1 : std::max<std::size_t>(1, need_in[k + 1]);
    need_in[k] = std::min(tau, need_out[k] + reach);
  }

  Var adjacency = adaptive_adjacency(p("embed.source"), p("embed.target"));
  Var input = ag::slice_rows(x, (tau - need_in[0]) * G, need_in[0] * G);
  Var e = ag::add_row(ag::matmul(input, p("start.w")), p("start.b"));

  std::vector<Var> skips;
  skips.reserve(L);
  for (std::size_t k = 0; k < L; ++k) {
    const std::size_t have = e.rows() / G;
    if (have > need_in[k]) e = ag::slice_rows(e, (have - need_in[k]) * G, need_in[k] * G);
    Var z = temporal_layer(e, p(block_key(k, "filter.w")), p(block_key(k, "filter.b")), p(block_key(k, "gate.w")),
                           p(block_key(k, "gate.b")), G, arch.dilations[k], arch.temporal_kernel);
    const std::size_t drop = (need_in[k] - need_out[k]) * G;
    if (drop > 0) {
      z = ag::slice_rows(z, drop, need_out[k] * G);
      e = ag::slice_rows(e, drop, need_out[k] * G);
    }
    std::vector<Var> weights;
    for (std::size_t i = 0; i <= arch.diffusion_depth; ++i) weights.push_back(p(block_key(k, "spatial.w" + std::to_string(i))));
    z = spatial_layer(z, adjacency, weights, nodes);
    skips.push_back(ag::slice_rows(z, (need_out[k] - 1) * G, G));
    e = ag::add(z, e);
  }

  Var h = ag::relu(ag::concat_cols(skips));
  h = ag::relu(ag::add_row(ag::matmul(h, p("head.w1")), p("head.b1")));
  return ag::add_row(ag::matmul(h, p("head.w2")), p("head.b2"));
}

Tensor predict(const Forecaster& model, const Tensor& packed_x, std::size_t batch) {
  ag::Tape tape;
  BoundParams p(tape, model.params, false);
  return forward(model.arch, p, tape.constant(packed_x), model.nodes, batch).value();
}

Tensor predict(const Forecaster& model, const Tensor& x) {
  const Tensor out = predict(model, pack_inputs({x}), 1);
  return unpack_prediction(out, 0, model.nodes);
}

Tensor grad_input(const Forecaster& model, const Tensor& packed_x, std::size_t batch, const OutputLoss& loss,
                  double* loss_value) {
  ag::Tape tape;
  BoundParams p(tape, model.params, false);
  Var x = tape.leaf(packed_x, true);
  Var l = loss(forward(model.arch, p, x, model.nodes, batch));
  if (loss_value) *loss_value = l.scalar();
  tape.backward(l);
  return tape.grad_or_zero(x.id);
}

Tensor grad_input(const Forecaster& model, const Tensor& x, const Tensor& y) {
  const Tensor target = pack_targets({y});
  const Tensor packed = grad_input(model, pack_inputs({x}), 1, [&](Var pred) {
    return ag::mse(pred, pred.tape->constant(target));
  });
  // Packed rows for B = 1 are already in (t, i) order with channels last.
  return packed.reshaped(x.shape());
}

double loss_and_grads(const Forecaster& model, const Tensor& packed_x, std::size_t batch, const OutputLoss& loss,
                      ParamSet& grads) {
  ag::Tape tape;
  BoundParams p(tape, model.params, true);
  Var l = loss(forward(model.arch, p, tape.constant(packed_x), model.nodes, batch));
  tape.backward(l);
  grads = p.gradients();
  return l.scalar();
}

// ------------------------------------------------------------------- metrics

namespace {
void require_pair(const Tensor& a, const Tensor& b, const char* what) {
  if (a.size() != b.size()) throw ContractError(std::string(what) + ": size mismatch");
  if (a.empty()) throw ContractError(std::string(what) + ": empty input");
}
}  // namespace

double mse_loss(const Tensor& y_hat, const Tensor& y) {
  require_pair(y_hat, y, "mse_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y_hat[i] - y[i]) * (y_hat[i] - y[i]);
  return s / static_cast<double>(y.size());
}

double mae_metric(const Tensor& y_hat, const Tensor& y) {
  require_pair(y_hat, y, "mae_metric");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y_hat[i] - y[i]);
  return s / static_cast<double>(y.size());
}

double rmse_metric(const Tensor& y_hat, const Tensor& y) { return std::sqrt(mse_loss(y_hat, y)); }

Metrics evaluate(const Forecaster& model, const std::vector<datakit::SampleWindow>& windows,
                 const datakit::Scaler& scaler, std::size_t batch_size, const InputTransform& transform) {
  if (windows.empty()) throw ContractError("evaluate: no windows");
  double abs_sum = 0.0, sq_sum = 0.0;
  std::size_t count = 0, batch_index = 0;
  for (std::size_t begin = 0; begin < windows.size(); begin += batch_size, ++batch_index) {
    const std::size_t B = std::min(batch_size, windows.size() - begin);
    const Batch batch = make_batch(windows, begin, B);
    const Tensor x = transform ? transform(batch, batch_index) : batch.x;
    const Tensor pred = predict(model, x, B);
    for (std::size_t k = 0; k < pred.size(); ++k) {
      const double d = scaler.invert(0, pred[k]) - scaler.invert(0, batch.y[k]);
      abs_sum += std::abs(d);
      sq_sum += d * d;
    }
    count += pred.size();
  }
  return Metrics{abs_sum / static_cast<double>(count), std::sqrt(sq_sum / static_cast<double>(count))};
}

double normalized_mae(const Forecaster& model, const std::vector<datakit::SampleWindow>& windows,
                      std::size_t batch_size) {
  if (windows.empty()) throw ContractError("normalized_mae: no windows");
  double abs_sum = 0.0;
  std::size_t count = 0;
  for (std::size_t begin = 0; begin < windows.size(); begin += batch_size) {
    const std::size_t B = std::min(batch_size, windows.size() - begin);
    const Batch batch = make_batch(windows, begin, B);
    const Tensor pred = predict(model, batch.x, B);
    for (std::size_t k = 0; k < pred.size(); ++k) abs_sum += std::abs(pred[k] - batch.y[k]);
    count += pred.size();
  }
  return abs_sum / static_cast<double>(count);
}

// -------------------------------------------------------------------- training

std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch) {
  Rng rng(derive_seed(seed, {stream::kShuffle, epoch}));
  return sample_without_replacement(rng, count, count);
}

TrainHistory train_clean(Forecaster& model, const datakit::DatasetSplit& split, const TrainConfig& config) {
  TrainHistory history;
  if (config.epochs == 0) return history;
  if (split.train.empty()) throw ParameterError("train_clean: empty training split");
  if (config.batch_size == 0) throw ParameterError("train_clean: batch_size must be >= 1");
  const auto& val = split.val.empty() ? split.train : split.val;

  Adam adam(config.adam);
  ParamSet best = model.params;
  double best_mae = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = epoch_order(split.train.size(), config.seed, epoch);
    std::size_t batches = (order.size() + config.batch_size - 1) / config.batch_size;
    if (config.max_batches > 0) batches = std::min(batches, config.max_batches);
    double loss_sum = 0.0;
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const std::size_t begin = bi * config.batch_size;
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
      const Batch batch = make_batch(split.train, idx);
      ParamSet grads;
      const double loss = loss_and_grads(model, batch.x, batch.size, [&](Var pred) {
        return ag::mse(pred, pred.tape->constant(batch.y));
      }, grads);
      if (!std::isfinite(loss)) throw TrainingError("non-finite training loss", static_cast<int>(epoch));
      adam.step(model.params, grads);
      loss_sum += loss;
    }
    history.train_loss.push_back(loss_sum / static_cast<double>(batches));
    const double mae = normalized_mae(model, val);
    if (!std::isfinite(mae)) throw TrainingError("non-finite validation MAE", static_cast<int>(epoch));
    history.val_mae.push_back(mae);
    if (mae < best_mae) {
      best_mae = mae;
      best = model.params;
      history.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  model.params = std::move(best);
  return history;
}

// ----------------------------------------------------------------- checkpoints

Manifest arch_manifest(const ArchConfig& a, std::size_t nodes) {
  Manifest m;
  m["arch.blocks"] = std::to_string(a.blocks);
  m["arch.hidden_channels"] = std::to_string(a.hidden_channels);
  m["arch.diffusion_depth"] = std::to_string(a.diffusion_depth);
  m["arch.temporal_kernel"] = std::to_string(a.temporal_kernel);
  std::string dil;
  for (std::size_t k = 0; k < a.dilations.size(); ++k) dil += (k ? "," : "") + std::to_string(a.dilations[k]);
  m["arch.dilations"] = dil;
  m["arch.node_embed_dim"] = std::to_string(a.node_embed_dim);
  m["arch.head_channels"] = std::to_string(a.head_channels);
  m["arch.history"] = std::to_string(a.history);
  m["arch.horizon"] = std::to_string(a.horizon);
  m["arch.in_channels"] = std::to_string(a.in_channels);
  m["nodes"] = std::to_string(nodes);
  return m;
}

ArchConfig arch_from_manifest(const Manifest& m, std::size_t* nodes) {
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = m.find(key);
    if (it == m.end()) throw ParseError("checkpoint manifest is missing '" + key + "'");
    return it->second;
  };
  auto num = [&](const std::string& key) {
    try {
      return static_cast<std::size_t>(std::stoull(get(key)));
    } catch (const std::logic_error&) {
      throw ParseError("checkpoint manifest field '" + key + "' is not a count");
    }
  };
  ArchConfig a;
  a.blocks = num("arch.blocks");
  a.hidden_channels = num("arch.hidden_channels");
  a.diffusion_depth = num("arch.diffusion_depth");
  a.temporal_kernel = num("arch.temporal_kernel");
  a.dilations.clear();
  std::stringstream ss(get("arch.dilations"));
  std::string tok;
  while (std::getline(ss, tok, ',')) a.dilations.push_back(static_cast<std::size_t>(std::stoull(tok)));
  a.node_embed_dim = num("arch.node_embed_dim");
  a.head_channels = num("arch.head_channels");
  a.history = num("arch.history");
  a.horizon = num("arch.horizon");
  a.in_channels = num("arch.in_channels");
  if (nodes) *nodes = num("nodes");
  validate(a);
  return a;
}

void save_forecaster(const std::filesystem::path& dir, const Forecaster& model, Manifest extra) {
  Manifest m = arch_manifest(model.arch, model.nodes);
  m["kind"] = "forecaster";
  for (auto& [k, v] : extra) m[k] = v;
  save_checkpoint(dir, model.params, m);
}

Forecaster load_forecaster(const std::filesystem::path& dir) {
  Checkpoint ck = load_checkpoint(dir);
  if (ck.manifest.contains("kind") && ck.manifest.at("kind") != "forecaster") {
    throw ParseError(dir.string() + " holds a '" + ck.manifest.at("kind") + "' checkpoint, not a forecaster");
  }
  Forecaster m;
  m.arch = arch_from_manifest(ck.manifest, &m.nodes);
  const Forecaster shape_ref = make_forecaster(m.arch, m.nodes, 0);
  for (const auto& [name, t] : shape_ref.params.tensors()) {
    if (!ck.params.contains(name)) throw ParseError(dir.string() + ": missing array '" + name + "'");
    if (ck.params.at(name).shape() != t.shape()) throw ParseError(dir.string() + ": array '" + name + "' has wrong shape");
  }
  m.params = std::move(ck.params);
  return m;
}

}  // namespace rdat::forecaster
