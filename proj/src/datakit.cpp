#include "rdat/datakit.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <queue>
#include <sstream>
#include <unordered_map>

#include "rdat/errors.hpp"
#include "rdat/log.hpp"
#include "rdat/rng.hpp"

namespace rdat::datakit {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    rows.push_back(split_csv_line(line));
  }
  return rows;
}

bool is_missing(const std::string& cell) {
  if (cell.empty()) return true;
  std::string lower;
  for (char c : cell) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  return lower == "nan" || lower == "na" || lower == "null";
}

std::optional<double> parse_number(const std::string& cell) {
  double v = 0.0;
  const char* b = cell.data();
  const char* e = b + cell.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// --------------------------------------------------------------------- graph

void validate_graph(const TrafficGraph& g) {
  const Tensor& A = g.adjacency;
  if (A.rank() != 2 || A.dim(0) != g.n || A.dim(1) != g.n) {
    throw SchemaError("adjacency must be " + std::to_string(g.n) + "x" + std::to_string(g.n) + ", got " +
                      shape_string(A.shape()));
  }
  if (g.node_ids.size() != g.n) throw SchemaError("node id count does not match node count");
  for (std::size_t i = 0; i < g.n; ++i) {
    for (std::size_t j = 0; j < g.n; ++j) {
      const double w = A.at(i, j);
      if (!std::isfinite(w) || w < 0.0) {
        throw SchemaError("adjacency weight (" + g.node_ids[i] + ", " + g.node_ids[j] + ") = " + format_double(w) +
                          " is negative or non-finite");
      }
    }
    if (A.at(i, i) != 0.0) throw SchemaError("adjacency diagonal must be zero at node " + g.node_ids[i]);
  }
}

bool is_connected(const TrafficGraph& g) {
  if (g.n == 0) return true;
  // Weak connectivity: an edge in either direction links two nodes.
  std::vector<bool> seen(g.n, false);
  std::vector<std::size_t> stack{0};
  seen[0] = true;
  std::size_t visited = 1;
  while (!stack.empty()) {
    const std::size_t u = stack.back();
    stack.pop_back();
    for (std::size_t v = 0; v < g.n; ++v) {
      if (!seen[v] && (g.weight(u, v) > 0.0 || g.weight(v, u) > 0.0)) {
        seen[v] = true;
        ++visited;
        stack.push_back(v);
      }
    }
  }
  return visited == g.n;
}

// ----------------------------------------------------------------- synthesis

Dataset synth_traffic(std::size_t n, std::size_t timesteps, std::uint64_t seed) {
  if (n < 4) throw ParameterError("synth_traffic: need at least 4 nodes, got " + std::to_string(n));
  if (timesteps < 200) throw ParameterError("synth_traffic: need at least 200 timesteps, got " + std::to_string(timesteps));

  Dataset data;
  TrafficGraph& g = data.graph;
  g.n = n;
  for (std::size_t i = 0; i < n; ++i) g.node_ids.push_back("s" + std::to_string(i));

  Rng graph_rng(derive_seed(seed, {stream::kSynthGraph}));
  std::vector<double> px(n), py(n);
  for (std::size_t i = 0; i < n; ++i) {
    px[i] = uniform_open(graph_rng);
    py[i] = uniform_open(graph_rng);
  }
  // Start near the connectivity threshold of a random geometric graph and
  // widen the radius until the graph is connected.
  double radius = std::sqrt(2.0 * std::log(static_cast<double>(n)) / (std::numbers::pi * static_cast<double>(n)));
  for (;;) {
    g.adjacency = Tensor({n, n});
    const double sigma2 = radius * radius / 2.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double d2 = (px[i] - px[j]) * (px[i] - px[j]) + (py[i] - py[j]) * (py[i] - py[j]);
        if (d2 <= radius * radius) {
          const double w = std::exp(-d2 / sigma2);
          g.adjacency.at(i, j) = w;
          g.adjacency.at(j, i) = w;
        }
      }
    }
    if (is_connected(g)) break;
    radius *= 1.1;
  }

  Rng series_rng(derive_seed(seed, {stream::kSynthSeries}));
  constexpr double kPeriod = 288.0;  // one day of 5-minute readings
  std::vector<double> level(n), amp(n), phase1(n), phase2(n), row_sum(n, 0.0);
  // Profile parameters drift smoothly with position, so nearby sensors look
  // alike, plus a small per-node jitter.
  const double phase1_base = 2.0 * std::numbers::pi * uniform_open(series_rng);
  const double phase2_base = 2.0 * std::numbers::pi * uniform_open(series_rng);
  for (std::size_t i = 0; i < n; ++i) {
    level[i] = 60.0 + 8.0 * (px[i] - 0.5) + uniform_open(series_rng, -1.0, 1.0);
    amp[i] = 9.0 + 5.0 * (py[i] - 0.5) + uniform_open(series_rng, -0.5, 0.5);
    phase1[i] = phase1_base + 0.8 * (px[i] + py[i] - 1.0) + uniform_open(series_rng, -0.1, 0.1);
    phase2[i] = phase2_base + 0.8 * (px[i] - py[i]) + uniform_open(series_rng, -0.1, 0.1);
    for (std::size_t j = 0; j < n; ++j) row_sum[i] += g.weight(i, j);
  }

  constexpr double kPersistence = 0.9;
  constexpr double kDiffusion = 0.5;
  constexpr double kNoise = 1.2;
  data.series.values = Tensor({timesteps, n, 1});
  std::vector<double> state(n, 0.0), next(n);
  for (std::size_t t = 0; t < timesteps; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      double neighbor = 0.0;
      for (std::size_t j = 0; j < n; ++j) neighbor += g.weight(i, j) * state[j];
      neighbor = row_sum[i] > 0.0 ? neighbor / row_sum[i] : state[i];
      next[i] = kPersistence * ((1.0 - kDiffusion) * state[i] + kDiffusion * neighbor) + kNoise * standard_normal(series_rng);
    }
    state.swap(next);
    const double phase = 2.0 * std::numbers::pi * static_cast<double>(t) / kPeriod;
    for (std::size_t i = 0; i < n; ++i) {
      const double daily = 0.65 * std::sin(phase + phase1[i]) + 0.35 * std::sin(2.0 * phase + phase2[i]);
      data.series.values.at(t, i, 0) = level[i] + amp[i] * daily + state[i];
    }
  }
  return data;
}

// ------------------------------------------------------------------- loading

Dataset load_csv(const std::filesystem::path& series_path, const std::filesystem::path& adjacency_path) {
  Dataset data;
  auto rows = read_csv(series_path);
  if (rows.empty()) throw SchemaError(series_path.string() + ": empty series file");
  const std::vector<std::string> ids = rows.front();
  const std::size_t n = ids.size();
  if (n == 0) throw SchemaError(series_path.string() + ": header has no node ids");
  {
    std::vector<std::string> sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw SchemaError(series_path.string() + ": duplicate node id in header");
    }
  }
  const std::size_t T = rows.size() - 1;
  Tensor values({T, n, 1});
  std::vector<std::vector<bool>> missing(T, std::vector<bool>(n, false));
  for (std::size_t t = 0; t < T; ++t) {
    const auto& row = rows[t + 1];
    if (row.size() != n) {
      throw SchemaError(series_path.string() + ": row " + std::to_string(t + 2) + " has " + std::to_string(row.size()) +
                        " cells, expected " + std::to_string(n));
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (is_missing(row[i])) {
        missing[t][i] = true;
        continue;
      }
      auto v = parse_number(row[i]);
      if (!v) {
        throw ParseError(series_path.string() + ": non-numeric cell '" + row[i] + "' at row " + std::to_string(t + 2) +
                         ", node " + ids[i]);
      }
      values.at(t, i, 0) = *v;
    }
  }

  // Forward fill, then the column mean for anything still missing.
  for (std::size_t i = 0; i < n; ++i) {
    std::optional<double> last;
    double total = 0.0;
    std::size_t observed = 0;
    for (std::size_t t = 0; t < T; ++t) {
      if (!missing[t][i]) {
        total += values.at(t, i, 0);
        ++observed;
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      if (missing[t][i]) {
        ++data.imputed_cells;
        if (last) {
          values.at(t, i, 0) = *last;
        } else if (observed > 0) {
          values.at(t, i, 0) = total / static_cast<double>(observed);
        } else {
          throw ParseError(series_path.string() + ": node " + ids[i] + " has no numeric values");
        }
      }
      last = values.at(t, i, 0);
    }
  }
  data.series.values = std::move(values);

  TrafficGraph& g = data.graph;
  g.n = n;
  g.node_ids = ids;
  g.adjacency = Tensor({n, n});
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < n; ++i) index.emplace(ids[i], i);

  auto adj_rows = read_csv(adjacency_path);
  if (adj_rows.empty()) throw SchemaError(adjacency_path.string() + ": empty adjacency file");
  const auto& head = adj_rows.front();
  const bool edge_header = head.size() == 3 && head[0] == "src" && head[1] == "dst" && head[2] == "weight";
  const bool first_row_numeric = std::all_of(head.begin(), head.end(), [](const std::string& c) { return parse_number(c).has_value(); });

  auto set_weight = [&](std::size_t i, std::size_t j, const std::string& cell, std::size_t line) {
    auto w = parse_number(cell);
    if (!w) throw ParseError(adjacency_path.string() + ": non-numeric weight '" + cell + "' on line " + std::to_string(line));
    if (*w < 0.0) {
      throw SchemaError(adjacency_path.string() + ": negative weight " + cell + " on line " + std::to_string(line));
    }
    if (i == j) {
      if (*w != 0.0) log::warn(adjacency_path.string() + ": dropping self-loop at node " + ids[i]);
      return;
    }
    g.adjacency.at(i, j) = *w;
  };

  const bool dense_with_header = !edge_header && !first_row_numeric && head.size() == n && adj_rows.size() == n + 1;
  const bool dense_plain = first_row_numeric && head.size() == n && adj_rows.size() == n &&
                           std::all_of(adj_rows.begin(), adj_rows.end(), [n](const auto& r) { return r.size() == n; });
  if (dense_with_header || dense_plain) {
    std::size_t offset = 0;
    if (dense_with_header) {
      if (head != ids) throw SchemaError(adjacency_path.string() + ": adjacency node ids do not match series header");
      offset = 1;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& row = adj_rows[i + offset];
      if (row.size() != n) throw SchemaError(adjacency_path.string() + ": dense adjacency row has wrong width");
      for (std::size_t j = 0; j < n; ++j) set_weight(i, j, row[j], i + offset + 1);
    }
  } else {
    const std::size_t start = edge_header ? 1 : 0;
    for (std::size_t r = start; r < adj_rows.size(); ++r) {
      const auto& row = adj_rows[r];
      if (row.size() != 3) {
        throw SchemaError(adjacency_path.string() + ": expected a dense " + std::to_string(n) + "x" + std::to_string(n) +
                          " grid or src,dst,weight rows (line " + std::to_string(r + 1) + ")");
      }
      auto src = index.find(row[0]);
      auto dst = index.find(row[1]);
      if (src == index.end() || dst == index.end()) {
        throw SchemaError(adjacency_path.string() + ": edge references unknown node id on line " + std::to_string(r + 1));
      }
      set_weight(src->second, dst->second, row[2], r + 1);
    }
  }
  validate_graph(g);
  if (!is_connected(g)) log::warn(adjacency_path.string() + ": graph is not connected");
  if (data.imputed_cells > 0) log::info("imputed " + std::to_string(data.imputed_cells) + " missing cells");
  return data;
}

void write_csv(const Dataset& data, const std::filesystem::path& series_path, const std::filesystem::path& adjacency_path) {
  const auto& ids = data.graph.node_ids;
  const std::size_t n = data.graph.n;
  {
    std::ofstream out(series_path);
    if (!out) throw IoError("cannot write " + series_path.string());
    for (std::size_t i = 0; i < n; ++i) out << (i ? "," : "") << ids[i];
    out << '\n';
    const Tensor& v = data.series.values;
    for (std::size_t t = 0; t < data.series.timesteps(); ++t) {
      for (std::size_t i = 0; i < n; ++i) out << (i ? "," : "") << format_double(v.at(t, i, 0));
      out << '\n';
    }
    if (!out) throw IoError("short write to " + series_path.string());
  }
  std::ofstream out(adjacency_path);
  if (!out) throw IoError("cannot write " + adjacency_path.string());
  for (std::size_t i = 0; i < n; ++i) out << (i ? "," : "") << ids[i];
  out << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out << (j ? "," : "") << format_double(data.graph.weight(i, j));
    out << '\n';
  }
  if (!out) throw IoError("short write to " + adjacency_path.string());
}

// ------------------------------------------------------------------- windows

Tensor SampleWindow::x() const {
  const std::size_t n = series->nodes(), c = series->channels();
  Tensor out({history, n, c});
  std::copy_n(series->values.data() + t_origin * n * c, history * n * c, out.data());
  return out;
}

Tensor SampleWindow::y() const {
  const std::size_t n = series->nodes();
  Tensor out({horizon, n, 1});
  for (std::size_t h = 0; h < horizon; ++h)
    for (std::size_t i = 0; i < n; ++i) out.at(h, i, 0) = series->values.at(t_origin + history + h, i, 0);
  return out;
}

std::vector<SampleWindow> make_windows(std::shared_ptr<const TrafficSeries> series, std::size_t history,
                                       std::size_t horizon) {
  if (history < 1 || horizon < 1) throw ParameterError("make_windows: history and horizon must be >= 1");
  const std::size_t T = series->timesteps();
  if (T < history + horizon) {
    throw ParameterError("make_windows: series of " + std::to_string(T) + " steps is shorter than history + horizon = " +
                         std::to_string(history + horizon));
  }
  std::vector<SampleWindow> out;
  out.reserve(T - history - horizon + 1);
  for (std::size_t t = 0; t + history + horizon <= T; ++t) out.push_back(SampleWindow{series, t, history, horizon});
  return out;
}

DatasetSplit split_windows(const std::vector<SampleWindow>& windows, std::array<double, 3> ratios) {
  for (double r : ratios) {
    if (!(r >= 0.0) || r > 1.0) throw ParameterError("split ratios must lie in [0, 1]");
  }
  if (ratios[0] + ratios[1] + ratios[2] > 1.0 + 1e-12) throw ParameterError("split ratios sum above 1");
  const std::size_t total = windows.size();
  const auto n_val = static_cast<std::size_t>(std::floor(ratios[1] * static_cast<double>(total) + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(ratios[2] * static_cast<double>(total) + 1e-9));
  const std::size_t n_train = total - n_val - n_test;
  DatasetSplit split;
  split.ratios = ratios;
  split.train.assign(windows.begin(), windows.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.val.assign(windows.begin() + static_cast<std::ptrdiff_t>(n_train),
                   windows.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  split.test.assign(windows.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), windows.end());
  return split;
}

DatasetSplit rebind(const DatasetSplit& split, std::shared_ptr<const TrafficSeries> series) {
  DatasetSplit out = split;
  for (auto* part : {&out.train, &out.val, &out.test}) {
    for (auto& w : *part) {
      if (w.end() > series->timesteps()) throw ContractError("rebind: series too short for window");
      w.series = series;
    }
  }
  return out;
}

// -------------------------------------------------------------------- scaler

TrafficSeries Scaler::apply(const TrafficSeries& series) const {
  TrafficSeries out = series;
  const std::size_t c = series.channels();
  for (std::size_t k = 0; k < out.values.size(); ++k) out.values[k] = apply(k % c, out.values[k]);
  return out;
}

TrafficSeries Scaler::invert(const TrafficSeries& series) const {
  TrafficSeries out = series;
  const std::size_t c = series.channels();
  for (std::size_t k = 0; k < out.values.size(); ++k) out.values[k] = invert(k % c, out.values[k]);
  return out;
}

Scaler fit_scaler(const TrafficSeries& series, const DatasetSplit& split) {
  if (split.train.empty()) throw ParameterError("fit_scaler: empty training split");
  std::size_t end = 0;
  for (const auto& w : split.train) end = std::max(end, w.end());
  end = std::min(end, series.timesteps());
  const std::size_t n = series.nodes(), c = series.channels();
  Scaler s;
  s.min.assign(c, std::numeric_limits<double>::infinity());
  s.max.assign(c, -std::numeric_limits<double>::infinity());
  for (std::size_t t = 0; t < end; ++t)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k) {
        const double v = series.values.at(t, i, k);
        s.min[k] = std::min(s.min[k], v);
        s.max[k] = std::max(s.max[k], v);
      }
  for (std::size_t k = 0; k < c; ++k) {
    if (!(s.max[k] > s.min[k])) {
      const std::string name = k < series.channel_names.size() ? series.channel_names[k] : std::to_string(k);
      throw DegenerateChannelError("channel '" + name + "' is constant over the training range");
    }
  }
  return s;
}

PreparedData prepare(const Dataset& data, std::size_t history, std::size_t horizon, std::array<double, 3> ratios) {
  auto raw = std::make_shared<const TrafficSeries>(data.series);
  const DatasetSplit raw_split = split_windows(make_windows(raw, history, horizon), ratios);
  PreparedData out;
  out.graph = data.graph;
  out.scaler = fit_scaler(*raw, raw_split);
  out.normalized = std::make_shared<const TrafficSeries>(out.scaler.apply(*raw));
  out.split = rebind(raw_split, out.normalized);
  return out;
}

// ------------------------------------------------------------- graph scores

namespace {

std::vector<double> normalized(std::vector<double> v) {
  double total = 0.0;
  for (double x : v) total += x;
  if (total <= 0.0) return std::vector<double>(v.size(), v.empty() ? 0.0 : 1.0 / static_cast<double>(v.size()));
  for (double& x : v) x /= total;
  return v;
}

void warn_if_disconnected(const TrafficGraph& g, const char* what) {
  if (!is_connected(g)) log::warn(std::string(what) + ": graph is disconnected; scores computed per component");
}

}  // namespace

std::vector<double> degree_scores(const TrafficGraph& g) {
  warn_if_disconnected(g, "degree_scores");
  std::vector<double> d(g.n, 0.0);
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j = 0; j < g.n; ++j) d[i] += 0.5 * (g.weight(i, j) + g.weight(j, i));
  return normalized(std::move(d));
}

std::vector<double> pagerank_scores(const TrafficGraph& g, double damping, std::size_t max_iters, double tolerance) {
  warn_if_disconnected(g, "pagerank_scores");
  const std::size_t n = g.n;
  if (n == 0) return {};
  std::vector<double> out_weight(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out_weight[i] += g.weight(i, j);
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> rank(n, inv_n), next(n);
  for (std::size_t it = 0; it < max_iters; ++it) {
    double dangling = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (out_weight[i] <= 0.0) dangling += rank[i];
    std::fill(next.begin(), next.end(), (1.0 - damping) * inv_n + damping * dangling * inv_n);
    for (std::size_t i = 0; i < n; ++i) {
      if (out_weight[i] <= 0.0) continue;
      const double share = damping * rank[i] / out_weight[i];
      for (std::size_t j = 0; j < n; ++j) next[j] += share * g.weight(i, j);
    }
    double residual = 0.0;
    for (std::size_t i = 0; i < n; ++i) residual += std::abs(next[i] - rank[i]);
    rank.swap(next);
    if (residual < tolerance) break;
  }
  return normalized(std::move(rank));
}

std::vector<double> betweenness_scores(const TrafficGraph& g) {
  warn_if_disconnected(g, "betweenness_scores");
  const std::size_t n = g.n;
  std::vector<double> centrality(n, 0.0);
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // Brandes accumulation over Dijkstra shortest paths; edge length is the
  // reciprocal of its weight.
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<double> dist(n, kInf), sigma(n, 0.0), delta(n, 0.0);
    std::vector<std::vector<std::size_t>> preds(n);
    std::vector<std::size_t> order;
    using Item = std::pair<double, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> queue;
    dist[s] = 0.0;
    sigma[s] = 1.0;
    queue.emplace(0.0, s);
    std::vector<bool> done(n, false);
    while (!queue.empty()) {
      auto [d, u] = queue.top();
      queue.pop();
      if (done[u]) continue;
      done[u] = true;
      order.push_back(u);
      for (std::size_t v = 0; v < n; ++v) {
        const double w = g.weight(u, v);
        if (w <= 0.0 || done[v]) continue;
        const double nd = d + 1.0 / w;
        const double tol = 1e-12 * std::max(1.0, nd);
        if (nd < dist[v] - tol) {
          dist[v] = nd;
          sigma[v] = sigma[u];
          preds[v].assign(1, u);
          queue.emplace(nd, v);
        } else if (std::abs(nd - dist[v]) <= tol) {
          sigma[v] += sigma[u];
          preds[v].push_back(u);
        }
      }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const std::size_t w = *it;
      for (std::size_t v : preds[w]) delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
      if (w != s) centrality[w] += delta[w];
    }
  }
  return normalized(std::move(centrality));
}

}  // namespace rdat::datakit
