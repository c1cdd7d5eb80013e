// Serial vs OpenMP timing for the dense kernels and one forecaster
// forward/backward pass at desk scale.
//
//   rdat_bench [--reps 20] [--batch 16]

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "rdat/datakit.hpp"
#include "rdat/forecaster.hpp"
#include "rdat/kernels.hpp"
#include "rdat/rng.hpp"

using namespace rdat;
namespace k = rdat::kernels;

namespace {

double time_ms(int reps, const std::function<void()>& fn) {
  for (int i = 0; i < 3; ++i) fn();
  const auto t = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t).count() / reps;
}

std::vector<double> random_vec(std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(size);
  for (auto& x : v) x = uniform_open(rng, -1.0, 1.0);
  return v;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

void row(const char* name, double serial, double par, double diff) {
  std::printf("%-28s %10.3f %10.3f %8.2fx   %.2e\n", name, serial, par, serial / par, diff);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kernel benchmark"};
  int reps = 20;
  std::size_t batch = 16;
  app.add_option("--reps", reps, "repetitions per timing")->check(CLI::PositiveNumber);
  app.add_option("--batch", batch, "forecaster batch size")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  std::printf("openmp %s, %d threads\n", k::openmp_enabled() ? "on" : "off", k::max_threads());
  std::printf("%-28s %10s %10s %9s   %s\n", "case", "serial ms", "omp ms", "speedup", "max|diff|");

  for (std::size_t m : {256u, 1024u, 4096u}) {
    const std::size_t kk = 32, nn = 64;
    const auto a = random_vec(m * kk, 1), b = random_vec(kk * nn, 2);
    std::vector<double> cs(m * nn), cp(m * nn);
    const double ts = time_ms(reps, [&] { std::fill(cs.begin(), cs.end(), 0.0); k::serial::gemm_nn(m, kk, nn, a.data(), b.data(), cs.data()); });
    const double tp = time_ms(reps, [&] { std::fill(cp.begin(), cp.end(), 0.0); k::parallel::gemm_nn(m, kk, nn, a.data(), b.data(), cp.data()); });
    char name[64];
    std::snprintf(name, sizeof name, "gemm_nn %zux%zux%zu", m, kk, nn);
    row(name, ts, tp, max_diff(cs, cp));
  }

  for (std::size_t groups : {64u, 512u}) {
    const std::size_t n = 20, c = 16;
    const auto adj = random_vec(n * n, 3), x = random_vec(groups * n * c, 4);
    std::vector<double> ys(groups * n * c), yp(groups * n * c);
    const double ts = time_ms(reps, [&] { std::fill(ys.begin(), ys.end(), 0.0); k::serial::node_mix(groups, n, c, adj.data(), x.data(), ys.data()); });
    const double tp = time_ms(reps, [&] { std::fill(yp.begin(), yp.end(), 0.0); k::parallel::node_mix(groups, n, c, adj.data(), x.data(), yp.data()); });
    char name[64];
    std::snprintf(name, sizeof name, "node_mix g=%zu n=%zu c=%zu", groups, n, c);
    row(name, ts, tp, max_diff(ys, yp));
  }

  const auto prep = datakit::prepare(datakit::synth_traffic(20, 600, 1), 12, 12);
  forecaster::ArchConfig arch;
  arch.hidden_channels = 16;
  arch.head_channels = 32;
  const auto model = forecaster::make_forecaster(arch, 20, 1);
  const auto b = forecaster::make_batch(prep.split.train, 0, batch);
  auto run = [&](k::ExecMode mode, Tensor& out) {
    k::set_exec_mode(mode);
    return time_ms(std::max(1, reps / 4), [&] { out = forecaster::grad_input(model, b.x, b.size, [&](ag::Var p) {
      return ag::mse(p, p.tape->constant(b.y));
    }); });
  };
  Tensor gs, gp;
  const double ts = run(k::ExecMode::Serial, gs);
  const double tp = run(k::ExecMode::Parallel, gp);
  char name[64];
  std::snprintf(name, sizeof name, "forward+backward B=%zu", batch);
  row(name, ts, tp, max_abs_diff(gs, gp));
  return 0;
}
