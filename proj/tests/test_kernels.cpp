#include <doctest.h>

#include "helpers.hpp"
#include "rdat/kernels.hpp"

using namespace rdat;
namespace k = rdat::kernels;

namespace {

// Textbook triple loop, used as the oracle for both kernel families.
std::vector<double> naive_gemm(std::size_t M, std::size_t K, std::size_t N, const std::vector<double>& A,
                               bool a_trans, const std::vector<double>& B, bool b_trans) {
  std::vector<double> C(M * N, 0.0);
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < K; ++p) {
        const double a = a_trans ? A[p * M + i] : A[i * K + p];
        const double b = b_trans ? B[j * K + p] : B[p * N + j];
        s += a * b;
      }
      C[i * N + j] = s;
    }
  }
  return C;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct Dims {
  std::size_t M, K, N;
};

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("gemm variants match the naive oracle, serial and parallel") {
  // Includes shapes above the parallel threshold and ragged tails.
  for (Dims d : {Dims{1, 1, 1}, Dims{3, 5, 7}, Dims{17, 9, 13}, Dims{260, 70, 130}, Dims{129, 200, 65}}) {
    CAPTURE(d.M);
    CAPTURE(d.K);
    CAPTURE(d.N);
    const auto A = testutil::random_tensor({d.M * d.K}, 1).values();
    const auto B = testutil::random_tensor({d.K * d.N}, 2).values();
    const auto nn = naive_gemm(d.M, d.K, d.N, A, false, B, false);
    const auto nt = naive_gemm(d.M, d.K, d.N, A, false, B, true);
    const auto tn = naive_gemm(d.M, d.K, d.N, A, true, B, false);
    std::vector<double> c1(d.M * d.N), c2(d.M * d.N);

    k::serial::gemm_nn(d.M, d.K, d.N, A.data(), B.data(), c1.data());
    k::parallel::gemm_nn(d.M, d.K, d.N, A.data(), B.data(), c2.data());
    CHECK(max_diff(c1, nn) < 1e-11);
    CHECK(max_diff(c1, c2) < 1e-12);

    std::fill(c1.begin(), c1.end(), 0.0);
    std::fill(c2.begin(), c2.end(), 0.0);
    k::serial::gemm_nt(d.M, d.K, d.N, A.data(), B.data(), c1.data());
    k::parallel::gemm_nt(d.M, d.K, d.N, A.data(), B.data(), c2.data());
    CHECK(max_diff(c1, nt) < 1e-11);
    CHECK(max_diff(c1, c2) < 1e-12);

    std::fill(c1.begin(), c1.end(), 0.0);
    std::fill(c2.begin(), c2.end(), 0.0);
    k::serial::gemm_tn(d.M, d.K, d.N, A.data(), B.data(), c1.data());
    k::parallel::gemm_tn(d.M, d.K, d.N, A.data(), B.data(), c2.data());
    CHECK(max_diff(c1, tn) < 1e-11);
    CHECK(max_diff(c1, c2) < 1e-12);
  }
}

TEST_CASE("gemm accumulates into C") {
  const std::vector<double> A{1, 2, 3, 4}, B{1, 0, 0, 1};
  std::vector<double> C{10, 10, 10, 10};
  k::gemm_nn(2, 2, 2, A.data(), B.data(), C.data());
  CHECK(C == std::vector<double>{11, 12, 13, 14});
}

TEST_CASE("node mixing kernels match dense block products") {
  const std::size_t groups = 37, n = 11, C = 9;
  const auto A = testutil::random_tensor({n * n}, 3).values();
  const auto X = testutil::random_tensor({groups * n * C}, 4).values();
  const auto dY = testutil::random_tensor({groups * n * C}, 5).values();

  std::vector<double> ys(groups * n * C), yp(groups * n * C), oracle(groups * n * C);
  k::serial::node_mix(groups, n, C, A.data(), X.data(), ys.data());
  k::parallel::node_mix(groups, n, C, A.data(), X.data(), yp.data());
  for (std::size_t g = 0; g < groups; ++g) {
    std::vector<double> xg(X.begin() + g * n * C, X.begin() + (g + 1) * n * C);
    const auto yg = naive_gemm(n, n, C, A, false, xg, false);
    std::copy(yg.begin(), yg.end(), oracle.begin() + g * n * C);
  }
  CHECK(max_diff(ys, oracle) < 1e-12);
  CHECK(max_diff(ys, yp) < 1e-12);

  std::vector<double> dxs(groups * n * C), dxp(groups * n * C), dxo(groups * n * C);
  k::serial::node_mix_grad_input(groups, n, C, A.data(), dY.data(), dxs.data());
  k::parallel::node_mix_grad_input(groups, n, C, A.data(), dY.data(), dxp.data());
  for (std::size_t g = 0; g < groups; ++g) {
    std::vector<double> dyg(dY.begin() + g * n * C, dY.begin() + (g + 1) * n * C);
    const auto r = naive_gemm(n, n, C, A, true, dyg, false);
    std::copy(r.begin(), r.end(), dxo.begin() + g * n * C);
  }
  CHECK(max_diff(dxs, dxo) < 1e-12);
  CHECK(max_diff(dxs, dxp) < 1e-12);

  std::vector<double> das(n * n), dap(n * n), dao(n * n, 0.0);
  k::serial::node_mix_grad_adj(groups, n, C, X.data(), dY.data(), das.data());
  k::parallel::node_mix_grad_adj(groups, n, C, X.data(), dY.data(), dap.data());
  for (std::size_t g = 0; g < groups; ++g) {
    std::vector<double> xg(X.begin() + g * n * C, X.begin() + (g + 1) * n * C);
    std::vector<double> dyg(dY.begin() + g * n * C, dY.begin() + (g + 1) * n * C);
    const auto r = naive_gemm(n, C, n, dyg, false, xg, true);
    for (std::size_t i = 0; i < n * n; ++i) dao[i] += r[i];
  }
  CHECK(max_diff(das, dao) < 1e-11);
  CHECK(max_diff(das, dap) < 1e-11);
}

TEST_CASE("dispatch follows the execution mode") {
  const auto before = k::exec_mode();
  k::set_exec_mode(k::ExecMode::Serial);
  CHECK(k::exec_mode() == k::ExecMode::Serial);
  k::set_exec_mode(k::ExecMode::Parallel);
  CHECK(k::exec_mode() == k::ExecMode::Parallel);
  k::set_exec_mode(before);
  CHECK(k::max_threads() >= 1);
}

}  // TEST_SUITE
