#include "rdat/kernels.hpp"

#include <algorithm>
#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace rdat::kernels {

namespace {

#ifdef _OPENMP
std::atomic<ExecMode> g_mode{ExecMode::Parallel};
#else
std::atomic<ExecMode> g_mode{ExecMode::Serial};
#endif

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kMinParallelWork = 1u << 15;

inline double dot(const double* a, const double* b, std::size_t len) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t p = 0;
  for (; p + 4 <= len; p += 4) {
    s0 += a[p] * b[p];
    s1 += a[p + 1] * b[p + 1];
    s2 += a[p + 2] * b[p + 2];
    s3 += a[p + 3] * b[p + 3];
  }
  for (; p < len; ++p) s0 += a[p] * b[p];
  return (s0 + s1) + (s2 + s3);
}

constexpr std::size_t kChunk = 8;
// Rows of A^T B handled per pass so the A panel stays in L1.
constexpr std::size_t kBlockK = 64;

// c[0..N) += sum_p a[p * a_stride] * B[p, 0..N), one register-sized column
// chunk at a time so the partial sums stay out of memory.
inline void gemm_row(const double* a, std::size_t a_stride, std::size_t K, const double* B, std::size_t N, double* c) {
  std::size_t j = 0;
  for (; j + kChunk <= N; j += kChunk) {
    double acc[kChunk] = {};
    for (std::size_t p = 0; p < K; ++p) {
      const double ap = a[p * a_stride];
      const double* b = B + p * N + j;
      for (std::size_t u = 0; u < kChunk; ++u) acc[u] += ap * b[u];
    }
    for (std::size_t u = 0; u < kChunk; ++u) c[j + u] += acc[u];
  }
  if (j < N) {
    const std::size_t w = N - j;
    double acc[kChunk] = {};
    for (std::size_t p = 0; p < K; ++p) {
      const double ap = a[p * a_stride];
      const double* b = B + p * N + j;
      for (std::size_t u = 0; u < w; ++u) acc[u] += ap * b[u];
    }
    for (std::size_t u = 0; u < w; ++u) c[j + u] += acc[u];
  }
}

}  // namespace

void set_exec_mode(ExecMode mode) { g_mode.store(mode); }
ExecMode exec_mode() { return g_mode.load(); }

bool openmp_enabled() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace serial {

void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C) {
  for (std::size_t i = 0; i < M; ++i) gemm_row(A + i * K, 1, K, B, N, C + i * N);
}

void gemm_nt(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C) {
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = 0; j < N; ++j) C[i * N + j] += dot(A + i * K, B + j * K, K);
  }
}

void gemm_tn(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C) {
  for (std::size_t k0 = 0; k0 < K; k0 += kBlockK) {
    const std::size_t kb = std::min(kBlockK, K - k0);
    for (std::size_t m = 0; m < M; ++m) gemm_row(A + k0 * M + m, M, kb, B + k0 * N, N, C + m * N);
  }
}

void node_mix(std::size_t groups, std::size_t n, std::size_t C, const double* A, const double* X, double* Y) {
  const std::size_t stride = n * C;
  for (std::size_t g = 0; g < groups; ++g) gemm_nn(n, n, C, A, X + g * stride, Y + g * stride);
}

void node_mix_grad_input(std::size_t groups, std::size_t n, std::size_t C, const double* A,
                         const double* dY, double* dX) {
  const std::size_t stride = n * C;
  for (std::size_t g = 0; g < groups; ++g) gemm_tn(n, n, C, A, dY + g * stride, dX + g * stride);
}

void node_mix_grad_adj(std::size_t groups, std::size_t n, std::size_t C, const double* X,
                       const double* dY, double* dA) {
  const std::size_t stride = n * C;
  for (std::size_t g = 0; g < groups; ++g) gemm_nt(n, C, n, dY + g * stride, X + g * stride, dA);
}

}  // namespace serial

namespace parallel {

void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C) {
  const bool big = M * K * N >= kMinParallelWork;
  const auto rows = static_cast<long long>(M);
#pragma omp parallel for schedule(static) if (big)
  for (long long i = 0; i < rows; ++i) gemm_row(A + i * K, 1, K, B, N, C + i * N);
}

void gemm_nt(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C) {
  const bool big = M * K * N >= kMinParallelWork;
  const auto rows = static_cast<long long>(M);
#pragma omp parallel for schedule(static) if (big)
  for (long long i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < N; ++j) C[i * N + j] += dot(A + i * K, B + j * K, K);
  }
}

void gemm_tn(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C) {
  const bool big = M * K * N >= kMinParallelWork;
  const auto cols = static_cast<long long>(M);
  // Same k-block sequence per output element as the serial loop.
#pragma omp parallel if (big)
  for (std::size_t k0 = 0; k0 < K; k0 += kBlockK) {
    const std::size_t kb = std::min(kBlockK, K - k0);
#pragma omp for schedule(static)
    for (long long m = 0; m < cols; ++m) gemm_row(A + k0 * M + m, M, kb, B + k0 * N, N, C + m * N);
  }
}

void node_mix(std::size_t groups, std::size_t n, std::size_t C, const double* A, const double* X, double* Y) {
  const std::size_t stride = n * C;
  const bool big = groups * n * n * C >= kMinParallelWork;
  const auto G = static_cast<long long>(groups);
#pragma omp parallel for schedule(static) if (big)
  for (long long g = 0; g < G; ++g) serial::gemm_nn(n, n, C, A, X + g * stride, Y + g * stride);
}

void node_mix_grad_input(std::size_t groups, std::size_t n, std::size_t C, const double* A,
                         const double* dY, double* dX) {
  const std::size_t stride = n * C;
  const bool big = groups * n * n * C >= kMinParallelWork;
  const auto G = static_cast<long long>(groups);
#pragma omp parallel for schedule(static) if (big)
  for (long long g = 0; g < G; ++g) serial::gemm_tn(n, n, C, A, dY + g * stride, dX + g * stride);
}

void node_mix_grad_adj(std::size_t groups, std::size_t n, std::size_t C, const double* X,
                       const double* dY, double* dA) {
  const std::size_t stride = n * C;
  const bool big = groups * n * n * C >= kMinParallelWork;
  const auto rows = static_cast<long long>(n);
  // Row i of dA is private to one thread; groups are visited in order.
#pragma omp parallel for schedule(static) if (big)
  for (long long i = 0; i < rows; ++i) {
    for (std::size_t g = 0; g < groups; ++g) {
      const double* dy = dY + g * stride + i * C;
      const double* x = X + g * stride;
      for (std::size_t j = 0; j < n; ++j) dA[i * n + j] += dot(dy, x + j * C, C);
    }
  }
}

}  // namespace parallel

#define RDAT_DISPATCH(fn, ...)                                                 \
  do {                                                                         \
    if (g_mode.load(std::memory_order_relaxed) == ExecMode::Parallel) {        \
      parallel::fn(__VA_ARGS__);                                               \
    } else {                                                                   \
      serial::fn(__VA_ARGS__);                                                 \
    }                                                                          \
  } while (0)

void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C) {
  RDAT_DISPATCH(gemm_nn, M, K, N, A, B, C);
}
void gemm_nt(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C) {
  RDAT_DISPATCH(gemm_nt, M, K, N, A, B, C);
}
void gemm_tn(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C) {
  RDAT_DISPATCH(gemm_tn, M, K, N, A, B, C);
}
void node_mix(std::size_t groups, std::size_t n, std::size_t C, const double* A, const double* X, double* Y) {
  RDAT_DISPATCH(node_mix, groups, n, C, A, X, Y);
}
void node_mix_grad_input(std::size_t groups, std::size_t n, std::size_t C, const double* A,
                         const double* dY, double* dX) {
  RDAT_DISPATCH(node_mix_grad_input, groups, n, C, A, dY, dX);
}
void node_mix_grad_adj(std::size_t groups, std::size_t n, std::size_t C, const double* X,
                       const double* dY, double* dA) {
  RDAT_DISPATCH(node_mix_grad_adj, groups, n, C, X, dY, dA);
}

#undef RDAT_DISPATCH

}  // namespace rdat::kernels
