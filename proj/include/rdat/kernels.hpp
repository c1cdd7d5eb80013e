#pragma once

// Dense inner loops used by the autograd tape. Every kernel exists twice:
// `serial::` is the plain reference loop nest and `parallel::` distributes the
// outermost output dimension over OpenMP threads. Both accumulate each output
// element in the same order, so results agree to rounding (and bit-for-bit
// when the compiler emits the same contraction for both loop nests).
//
// All matrices are contiguous and row-major. Kernels accumulate into C; the
// caller zeroes C when a plain product is wanted.

#include <cstddef>

namespace rdat::kernels {

enum class ExecMode { Serial, Parallel };

// Process-wide dispatch switch. Defaults to Parallel when OpenMP is compiled in.
void set_exec_mode(ExecMode mode);
ExecMode exec_mode();
bool openmp_enabled();
int max_threads();

namespace serial {
// C[MxN] += A[MxK] * B[KxN]
void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C);
// C[MxN] += A[MxK] * B[NxK]^T
void gemm_nt(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C);
// C[MxN] += A[KxM]^T * B[KxN]
void gemm_tn(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C);
// Y[g] += A[nxn] * X[g] for each of `groups` consecutive (n x C) blocks.
void node_mix(std::size_t groups, std::size_t n, std::size_t C, const double* A, const double* X, double* Y);
// dX[g] += A^T * dY[g]
void node_mix_grad_input(std::size_t groups, std::size_t n, std::size_t C, const double* A,
                         const double* dY, double* dX);
// dA += sum_g dY[g] * X[g]^T
void node_mix_grad_adj(std::size_t groups, std::size_t n, std::size_t C, const double* X,
                       const double* dY, double* dA);
}  // namespace serial

namespace parallel {
void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C);
void gemm_nt(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C);
void gemm_tn(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C);
void node_mix(std::size_t groups, std::size_t n, std::size_t C, const double* A, const double* X, double* Y);
void node_mix_grad_input(std::size_t groups, std::size_t n, std::size_t C, const double* A,
                         const double* dY, double* dX);
void node_mix_grad_adj(std::size_t groups, std::size_t n, std::size_t C, const double* X,
                       const double* dY, double* dA);
}  // namespace parallel

// Dispatching entry points used by the rest of the library.
void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C);
void gemm_nt(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C);
void gemm_tn(std::size_t M, std::size_t K, std::size_t N, const double* A, const double* B, double* C);
void node_mix(std::size_t groups, std::size_t n, std::size_t C, const double* A, const double* X, double* Y);
void node_mix_grad_input(std::size_t groups, std::size_t n, std::size_t C, const double* A,
                         const double* dY, double* dX);
void node_mix_grad_adj(std::size_t groups, std::size_t n, std::size_t C, const double* X,
                       const double* dY, double* dA);

}  // namespace rdat::kernels
