#pragma once

#include <cstddef>
#include <functional>

namespace cbnn {

// Worker count used by parallel_for. Defaults to CBNN_THREADS if set, else 1.
std::size_t thread_count();
void set_thread_count(std::size_t n);

// Runs body(begin, end) over contiguous chunks of [0, n). Every index is handled by
// exactly one call, so results that are written per index never depend on the
// number of threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);

// Row-major products. Each output row is owned by one worker and accumulated in a
// fixed order.
// C(MxN) = A(MxK) * B(KxN)
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C,
             bool accumulate = false);
// C(MxN) = A(MxK) * B(NxK)^T
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C,
             bool accumulate = false);
// C(MxN) = A(KxM)^T * B(KxN)
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C,
             bool accumulate = false);

}  // namespace cbnn
