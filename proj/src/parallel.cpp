#include "cbnn/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace cbnn {

namespace {

std::size_t initial_threads() {
  if (const char* env = std::getenv("CBNN_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (...) {
    }
  }
  return 1;
}

thread_local bool inside_worker = false;

std::atomic<std::size_t>& threads_setting() {
  static std::atomic<std::size_t> value{initial_threads()};
  return value;
}

}  // namespace

std::size_t thread_count() { return threads_setting().load(); }

void set_thread_count(std::size_t n) { threads_setting().store(std::max<std::size_t>(1, n)); }

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
  const std::size_t workers = std::min(thread_count(), n);
  // Nested calls run inline on the worker that issued them.
  if (workers <= 1 || inside_worker) {
    if (n > 0) body(0, n);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&body, begin, end] {
      inside_worker = true;
      body(begin, end);
    });
  }
  inside_worker = true;
  body(0, std::min(n, chunk));
  inside_worker = false;
}

void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C,
             bool accumulate) {
  parallel_for(M, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      double* c = C + i * N;
      if (!accumulate) std::fill(c, c + N, 0.0);
      const double* a = A + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const double aik = a[k];
        if (aik == 0.0) continue;
        const double* b = B + k * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += aik * b[j];
      }
    }
  });
}

void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C,
             bool accumulate) {
  parallel_for(M, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      const double* a = A + i * K;
      double* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) {
        const double* b = B + j * K;
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += a[k] * b[k];
        c[j] = accumulate ? c[j] + s : s;
      }
    }
  });
}

void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C,
             bool accumulate) {
  parallel_for(M, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      double* c = C + i * N;
      if (!accumulate) std::fill(c, c + N, 0.0);
      for (std::size_t k = 0; k < K; ++k) {
        const double aki = A[k * M + i];
        if (aki == 0.0) continue;
        const double* b = B + k * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += aki * b[j];
      }
    }
  });
}

}  // namespace cbnn
