#pragma once

// Reference computations used to check the kernel. None of these call into
// corrgauss except where a function explicitly takes a kernel result as input.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cbnn/corrgauss.hpp"

namespace cbnn::verify {

inline constexpr double kFdStep = 1e-6;
inline constexpr double kFdTolerance = 1e-4;

// Square row-major matrix.
struct Matrix {
  std::size_t n = 0;
  std::vector<double> v;

  Matrix() = default;
  explicit Matrix(std::size_t dim) : n(dim), v(dim * dim, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * n + j]; }
};

// Central differences (f(p + h e_k) - f(p - h e_k)) / 2h.
std::vector<double> finite_diff(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> point, double step = kFdStep);

// Sigma assembled entry by entry from the variance and covariance formulas.
Matrix dense_sigma(std::span<const double> m, double tau, double rho);

// Standard Cholesky with positive diagonal.
Matrix reference_cholesky(const Matrix& a);

// L * L^T for a lower-triangular L.
Matrix multiply_lower_transpose(const Matrix& lower);

// Dense L * L^T for the bidiagonal factor.
Matrix factor_product(const FactorL& factor);

// ln |det A| by LU decomposition with partial pivoting.
double lu_log_abs_det(Matrix a);

// Eigenvalues of a symmetric matrix (cyclic Jacobi), ascending.
std::vector<double> symmetric_eigenvalues(Matrix a);

struct Estimate {
  double mean = 0.0;
  double standard_error = 0.0;
};

// Monte-Carlo KL(q || p). Draws and the q density are both computed from the
// reference Cholesky of dense_sigma, not from the kernel factor.
Estimate mc_kl(std::span<const double> m, double tau, double rho, const PriorSpec& prior,
               std::size_t sample_count, std::uint64_t seed);

// |a - b| / max(|a|, |b|, floor)
double relative_error(double a, double b, double floor);

struct CheckResult {
  std::string suite;
  std::string name;
  bool passed = false;
  double worst = 0.0;      // worst observed error statistic
  double threshold = 0.0;  // the bound it was compared against
  std::string detail;
};

// Compares analytic and numeric vectors entry-wise. The floor for the relative error
// is 1e-3 of the largest analytic magnitude, so structurally tiny entries are held
// to an absolute bound tied to the vector's scale.
double worst_relative_error(std::span<const double> analytic, std::span<const double> numeric);

// The suites behind `cbnn verify` and the acceptance tests.
std::vector<CheckResult> covariance_suite(std::uint64_t seed);
std::vector<CheckResult> cholesky_suite(std::uint64_t seed);
std::vector<CheckResult> gradient_suite(std::uint64_t seed);
std::vector<CheckResult> kl_suite(std::uint64_t seed, std::size_t samples = 1'000'000);
std::vector<CheckResult> sampling_suite(std::uint64_t seed, std::size_t samples = 1'000'000);

// Random parameter set with all entries safely inside the valid region.
struct RandomInstance {
  std::vector<double> m;
  double delta = 0.0;
  double gamma = 0.0;
  double tau = 0.0;
  double rho = 0.0;
};
RandomInstance random_instance(std::size_t n, std::uint64_t seed, std::uint64_t index);

}  // namespace cbnn::verify
