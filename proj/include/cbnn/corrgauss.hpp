#pragma once

// Layer-wise multivariate normal with tridiagonal covariance.
//
// For a layer with n parameters the variance of parameter i is tau^2 * m_i^2 and the
// covariance of neighbours i, i+1 is rho * tau^2 * |m_i| * |m_{i+1}|. The covariance is
// represented through a lower bidiagonal factor L (diagonal a, subdiagonal c) with
// Sigma = L * L^T, built by a forward recursion that keeps the sign of m_i * m_{i+1} in
// c_i instead of normalising to the positive Cholesky factor.
//
// tau = softplus(delta) and rho = sigmoid(gamma) - 1/2, so delta and gamma are the
// unconstrained learnable scalars.
//
// Indexing is 0-based: a[i] is the i-th diagonal entry, c[i] couples parameters i and
// i+1, and the "previous" subdiagonal entry of row i is c[i-1] (zero for i = 0).

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace cbnn {

// Stability thresholds applied before every forward pass.
inline constexpr double kGammaFloor = 0.04000533;  // |rho| >= ~0.0100
inline constexpr double kGammaCap = 10.0;
inline constexpr double kDeltaFloor = -4.600166;  // tau >= ~0.0100
inline constexpr double kMeanFloor = 1e-6;

// Relative guard on tau^2 m_i^2 - c_{i-1}^2.
inline constexpr double kSqrtGuard = 1e-12;

struct VariationalParams {
  std::vector<double> m;
  double delta = 0.0;
  double gamma = 0.0;

  bool operator==(const VariationalParams&) const = default;
};

// Diagonal Gaussian prior N(mu, zeta^2 I).
struct PriorSpec {
  std::vector<double> mu;
  double zeta = 1.0;

  bool operator==(const PriorSpec&) const = default;
};

struct FactorL {
  std::vector<double> a;  // n
  std::vector<double> c;  // n - 1
  double tau = 0.0;
  double rho = 0.0;

  std::size_t size() const { return a.size(); }
  double prev_c(std::size_t i) const { return i == 0 ? 0.0 : c[i - 1]; }
};

// Dense derivative tables of the factor entries. Row i of dc_dm holds dc_i/dm_k for
// k = 0..n-1; entries with k > i + 1 are structurally zero.
struct FactorGrads {
  std::size_t n = 0;
  std::vector<double> dc_dm;  // (n-1) x n
  std::vector<double> da_dm;  // n x n
  std::vector<double> dc_dtau, dc_drho;  // inner chains, before the w_delta / w_gamma factors
  std::vector<double> dc_ddelta, dc_dgamma;  // n - 1
  std::vector<double> da_ddelta, da_dgamma;  // n
  std::vector<double> u;  // tau^2 m_i^2 - c_{i-1}^2 for i < n - 1
  double y = 0.0;         // tau^2 m_{n-1}^2 - c_{n-2}^2
  double w_delta = 0.0;   // dtau/ddelta
  double w_gamma = 0.0;   // drho/dgamma

  double dc(std::size_t i, std::size_t k) const { return dc_dm[i * n + k]; }
  double da(std::size_t i, std::size_t k) const { return da_dm[i * n + k]; }
};

// Derivatives of the sampled weights w = m + L x with x held fixed.
struct WeightGrads {
  std::size_t n = 0;
  std::vector<double> dw_dm;  // n x n, row i = dw_i/dm_k
  std::vector<double> dw_ddelta;
  std::vector<double> dw_dgamma;

  double dm(std::size_t i, std::size_t k) const { return dw_dm[i * n + k]; }
};

struct ParamGrads {
  std::vector<double> dm;
  double ddelta = 0.0;
  double dgamma = 0.0;
};

double reparam_tau(double delta);
double reparam_rho(double gamma);

// d tau / d delta = sigmoid(delta)
double tau_slope(double delta);
// d rho / d gamma = exp(-gamma) / (1 + exp(-gamma))^2
double rho_slope(double gamma);

// Upper bound on |rho| that keeps a tridiagonal matrix of size n positive definite.
double rho_bound(std::size_t n);

FactorL build_factor(std::span<const double> m, double tau, double rho);

std::vector<double> sample(std::span<const double> m, const FactorL& factor, std::span<const double> noise);
void sample_into(std::span<const double> m, const FactorL& factor, std::span<const double> noise,
                 std::span<double> out);

// sum_i ln(a_i^2) = ln det(Sigma)
double log_det_sigma(const FactorL& factor);

// Full KL(q || p), including the parameter-independent constant.
double kl_to_prior(std::span<const double> m, double tau, const FactorL& factor, const PriorSpec& prior);

FactorGrads factor_grads(std::span<const double> m, double delta, double gamma, const FactorL& factor);
WeightGrads weight_grads(std::span<const double> noise, const FactorGrads& grads);
ParamGrads kl_grads(std::span<const double> m, double delta, double gamma, const FactorL& factor,
                    const FactorGrads& grads, const PriorSpec& prior);
ParamGrads chain_rule_backward(std::span<const double> dL_dw, const WeightGrads& wgrads);

// Gradient of  L(w) + kl_scale * KL(q || p)  with respect to (m, delta, gamma), where
// dL_dw is dL/dw at w = m + L x. Reverse-mode pass over the factor recursion in O(n)
// time and memory, so it scales to layers where the dense tables above do not fit.
// Pass kl_scale = 0 (prior may then be null) for the data term alone.
ParamGrads banded_backward(std::span<const double> m, double delta, double gamma, const FactorL& factor,
                           std::span<const double> noise, std::span<const double> dL_dw, double kl_scale,
                           const PriorSpec* prior);

// Returns a copy with gamma, delta and near-zero means moved out of critical ranges.
// coin() decides the sign of values that are pushed off zero (true = positive).
VariationalParams stabilize_params(VariationalParams params, const std::function<bool()>& coin);

}  // namespace cbnn
