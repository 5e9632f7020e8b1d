#include "cbnn/corrgauss.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "cbnn/errors.hpp"

namespace cbnn {

namespace {

double sign(double x) { return x < 0.0 ? -1.0 : 1.0; }

void require_same_size(std::size_t expected, std::size_t actual, const char* what) {
  if (expected != actual) {
    std::ostringstream os;
    os << what << ": expected length " << expected << ", got " << actual;
    throw ShapeMismatch(os.str());
  }
}

}  // namespace

double reparam_tau(double delta) {
  if (delta > 0.0) return delta + std::log1p(std::exp(-delta));
  return std::log1p(std::exp(delta));
}

double reparam_rho(double gamma) { return 0.5 * std::tanh(0.5 * gamma); }

double tau_slope(double delta) {
  if (delta >= 0.0) return 1.0 / (1.0 + std::exp(-delta));
  const double e = std::exp(delta);
  return e / (1.0 + e);
}

double rho_slope(double gamma) {
  const double t = std::tanh(0.5 * gamma);
  return 0.25 * (1.0 - t * t);
}

double rho_bound(std::size_t n) {
  if (n <= 1) return std::numeric_limits<double>::infinity();
  return 0.5 / std::abs(std::cos(std::numbers::pi / static_cast<double>(n + 1)));
}

FactorL build_factor(std::span<const double> m, double tau, double rho) {
  const std::size_t n = m.size();
  if (n == 0) throw ShapeMismatch("build_factor: empty mean vector");
  if (!(tau > 0.0)) throw DegenerateFactor("build_factor: tau must be positive");
  if (rho == 0.0 || !(std::abs(rho) < rho_bound(n))) {
    std::ostringstream os;
    os << "build_factor: rho = " << rho << " outside (0, " << rho_bound(n) << ") in magnitude";
    throw InvalidRho(os.str());
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (m[i] == 0.0 || !std::isfinite(m[i])) {
      throw DegenerateFactor("build_factor: mean " + std::to_string(i) + " is zero or not finite");
    }
  }

  FactorL f;
  f.tau = tau;
  f.rho = rho;
  f.a.resize(n);
  f.c.resize(n - 1);
  const double tau2 = tau * tau;
  double prev = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double var = tau2 * m[i] * m[i];
    const double u = var - prev * prev;
    if (!(u > kSqrtGuard * var)) {
      throw DegenerateFactor("build_factor: non-positive pivot at row " + std::to_string(i));
    }
    const double ci = rho * tau2 * m[i] * m[i + 1] / std::sqrt(u);
    f.c[i] = ci;
    f.a[i] = rho * tau2 * std::abs(m[i]) * std::abs(m[i + 1]) / ci;
    prev = ci;
  }
  const double var = tau2 * m[n - 1] * m[n - 1];
  const double y = var - prev * prev;
  if (!(y > kSqrtGuard * var)) throw DegenerateFactor("build_factor: non-positive final pivot");
  f.a[n - 1] = std::sqrt(y);
  return f;
}

void sample_into(std::span<const double> m, const FactorL& factor, std::span<const double> noise,
                 std::span<double> out) {
  const std::size_t n = m.size();
  require_same_size(n, noise.size(), "sample noise");
  require_same_size(n, factor.size(), "sample factor");
  require_same_size(n, out.size(), "sample output");
  out[0] = m[0] + factor.a[0] * noise[0];
  for (std::size_t i = 1; i < n; ++i) {
    out[i] = m[i] + factor.c[i - 1] * noise[i - 1] + factor.a[i] * noise[i];
  }
}

std::vector<double> sample(std::span<const double> m, const FactorL& factor, std::span<const double> noise) {
  std::vector<double> w(m.size());
  sample_into(m, factor, noise, w);
  return w;
}

double log_det_sigma(const FactorL& factor) {
  double s = 0.0;
  for (double ai : factor.a) {
    if (ai == 0.0) throw DegenerateFactor("log_det_sigma: zero diagonal entry");
    s += std::log(ai * ai);
  }
  return s;
}

double kl_to_prior(std::span<const double> m, double tau, const FactorL& factor, const PriorSpec& prior) {
  const std::size_t n = m.size();
  require_same_size(n, prior.mu.size(), "kl_to_prior prior mean");
  if (!(prior.zeta > 0.0)) throw Error("kl_to_prior: prior zeta must be positive");
  const double zeta2 = prior.zeta * prior.zeta;
  double norm_m = 0.0;
  double dist = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    norm_m += m[i] * m[i];
    const double d = m[i] - prior.mu[i];
    dist += d * d;
  }
  const double k = static_cast<double>(n);
  return 0.5 * (k * std::log(zeta2) - log_det_sigma(factor) + tau * tau / zeta2 * norm_m + dist / zeta2 - k);
}

FactorGrads factor_grads(std::span<const double> m, double delta, double gamma, const FactorL& factor) {
  const std::size_t n = m.size();
  require_same_size(n, factor.size(), "factor_grads factor");
  const double tau = factor.tau;
  const double rho = factor.rho;
  const double tau2 = tau * tau;

  FactorGrads g;
  g.n = n;
  g.w_delta = tau_slope(delta);
  g.w_gamma = rho_slope(gamma);
  g.dc_dm.assign((n - 1) * n, 0.0);
  g.da_dm.assign(n * n, 0.0);
  g.dc_dtau.assign(n - 1, 0.0);
  g.dc_drho.assign(n - 1, 0.0);
  g.dc_ddelta.assign(n - 1, 0.0);
  g.dc_dgamma.assign(n - 1, 0.0);
  g.da_ddelta.assign(n, 0.0);
  g.da_dgamma.assign(n, 0.0);
  g.u.assign(n - 1, 0.0);

  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double cp = factor.prev_c(i);
    const double* dcp = i == 0 ? nullptr : &g.dc_dm[(i - 1) * n];
    const double dcp_dtau = i == 0 ? 0.0 : g.dc_dtau[i - 1];
    const double dcp_drho = i == 0 ? 0.0 : g.dc_drho[i - 1];
    const double u = tau2 * m[i] * m[i] - cp * cp;
    if (!(u > 0.0)) throw DegenerateFactor("factor_grads: non-positive pivot");
    g.u[i] = u;
    const double su = std::sqrt(u);
    const double p = rho * tau2 * m[i] * m[i + 1];
    const double v = rho * tau2 * m[i + 1];
    const double ci = factor.c[i];
    double* dc = &g.dc_dm[i * n];

    // k < i: m_k enters only through c_{i-1}.
    if (dcp != nullptr) {
      const double chain = p * std::pow(u, -1.5) * cp;
      for (std::size_t k = 0; k < i; ++k) dc[k] = chain * dcp[k];
    }
    const double dcp_self = dcp == nullptr ? 0.0 : dcp[i];
    dc[i] = v * (su - m[i] / su * (tau2 * m[i] - cp * dcp_self)) / u;
    dc[i + 1] = rho * tau2 * m[i] / su;

    g.dc_dtau[i] = rho * tau * m[i] * m[i + 1] * (2.0 * su - tau / su * (tau * m[i] * m[i] - cp * dcp_dtau)) / u;
    g.dc_drho[i] = tau2 * m[i] * m[i + 1] * (su - rho / su * (-cp * dcp_drho)) / u;
    g.dc_ddelta[i] = g.w_delta * g.dc_dtau[i];
    g.dc_dgamma[i] = g.w_gamma * g.dc_drho[i];

    // a_i = rho tau^2 |m_i| |m_{i+1}| / c_i
    const double q = rho * tau2 * std::abs(m[i]) * std::abs(m[i + 1]);
    const double ci2 = ci * ci;
    double* da = &g.da_dm[i * n];
    for (std::size_t k = 0; k < i; ++k) da[k] = -q / ci2 * dc[k];
    da[i] = rho * tau2 * std::abs(m[i + 1]) * (sign(m[i]) * ci - std::abs(m[i]) * dc[i]) / ci2;
    da[i + 1] = rho * tau2 * std::abs(m[i]) * (sign(m[i + 1]) * ci - std::abs(m[i + 1]) * dc[i + 1]) / ci2;

    const double da_dtau = rho * tau * std::abs(m[i]) * std::abs(m[i + 1]) * (2.0 * ci - tau * g.dc_dtau[i]) / ci2;
    const double da_drho = tau2 * std::abs(m[i]) * std::abs(m[i + 1]) * (ci - rho * g.dc_drho[i]) / ci2;
    g.da_ddelta[i] = g.w_delta * da_dtau;
    g.da_dgamma[i] = g.w_gamma * da_drho;
  }

  // a_{n-1} = sqrt(tau^2 m_{n-1}^2 - c_{n-2}^2)
  const std::size_t l = n - 1;
  const double cp = factor.prev_c(l);
  const double* dcp = l == 0 ? nullptr : &g.dc_dm[(l - 1) * n];
  const double dcp_dtau = l == 0 ? 0.0 : g.dc_dtau[l - 1];
  const double dcp_drho = l == 0 ? 0.0 : g.dc_drho[l - 1];
  g.y = tau2 * m[l] * m[l] - cp * cp;
  if (!(g.y > 0.0)) throw DegenerateFactor("factor_grads: non-positive final pivot");
  const double inv_sy = 1.0 / std::sqrt(g.y);
  double* da = &g.da_dm[l * n];
  if (dcp != nullptr) {
    for (std::size_t k = 0; k < l; ++k) da[k] = -inv_sy * cp * dcp[k];
  }
  da[l] = inv_sy * (tau2 * m[l] - cp * (dcp == nullptr ? 0.0 : dcp[l]));
  g.da_ddelta[l] = g.w_delta * inv_sy * (tau * m[l] * m[l] - cp * dcp_dtau);
  g.da_dgamma[l] = g.w_gamma * inv_sy * (-cp * dcp_drho);
  return g;
}

WeightGrads weight_grads(std::span<const double> noise, const FactorGrads& grads) {
  const std::size_t n = grads.n;
  require_same_size(n, noise.size(), "weight_grads noise");
  WeightGrads w;
  w.n = n;
  w.dw_dm.assign(n * n, 0.0);
  w.dw_ddelta.assign(n, 0.0);
  w.dw_dgamma.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = &w.dw_dm[i * n];
    for (std::size_t k = 0; k < n; ++k) {
      double v = grads.da(i, k) * noise[i];
      if (i > 0) v += grads.dc(i - 1, k) * noise[i - 1];
      row[k] = v;
    }
    row[i] += 1.0;
    w.dw_ddelta[i] = grads.da_ddelta[i] * noise[i];
    w.dw_dgamma[i] = grads.da_dgamma[i] * noise[i];
    if (i > 0) {
      w.dw_ddelta[i] += grads.dc_ddelta[i - 1] * noise[i - 1];
      w.dw_dgamma[i] += grads.dc_dgamma[i - 1] * noise[i - 1];
    }
  }
  return w;
}

ParamGrads kl_grads(std::span<const double> m, double delta, double gamma, const FactorL& factor,
                    const FactorGrads& grads, const PriorSpec& prior) {
  (void)gamma;
  const std::size_t n = m.size();
  require_same_size(n, grads.n, "kl_grads tables");
  require_same_size(n, prior.mu.size(), "kl_grads prior mean");
  const double tau = factor.tau;
  const double zeta2 = prior.zeta * prior.zeta;

  ParamGrads out;
  out.dm.assign(n, 0.0);
  double norm_m = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    // da_i/dm_k vanishes for i < k - 1.
    const std::size_t first = k == 0 ? 0 : k - 1;
    double s = 0.0;
    for (std::size_t i = first; i < n; ++i) s += grads.da(i, k) / factor.a[i];
    out.dm[k] = -s + tau * tau / zeta2 * m[k] + (m[k] - prior.mu[k]) / zeta2;
    norm_m += m[k] * m[k];
  }
  double sd = 0.0;
  double sg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sd += grads.da_ddelta[i] / factor.a[i];
    sg += grads.da_dgamma[i] / factor.a[i];
  }
  out.ddelta = -sd + tau_slope(delta) * tau / zeta2 * norm_m;
  out.dgamma = -sg;
  return out;
}

ParamGrads chain_rule_backward(std::span<const double> dL_dw, const WeightGrads& wgrads) {
  const std::size_t n = wgrads.n;
  require_same_size(n, dL_dw.size(), "chain_rule_backward upstream");
  ParamGrads out;
  out.dm.assign(n, 0.0);
  for (std::size_t l = 0; l < n; ++l) {
    const double g = dL_dw[l];
    if (g == 0.0) continue;
    // dw_l/dm_k is zero for k > l + 1.
    const std::size_t last = std::min(n, l + 2);
    const double* row = &wgrads.dw_dm[l * n];
    for (std::size_t k = 0; k < last; ++k) out.dm[k] += g * row[k];
    out.ddelta += g * wgrads.dw_ddelta[l];
    out.dgamma += g * wgrads.dw_dgamma[l];
  }
  return out;
}

ParamGrads banded_backward(std::span<const double> m, double delta, double gamma, const FactorL& factor,
                           std::span<const double> noise, std::span<const double> dL_dw, double kl_scale,
                           const PriorSpec* prior) {
  const std::size_t n = m.size();
  require_same_size(n, factor.size(), "banded_backward factor");
  require_same_size(n, noise.size(), "banded_backward noise");
  require_same_size(n, dL_dw.size(), "banded_backward upstream");
  const bool with_kl = kl_scale != 0.0;
  if (with_kl) {
    if (prior == nullptr) throw Error("banded_backward: prior required when kl_scale != 0");
    require_same_size(n, prior->mu.size(), "banded_backward prior mean");
  }

  const double tau = factor.tau;
  const double rho = factor.rho;
  const double tau2 = tau * tau;

  ParamGrads out;
  out.dm.resize(n);
  double dtau = 0.0;
  double drho = 0.0;

  // Adjoints of the factor entries seeded by the direct dependencies of w and the KL.
  std::vector<double> abar(n);
  std::vector<double> cbar(n > 0 ? n - 1 : 0, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    abar[i] = dL_dw[i] * noise[i];
    out.dm[i] = dL_dw[i];
    if (i + 1 < n) cbar[i] = dL_dw[i + 1] * noise[i];
  }
  if (with_kl) {
    const double zeta2 = prior->zeta * prior->zeta;
    double norm_m = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      abar[i] -= kl_scale / factor.a[i];
      out.dm[i] += kl_scale * (tau2 / zeta2 * m[i] + (m[i] - prior->mu[i]) / zeta2);
      norm_m += m[i] * m[i];
    }
    dtau += kl_scale * tau / zeta2 * norm_m;
  }

  // Reverse sweep over the recursion.
  const std::size_t l = n - 1;
  {
    const double al = factor.a[l];
    out.dm[l] += abar[l] * tau2 * m[l] / al;
    dtau += abar[l] * tau * m[l] * m[l] / al;
    if (l > 0) cbar[l - 1] -= abar[l] * factor.c[l - 1] / al;
  }
  for (std::size_t i = l; i-- > 0;) {
    const double ai = factor.a[i];
    const double ci = factor.c[i];
    out.dm[i] += abar[i] * rho * tau2 * sign(m[i]) * std::abs(m[i + 1]) / ci;
    out.dm[i + 1] += abar[i] * rho * tau2 * std::abs(m[i]) * sign(m[i + 1]) / ci;
    dtau += abar[i] * 2.0 * ai / tau;
    drho += abar[i] * ai / rho;
    cbar[i] -= abar[i] * ai / ci;

    const double cp = factor.prev_c(i);
    const double u = tau2 * m[i] * m[i] - cp * cp;
    const double su = std::sqrt(u);
    const double cb = cbar[i];
    out.dm[i] += cb * (rho * tau2 * m[i + 1] / su - ci * tau2 * m[i] / u);
    out.dm[i + 1] += cb * rho * tau2 * m[i] / su;
    dtau += cb * (2.0 * ci / tau - ci * tau * m[i] * m[i] / u);
    drho += cb * ci / rho;
    if (i > 0) cbar[i - 1] += cb * ci * cp / u;
  }

  out.ddelta = dtau * tau_slope(delta);
  out.dgamma = drho * rho_slope(gamma);
  return out;
}

VariationalParams stabilize_params(VariationalParams params, const std::function<bool()>& coin) {
  if (params.gamma > -kGammaFloor && params.gamma < kGammaFloor) {
    params.gamma = coin() ? kGammaFloor : -kGammaFloor;
  }
  if (params.gamma > kGammaCap) params.gamma = kGammaCap;
  if (params.gamma < -kGammaCap) params.gamma = -kGammaCap;
  if (params.delta < kDeltaFloor) params.delta = kDeltaFloor;
  for (double& mk : params.m) {
    if (mk > -kMeanFloor && mk < kMeanFloor) mk = coin() ? kMeanFloor : -kMeanFloor;
  }
  return params;
}

}  // namespace cbnn
