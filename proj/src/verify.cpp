#include "cbnn/verify.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cbnn/errors.hpp"
#include "cbnn/rng.hpp"

namespace cbnn::verify {

std::vector<double> finite_diff(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> point, double step) {
  std::vector<double> p(point.begin(), point.end());
  std::vector<double> g(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double orig = p[k];
    p[k] = orig + step;
    const double up = f(p);
    p[k] = orig - step;
    const double down = f(p);
    p[k] = orig;
    g[k] = (up - down) / (2.0 * step);
  }
  return g;
}

Matrix dense_sigma(std::span<const double> m, double tau, double rho) {
  const std::size_t n = m.size();
  Matrix s(n);
  for (std::size_t i = 0; i < n; ++i) {
    s(i, i) = tau * tau * m[i] * m[i];
    if (i + 1 < n) {
      const double cov = rho * tau * tau * std::abs(m[i]) * std::abs(m[i + 1]);
      s(i, i + 1) = cov;
      s(i + 1, i) = cov;
    }
  }
  return s;
}

Matrix reference_cholesky(const Matrix& a) {
  const std::size_t n = a.n;
  Matrix l(n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0)) throw NotPositiveDefinite("reference_cholesky: pivot " + std::to_string(j) + " not positive");
    l(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

Matrix multiply_lower_transpose(const Matrix& lower) {
  const std::size_t n = lower.n;
  Matrix out(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k <= std::min(i, j); ++k) s += lower(i, k) * lower(j, k);
      out(i, j) = s;
    }
  }
  return out;
}

Matrix factor_product(const FactorL& factor) {
  Matrix l(factor.size());
  for (std::size_t i = 0; i < factor.size(); ++i) {
    l(i, i) = factor.a[i];
    if (i > 0) l(i, i - 1) = factor.c[i - 1];
  }
  return multiply_lower_transpose(l);
}

double lu_log_abs_det(Matrix a) {
  const std::size_t n = a.n;
  double log_det = 0.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
    }
    if (a(pivot, col) == 0.0) throw NotPositiveDefinite("lu_log_abs_det: singular matrix");
    if (pivot != col) {
      for (std::size_t k = 0; k < n; ++k) std::swap(a(pivot, k), a(col, k));
    }
    const double p = a(col, col);
    log_det += std::log(std::abs(p));
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a(r, col) / p;
      if (f == 0.0) continue;
      for (std::size_t k = col; k < n; ++k) a(r, k) -= f * a(col, k);
    }
  }
  return log_det;
}

std::vector<double> symmetric_eigenvalues(Matrix a) {
  const std::size_t n = a.n;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a(p, q) == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

Estimate mc_kl(std::span<const double> m, double tau, double rho, const PriorSpec& prior,
               std::size_t sample_count, std::uint64_t seed) {
  const std::size_t n = m.size();
  const Matrix sigma = dense_sigma(m, tau, rho);
  const Matrix l = reference_cholesky(sigma);
  const double log_det = lu_log_abs_det(sigma);
  const double zeta2 = prior.zeta * prior.zeta;
  // Both densities share the -n/2 ln(2 pi) term, which cancels in the ratio.
  const double log_q_const = -0.5 * log_det;
  const double log_p_const = -0.5 * static_cast<double>(n) * std::log(zeta2);

  KeyedRng rng(seed, 0, Stream::verify, 0);
  std::vector<double> x(n), w(n), z(n);
  double sum = 0.0;
  double sum_sq = 0.0;
  for (std::size_t s = 0; s < sample_count; ++s) {
    for (auto& xi : x) xi = rng.normal();
    for (std::size_t i = 0; i < n; ++i) {
      double v = m[i];
      for (std::size_t k = 0; k <= i; ++k) v += l(i, k) * x[k];
      w[i] = v;
    }
    // Forward substitution L z = w - m recovers the whitened point for the q density.
    double quad_q = 0.0;
    double quad_p = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double r = w[i] - m[i];
      for (std::size_t k = 0; k < i; ++k) r -= l(i, k) * z[k];
      z[i] = r / l(i, i);
      quad_q += z[i] * z[i];
      const double d = w[i] - prior.mu[i];
      quad_p += d * d / zeta2;
    }
    const double ratio = (log_q_const - 0.5 * quad_q) - (log_p_const - 0.5 * quad_p);
    sum += ratio;
    sum_sq += ratio * ratio;
  }
  const double count = static_cast<double>(sample_count);
  const double mean = sum / count;
  const double var = std::max(0.0, (sum_sq / count - mean * mean) * count / (count - 1.0));
  return {mean, std::sqrt(var / count)};
}

double relative_error(double a, double b, double floor) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return denom == 0.0 ? 0.0 : std::abs(a - b) / denom;
}

double worst_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double scale = 0.0;
  for (double v : analytic) scale = std::max(scale, std::abs(v));
  const double floor = std::max(1e-3 * scale, 1e-10);
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, relative_error(analytic[i], numeric[i], floor));
  }
  return worst;
}

RandomInstance random_instance(std::size_t n, std::uint64_t seed, std::uint64_t index) {
  KeyedRng rng(seed, n, Stream::verify, index);
  RandomInstance r;
  r.m.resize(n);
  for (auto& v : r.m) v = (rng.coin() ? 1.0 : -1.0) * rng.uniform(0.2, 2.0);
  r.delta = rng.uniform(-3.0, 1.0);
  r.gamma = (rng.coin() ? 1.0 : -1.0) * rng.uniform(0.1, 3.0);
  r.tau = reparam_tau(r.delta);
  r.rho = reparam_rho(r.gamma);
  return r;
}

}  // namespace cbnn::verify
