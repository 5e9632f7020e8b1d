#include <doctest.h>

#include <cmath>
#include <functional>
#include <numbers>

#include "cbnn/corrgauss.hpp"
#include "cbnn/errors.hpp"
#include "cbnn/rng.hpp"
#include "cbnn/verify.hpp"

using namespace cbnn;
namespace cv = cbnn::verify;

namespace {

// Scalar oracles in extended precision, written straight from the definitions.
long double softplus_ref(long double x) { return std::log1p(std::exp(x)); }
long double shifted_sigmoid_ref(long double x) { return 1.0L / (1.0L + std::exp(-x)) - 0.5L; }

std::vector<double> column_fd(const std::function<std::vector<double>(std::span<const double>)>& g,
                              std::vector<double> p, std::size_t j) {
  const double h = cv::kFdStep;
  const double keep = p[j];
  p[j] = keep + h;
  auto plus = g(p);
  p[j] = keep - h;
  auto minus = g(p);
  for (std::size_t i = 0; i < plus.size(); ++i) plus[i] = (plus[i] - minus[i]) / (2 * h);
  return plus;
}

FactorL factor_of(std::span<const double> p) {
  const std::size_t n = p.size() - 2;
  return build_factor(p.first(n), reparam_tau(p[n]), reparam_rho(p[n + 1]));
}

}  // namespace

TEST_SUITE("corrgauss") {

TEST_CASE("softplus reparameterization") {
  CHECK(reparam_tau(0.0) == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  const double floor_tau = reparam_tau(kDeltaFloor);
  CHECK(floor_tau == doctest::Approx(static_cast<double>(softplus_ref(kDeltaFloor))).epsilon(1e-14));
  CHECK(std::abs(floor_tau - 0.01) < 1e-8);
  CHECK(std::abs(reparam_tau(50.0) - 50.0) / 50.0 < 1e-12);
  CHECK(reparam_tau(-800.0) >= 0.0);
  CHECK(reparam_tau(800.0) == doctest::Approx(800.0));
  for (double d : {-30.0, -4.0, -1.0, 0.0, 2.0, 30.0}) {
    CHECK(reparam_tau(d) > 0.0);
    const double fd = (reparam_tau(d + 1e-6) - reparam_tau(d - 1e-6)) / 2e-6;
    CHECK(tau_slope(d) == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("shifted sigmoid reparameterization") {
  CHECK(reparam_rho(0.0) == 0.0);
  CHECK(reparam_rho(10.0) == doctest::Approx(static_cast<double>(shifted_sigmoid_ref(10.0L))).epsilon(1e-15));
  CHECK(std::abs(reparam_rho(10.0) - 0.4999546) < 1e-7);
  CHECK(std::abs(reparam_rho(kGammaFloor)) == doctest::Approx(0.01).epsilon(1e-6));
  for (double g : {0.04, 0.3, 1.7, 5.0, 10.0}) {
    CHECK(reparam_rho(-g) == -reparam_rho(g));
    const double fd = (reparam_rho(g + 1e-6) - reparam_rho(g - 1e-6)) / 2e-6;
    CHECK(rho_slope(g) == doctest::Approx(fd).epsilon(1e-6));
    CHECK(rho_slope(g) == doctest::Approx(std::exp(-g) / std::pow(1 + std::exp(-g), 2)).epsilon(1e-12));
  }
  for (double g = -kGammaCap; g <= kGammaCap; g += 0.25) {
    CHECK(reparam_rho(g) > -0.5);
    CHECK(reparam_rho(g) < 0.5);
  }
}

TEST_CASE("positive-definiteness bound") {
  CHECK(std::isinf(rho_bound(1)));
  CHECK(rho_bound(2) == doctest::Approx(1.0));
  CHECK(rho_bound(3) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(rho_bound(1'000'000) > 0.5);
}

TEST_CASE("single-element chain") {
  const std::vector<double> m{2.0};
  for (double rho : {-0.3, 0.01, 0.45}) {
    const FactorL f = build_factor(m, 0.5, rho);
    REQUIRE(f.a.size() == 1);
    CHECK(f.c.empty());
    CHECK(f.a[0] == doctest::Approx(1.0).epsilon(1e-15));
  }
}

TEST_CASE("factor reproduces the tridiagonal covariance") {
  for (const auto& m : {std::vector<double>{1, 2, 3}, std::vector<double>{1, -2, 3}}) {
    const FactorL f = build_factor(m, 0.5, 0.2);
    const cv::Matrix sigma = cv::dense_sigma(m, 0.5, 0.2);
    const cv::Matrix prod = cv::factor_product(f);
    CHECK(sigma(0, 0) == doctest::Approx(0.25));
    CHECK(sigma(1, 1) == doctest::Approx(1.0));
    CHECK(sigma(2, 2) == doctest::Approx(2.25));
    CHECK(sigma(0, 1) == doctest::Approx(0.1));
    CHECK(sigma(1, 2) == doctest::Approx(0.3));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) CHECK(prod(i, j) == doctest::Approx(sigma(i, j)).epsilon(1e-12));
    CHECK(prod(0, 2) == 0.0);
  }
  const std::vector<double> mixed{1, -2, 3};
  const FactorL f = build_factor(mixed, 0.5, 0.2);
  CHECK(f.c[0] < 0.0);
  CHECK(f.a[0] < 0.0);
  CHECK(cv::factor_product(f)(0, 1) > 0.0);
  CHECK(cv::factor_product(f)(1, 2) > 0.0);
}

TEST_CASE("factor errors") {
  const std::vector<double> m{1, 2, 3};
  CHECK_THROWS_AS(build_factor(m, 0.5, 0.0), InvalidRho);
  CHECK_THROWS_AS(build_factor(m, 0.5, 0.72), InvalidRho);
  CHECK_THROWS_AS(build_factor(m, 0.5, -0.72), InvalidRho);
  CHECK_NOTHROW(build_factor(m, 0.5, 0.70));
  const std::vector<double> zero{1, 0, 3};
  CHECK_THROWS_AS(build_factor(zero, 0.5, 0.2), DegenerateFactor);
  CHECK_THROWS_AS(build_factor(m, 0.0, 0.2), DegenerateFactor);
}

TEST_CASE("eigenvalues stay positive up to |rho| = 0.49") {
  KeyedRng rng(11);
  for (std::size_t n : {2u, 5u, 17u, 64u}) {
    std::vector<double> m(n);
    for (auto& v : m) v = (rng.coin() ? 1 : -1) * rng.uniform(0.1, 3.0);
    for (double rho : {-0.49, 0.49}) {
      const auto ev = cv::symmetric_eigenvalues(cv::factor_product(build_factor(m, 0.8, rho)));
      CHECK(ev.front() > 0.0);
    }
  }
}

TEST_CASE("sampling") {
  const std::vector<double> m{1.0, 1.0};
  const FactorL f = build_factor(m, 0.7, 0.3);
  const std::vector<double> zero{0.0, 0.0};
  CHECK(sample(m, f, zero) == m);
  const std::vector<double> e1{1.0, 0.0};
  const auto w = sample(m, f, e1);
  CHECK(w[0] == 1.0 + f.a[0]);
  CHECK(w[1] == 1.0 + f.c[0]);
  const std::vector<double> x{0.3, -1.2};
  CHECK(sample(m, f, x) == sample(m, f, x));
  CHECK_THROWS_AS(sample(m, f, std::vector<double>{1.0}), ShapeMismatch);
}

TEST_CASE("log determinant") {
  FactorL ones{{1, 1, 1}, {0.5, 0.5}, 1, 0.1};
  CHECK(log_det_sigma(ones) == 0.0);
  FactorL f23{{2, 3}, {0.1}, 1, 0.1};
  CHECK(log_det_sigma(f23) == doctest::Approx(std::log(36.0)).epsilon(1e-15));
  FactorL bad{{2, 0}, {0.1}, 1, 0.1};
  CHECK_THROWS_AS(log_det_sigma(bad), DegenerateFactor);
  for (std::uint64_t k = 0; k < 5; ++k) {
    const auto r = cv::random_instance(4, 77, k);
    const FactorL f = build_factor(r.m, r.tau, r.rho);
    CHECK(std::abs(log_det_sigma(f) - cv::lu_log_abs_det(cv::dense_sigma(r.m, r.tau, r.rho))) < 1e-9);
  }
}

TEST_CASE("KL divergence value") {
  // m = mu = (1, 1), zeta = tau = 1: Sigma = [[1, rho], [rho, 1]], so the closed form
  // collapses to -1/2 ln(1 - rho^2).
  const std::vector<double> m{1.0, 1.0};
  const double rho = reparam_rho(kGammaFloor);
  const double kl = kl_to_prior(m, 1.0, build_factor(m, 1.0, rho), PriorSpec{m, 1.0});
  const double oracle = -0.5 * std::log1p(-rho * rho);
  CHECK(kl == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(kl > 0.0);
  CHECK(kl < 0.01);

  for (std::uint64_t k = 0; k < 40; ++k) {
    const auto r = cv::random_instance(1 + k % 9, 5, k);
    KeyedRng rng(k);
    PriorSpec prior{std::vector<double>(r.m.size()), rng.uniform(0.3, 3.0)};
    for (auto& v : prior.mu) v = rng.uniform(-2, 2);
    CHECK(kl_to_prior(r.m, r.tau, build_factor(r.m, r.tau, r.rho), prior) >= 0.0);
  }

  const std::vector<double> m4{1, -1, 2, 0.5};
  const PriorSpec p4{{0, 0, 0, 0}, 1.0};
  const double analytic = kl_to_prior(m4, 0.3, build_factor(m4, 0.3, 0.2), p4);
  const auto mc = cv::mc_kl(m4, 0.3, 0.2, p4, 1'000'000, 99);
  CHECK(std::abs(analytic - mc.mean) < 3 * mc.standard_error);
}

TEST_CASE("factor derivatives, single element") {
  for (double m0 : {-1.7, 0.4}) {
    const std::vector<double> m{m0};
    const double delta = -0.3, gamma = 0.8;
    const FactorL f = build_factor(m, reparam_tau(delta), reparam_rho(gamma));
    const FactorGrads g = factor_grads(m, delta, gamma, f);
    CHECK(g.da(0, 0) == doctest::Approx(reparam_tau(delta) * (m0 < 0 ? -1 : 1)));
    CHECK(g.da_ddelta[0] == doctest::Approx(tau_slope(delta) * std::abs(m0)));
    CHECK(g.da_dgamma[0] == 0.0);
  }
}

TEST_CASE("factor derivatives: sparsity and finite differences") {
  for (std::uint64_t k = 0; k < 10; ++k) {
    const auto r = cv::random_instance(5, 21, k);
    const FactorGrads g = factor_grads(r.m, r.delta, r.gamma, build_factor(r.m, r.tau, r.rho));
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t col = i + 2; col < 5; ++col) {
        CHECK(g.da(i, col) == 0.0);
        if (i < 4) CHECK(g.dc(i, col) == 0.0);
      }
    }
    std::vector<double> p = r.m;
    p.push_back(r.delta);
    p.push_back(r.gamma);
    const auto entries = [](std::span<const double> q) {
      const FactorL f = factor_of(q);
      std::vector<double> v = f.a;
      v.insert(v.end(), f.c.begin(), f.c.end());
      return v;
    };
    for (std::size_t j = 0; j < 7; ++j) {
      const auto num = column_fd(entries, p, j);
      std::vector<double> ana;
      for (std::size_t i = 0; i < 5; ++i) ana.push_back(j < 5 ? g.da(i, j) : j == 5 ? g.da_ddelta[i] : g.da_dgamma[i]);
      for (std::size_t i = 0; i < 4; ++i) ana.push_back(j < 5 ? g.dc(i, j) : j == 5 ? g.dc_ddelta[i] : g.dc_dgamma[i]);
      CHECK(cv::worst_relative_error(ana, num) < 1e-4);
    }
  }
}

TEST_CASE("weight derivatives") {
  const auto r = cv::random_instance(5, 3, 0);
  const FactorL f = build_factor(r.m, r.tau, r.rho);
  const FactorGrads fg = factor_grads(r.m, r.delta, r.gamma, f);

  const WeightGrads at_zero = weight_grads(std::vector<double>(5, 0.0), fg);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t k = 0; k < 5; ++k) CHECK(at_zero.dm(i, k) == (i == k ? 1.0 : 0.0));
    CHECK(at_zero.dw_ddelta[i] == 0.0);
    CHECK(at_zero.dw_dgamma[i] == 0.0);
  }

  const std::vector<double> m1{-0.8};
  const FactorL f1 = build_factor(m1, reparam_tau(0.2), reparam_rho(1.0));
  const WeightGrads w1 = weight_grads(std::vector<double>{0.7}, factor_grads(m1, 0.2, 1.0, f1));
  CHECK(w1.dm(0, 0) == doctest::Approx(1.0 - reparam_tau(0.2) * 0.7));

  KeyedRng rng(8);
  std::vector<double> x(5);
  for (auto& v : x) v = rng.normal();
  const WeightGrads wg = weight_grads(x, fg);
  std::vector<double> p = r.m;
  p.push_back(r.delta);
  p.push_back(r.gamma);
  const auto draw = [&x](std::span<const double> q) { return sample(q.first(5), factor_of(q), x); };
  for (std::size_t j = 0; j < 7; ++j) {
    const auto num = column_fd(draw, p, j);
    std::vector<double> ana;
    for (std::size_t i = 0; i < 5; ++i) ana.push_back(j < 5 ? wg.dm(i, j) : j == 5 ? wg.dw_ddelta[i] : wg.dw_dgamma[i]);
    CHECK(cv::worst_relative_error(ana, num) < 1e-4);
  }
}

TEST_CASE("KL derivatives") {
  for (std::uint64_t k = 0; k < 6; ++k) {
    const auto r = cv::random_instance(4, 31, k);
    KeyedRng rng(k + 100);
    PriorSpec prior{{}, rng.uniform(0.5, 2.0)};
    for (int i = 0; i < 4; ++i) prior.mu.push_back(rng.uniform(-1, 1));
    const FactorL f = build_factor(r.m, r.tau, r.rho);
    const FactorGrads fg = factor_grads(r.m, r.delta, r.gamma, f);
    const ParamGrads g = kl_grads(r.m, r.delta, r.gamma, f, fg, prior);
    std::vector<double> p = r.m;
    p.push_back(r.delta);
    p.push_back(r.gamma);
    const auto num = cv::finite_diff(
        [&prior](std::span<const double> q) { return kl_to_prior(q.first(4), reparam_tau(q[4]), factor_of(q), prior); }, p);
    std::vector<double> ana = g.dm;
    ana.push_back(g.ddelta);
    ana.push_back(g.dgamma);
    CHECK(cv::worst_relative_error(ana, num) < 1e-4);
  }

  // With mu = m the prior-mean term vanishes.
  const auto r = cv::random_instance(4, 31, 50);
  const FactorL f = build_factor(r.m, r.tau, r.rho);
  const FactorGrads fg = factor_grads(r.m, r.delta, r.gamma, f);
  const PriorSpec same{r.m, 1.3};
  const ParamGrads g = kl_grads(r.m, r.delta, r.gamma, f, fg, same);
  for (std::size_t k = 0; k < 4; ++k) {
    double expect = r.tau * r.tau / (1.3 * 1.3) * r.m[k];
    for (std::size_t i = 0; i < 4; ++i) expect -= fg.da(i, k) / f.a[i];
    CHECK(g.dm[k] == doctest::Approx(expect).epsilon(1e-12));
  }

  // Symmetric point: all |m_i| equal; only the finite-difference check applies.
  const std::vector<double> sym{0.9, -0.9, 0.9, 0.9};
  const double delta = -1.0, gamma = -0.7;
  const FactorL fs = build_factor(sym, reparam_tau(delta), reparam_rho(gamma));
  const ParamGrads gs = kl_grads(sym, delta, gamma, fs, factor_grads(sym, delta, gamma, fs), same);
  const PriorSpec p0{{0, 0, 0, 0}, 1.3};
  const ParamGrads gs0 = kl_grads(sym, delta, gamma, fs, factor_grads(sym, delta, gamma, fs), p0);
  std::vector<double> q = sym;
  q.push_back(delta);
  q.push_back(gamma);
  const auto num = cv::finite_diff(
      [&p0](std::span<const double> v) { return kl_to_prior(v.first(4), reparam_tau(v[4]), factor_of(v), p0); }, q);
  CHECK(std::abs(gs0.dgamma - num[5]) < 1e-4 * std::max(1.0, std::abs(num[5])));
  CHECK(gs.dgamma == doctest::Approx(gs0.dgamma).epsilon(1e-12));
}

TEST_CASE("chain rule backward") {
  const auto r = cv::random_instance(6, 41, 0);
  const FactorL f = build_factor(r.m, r.tau, r.rho);
  const FactorGrads fg = factor_grads(r.m, r.delta, r.gamma, f);
  KeyedRng rng(3);
  std::vector<double> x(6), dw(6);
  for (auto& v : x) v = rng.normal();
  for (auto& v : dw) v = rng.uniform(-1, 1);

  const ParamGrads none = chain_rule_backward(std::vector<double>(6, 0.0), weight_grads(x, fg));
  for (double v : none.dm) CHECK(v == 0.0);
  CHECK(none.ddelta == 0.0);
  CHECK(none.dgamma == 0.0);

  const ParamGrads ident = chain_rule_backward(dw, weight_grads(std::vector<double>(6, 0.0), fg));
  CHECK(ident.dm == dw);

  const ParamGrads g = chain_rule_backward(dw, weight_grads(x, fg));
  std::vector<double> p = r.m;
  p.push_back(r.delta);
  p.push_back(r.gamma);
  const auto num = cv::finite_diff(
      [&](std::span<const double> q) {
        const auto w = sample(q.first(6), factor_of(q), x);
        double s = 0;
        for (int i = 0; i < 6; ++i) s += dw[i] * w[i];
        return s;
      },
      p);
  std::vector<double> ana = g.dm;
  ana.push_back(g.ddelta);
  ana.push_back(g.dgamma);
  CHECK(cv::worst_relative_error(ana, num) < 1e-4);
}

TEST_CASE("banded adjoint equals the dense tables") {
  for (std::size_t n : {1u, 2u, 7u, 30u}) {
    const auto r = cv::random_instance(n, 51, n);
    const FactorL f = build_factor(r.m, r.tau, r.rho);
    const FactorGrads fg = factor_grads(r.m, r.delta, r.gamma, f);
    KeyedRng rng(n);
    std::vector<double> x(n), dw(n);
    for (auto& v : x) v = rng.normal();
    for (auto& v : dw) v = rng.uniform(-1, 1);
    PriorSpec prior{std::vector<double>(n, 0.1), 0.7};
    const double nu = 0.37;
    const ParamGrads dense = chain_rule_backward(dw, weight_grads(x, fg));
    const ParamGrads kl = kl_grads(r.m, r.delta, r.gamma, f, fg, prior);
    const ParamGrads banded = banded_backward(r.m, r.delta, r.gamma, f, x, dw, nu, &prior);
    for (std::size_t k = 0; k < n; ++k) CHECK(banded.dm[k] == doctest::Approx(dense.dm[k] + nu * kl.dm[k]).epsilon(1e-9));
    CHECK(banded.ddelta == doctest::Approx(dense.ddelta + nu * kl.ddelta).epsilon(1e-9));
    CHECK(banded.dgamma == doctest::Approx(dense.dgamma + nu * kl.dgamma).epsilon(1e-9));
  }
}

TEST_CASE("stabilization") {
  const auto heads = [] { return true; };
  const auto tails = [] { return false; };
  VariationalParams p{{0.0, 0.5, -3e-7, 2.0}, -7.0, 0.0};
  const auto up = stabilize_params(p, heads);
  const auto down = stabilize_params(p, tails);
  CHECK(up.gamma == kGammaFloor);
  CHECK(down.gamma == -kGammaFloor);
  CHECK(up.delta == kDeltaFloor);
  CHECK(up.m[0] == 1e-6);
  CHECK(down.m[0] == -1e-6);
  CHECK(up.m[2] == 1e-6);
  CHECK(up.m[1] == 0.5);
  CHECK(up.m[3] == 2.0);

  CHECK(stabilize_params({{1.0}, 0.3, 25.0}, heads).gamma == kGammaCap);
  CHECK(stabilize_params({{1.0}, 0.3, -25.0}, heads).gamma == -kGammaCap);
  CHECK(stabilize_params({{1.0}, 0.3, 0.03}, tails).gamma == -kGammaFloor);
  const VariationalParams fine{{-1.5, 0.2}, -2.0, -0.5};
  CHECK(stabilize_params(fine, heads) == fine);

  // Worst case allowed after stabilization: |rho| just under 1/2 on a chain of 10^6.
  KeyedRng rng(4);
  VariationalParams big{std::vector<double>(1'000'000), -9.0, 40.0};
  for (auto& v : big.m) v = rng.uniform(-1e-6, 1e-6) * (rng.coin() ? 1.0 : 1e6);
  const auto s = stabilize_params(big, [&rng] { return rng.coin(); });
  CHECK_NOTHROW(build_factor(s.m, reparam_tau(s.delta), reparam_rho(s.gamma)));
}

}  // TEST_SUITE
