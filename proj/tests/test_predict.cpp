#include <doctest.h>

#include <cmath>

#include "cbnn/data.hpp"
#include "cbnn/errors.hpp"
#include "cbnn/predict.hpp"

using namespace cbnn;

namespace {

SampleMatrix one_class(std::vector<double> values) {
  return {values.size(), 1, std::move(values)};
}

Dataset tiny_blobs() { return synthetic_blobs(3, 30, 4, 8.0, 5); }

Net trained_like_net(Mode mode) {
  const Dataset d = tiny_blobs();
  Checkpoint ck(Net(d.shape, {{LayerKind::dense, 6}, {LayerKind::relu}, {LayerKind::dense, 3}}, mode, 2), 1);
  TrainConfig c;
  c.batch_size = 16;
  c.iterations = 150;
  c.log_every = 0;
  train(ck, d, nullptr, c);
  return ck.net;
}

}  // namespace

TEST_SUITE("predict") {

TEST_CASE("quantile rule") {
  const std::vector<double> v{0.5, 0.1, 0.4, 0.2, 0.3};
  CHECK(empirical_quantile(v, 0.025) == doctest::Approx(0.11).epsilon(1e-12));
  CHECK(empirical_quantile(v, 0.975) == doctest::Approx(0.49).epsilon(1e-12));
  CHECK(empirical_quantile(v, 0.0) == 0.1);
  CHECK(empirical_quantile(v, 1.0) == 0.5);
  CHECK(empirical_quantile(v, 0.5) == 0.3);
  CHECK(empirical_quantile({7.0}, 0.3) == 7.0);
  CHECK_THROWS_AS(empirical_quantile({}, 0.5), Error);

  const auto iv = credible_intervals(one_class({0.1, 0.2, 0.3, 0.4, 0.5}), 0.95);
  CHECK(iv[0].lo == doctest::Approx(0.11).epsilon(1e-12));
  CHECK(iv[0].hi == doctest::Approx(0.49).epsilon(1e-12));
  CHECK_THROWS_AS(credible_intervals(one_class({0.1, 0.2}), 1.0), Error);
  CHECK_THROWS_AS(credible_intervals(one_class({0.1, 0.2}), 0.0), Error);
}

TEST_CASE("identical samples give degenerate intervals") {
  SampleMatrix s{4, 2, {0.3, 0.7, 0.3, 0.7, 0.3, 0.7, 0.3, 0.7}};
  const auto iv = credible_intervals(s, 0.95);
  CHECK(iv[0].lo == 0.3);
  CHECK(iv[0].hi == 0.3);
  CHECK(iv[1].lo == 0.7);
  CHECK(iv[1].hi == 0.7);
  CHECK(mean_probs(s)[1] == doctest::Approx(0.7));
}

TEST_CASE("higher coverage nests the lower one") {
  KeyedRng rng(3);
  SampleMatrix s{200, 3, std::vector<double>(600)};
  for (auto& v : s.v) v = rng.uniform();
  const auto a = credible_intervals(s, 0.95);
  const auto b = credible_intervals(s, 0.99);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(b[c].lo <= a[c].lo);
    CHECK(b[c].hi >= a[c].hi);
    CHECK(a[c].lo <= a[c].hi);
  }
}

TEST_CASE("certainty rule") {
  CHECK(certainty_classify({{0.9, 1.0}, {0.0, 0.05}, {0.0, 0.02}}, 0));
  CHECK_FALSE(certainty_classify({{0.4, 0.7}, {0.3, 0.5}}, 0));
  CHECK_FALSE(certainty_classify({{0.5, 0.9}, {0.2, 0.5}}, 0));
  CHECK(certainty_classify({{0.2, 0.3}, {0.5, 0.6}}, 1));
  CHECK_THROWS_AS(certainty_classify({{0.2, 0.3}}, 1), IndexOutOfRange);
}

TEST_CASE("single draw") {
  Net net = trained_like_net(Mode::bayesian);
  const Dataset d = tiny_blobs();
  const auto s = predictive_samples(net, d.images, 1, 4);
  const auto logits = net.forward(d.images, {false, 4, 0, NoiseMode::sample});
  for (std::size_t i = 0; i < d.size(); i += 11) {
    const auto p = softmax(logits.row(i));
    REQUIRE(s[i].draws == 1);
    for (std::size_t c = 0; c < 3; ++c) CHECK(s[i](0, c) == p[c]);
  }
}

TEST_CASE("vanishing variance approaches the deterministic pass") {
  Net bayes = trained_like_net(Mode::bayesian);
  Net freq(bayes.input_shape(), bayes.specs(), Mode::frequentist, 1);
  for (std::size_t i = 0; i < bayes.layers().size(); ++i) {
    auto* b = dynamic_cast<ParametricLayer*>(bayes.layers()[i].get());
    if (b == nullptr) continue;
    auto& f = static_cast<ParametricLayer&>(*freq.layers()[i]);
    for (auto* g : {&b->weight_group(), &b->bias_group()}) {
      g->params.delta = kDeltaFloor;
      g->params.gamma = kGammaFloor;
    }
    f.weights() = b->weight_group().params.m;
    f.biases() = b->bias_group().params.m;
  }
  const Dataset d = tiny_blobs();
  const auto probs = posterior_predictive(bayes, d.images, 50, 9);
  const auto logits = freq.forward(d.images, {false, 0, 0, NoiseMode::sample});
  double worst = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto p = softmax(logits.row(i));
    for (std::size_t c = 0; c < 3; ++c) worst = std::max(worst, std::abs(p[c] - probs[i][c]));
  }
  CHECK(worst < 0.02);
}

TEST_CASE("Monte-Carlo consistency") {
  Net net = trained_like_net(Mode::bayesian);
  const Dataset d = tiny_blobs();
  const std::vector<std::size_t> pick{0, 1, 2, 45, 89};
  const Tensor x = d.gather(pick);
  const auto small = predictive_samples(net, x, 200, 3);
  const auto big = predictive_samples(net, x, 2000, 3);
  for (std::size_t i = 0; i < pick.size(); ++i) {
    const auto m_small = mean_probs(small[i]);
    const auto m_big = mean_probs(big[i]);
    double sum = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      double var = 0;
      for (std::size_t k = 0; k < 2000; ++k) var += std::pow(big[i](k, c) - m_big[c], 2);
      var /= 1999;
      const double se = std::sqrt(var / 200 + var / 2000);
      CHECK(std::abs(m_small[c] - m_big[c]) <= 3 * se + 1e-12);
      sum += m_big[c];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("spread of the estimate halves from N to 4N") {
  Net net = trained_like_net(Mode::bayesian);
  const Dataset d = tiny_blobs();
  // Use the example whose draws disagree most, so the spread is not dominated by rare outliers.
  const auto all = predictive_samples(net, d.images, 100, 1);
  std::size_t pick = 0;
  double widest = -1;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto m = mean_probs(all[i]);
    double v = 0;
    for (std::size_t k = 0; k < 100; ++k)
      for (std::size_t c = 0; c < 3; ++c) v += std::pow(all[i](k, c) - m[c], 2);
    if (v > widest) {
      widest = v;
      pick = i;
    }
  }
  const std::vector<std::size_t> one{pick};
  const Tensor x = d.gather(one);
  const auto spread = [&](std::size_t draws) {
    constexpr std::size_t kRepeats = 60;
    std::vector<std::vector<double>> means;
    for (std::size_t r = 0; r < kRepeats; ++r) means.push_back(mean_probs(predictive_samples(net, x, draws, 1000 + r)[0]));
    double total = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      double mu = 0, var = 0;
      for (const auto& m : means) mu += m[c] / kRepeats;
      for (const auto& m : means) var += (m[c] - mu) * (m[c] - mu) / (kRepeats - 1);
      total += var;
    }
    return std::sqrt(total);
  };
  const double ratio = spread(200) / spread(50);
  CHECK(ratio > 0.35);
  CHECK(ratio < 0.7);
}

TEST_CASE("evaluation on a trivially saturated net") {
  Dataset d;
  d.shape = {2, 1, 1};
  d.class_count = 2;
  d.images = Tensor({5, 2}, 1.0);
  d.labels.assign(5, 1);
  Net net(d.shape, {{LayerKind::dense, 2}}, Mode::bayesian, 1);
  auto& l = static_cast<ParametricLayer&>(*net.layers()[0]);
  l.weight_group().params.m = {-1e-3, -1e-3, 1e-3, 1e-3};
  l.bias_group().params.m = {-20.0, 20.0};
  const auto ev = evaluate(net, d, 30, {0.95, 0.99}, 1);
  CHECK(ev.error_rate == 0.0);
  for (const auto& t : ev.tables) {
    CHECK(t.correct_certain == 5);
    CHECK(t.correct_uncertain + t.wrong_certain + t.wrong_uncertain == 0);
  }
  CHECK_THROWS_AS(evaluate(net, Dataset{}, 5, {0.95}, 1), DataError);
}

TEST_CASE("frequentist evaluation with one draw is the plain test error") {
  Net net = trained_like_net(Mode::frequentist);
  const Dataset d = tiny_blobs();
  const auto ev = evaluate(net, d, 1, {0.95}, 7);
  CHECK(ev.error_rate == single_draw_error(net, d, 7, 0));
}

TEST_CASE("certain sets shrink with coverage") {
  Net net = trained_like_net(Mode::bayesian);
  const Dataset d = tiny_blobs();
  const auto ev = evaluate(net, d, 40, {0.9, 0.95, 0.99}, 2);
  for (const auto& r : ev.reports) {
    CHECK((!r.certain[1] || r.certain[0]));
    CHECK((!r.certain[2] || r.certain[1]));
    for (const auto& set : r.intervals)
      for (const auto& iv : set) {
        CHECK(iv.lo >= 0.0);
        CHECK(iv.hi <= 1.0);
      }
  }
}

TEST_CASE("csv layouts") {
  Net net = trained_like_net(Mode::bayesian);
  const Dataset d = tiny_blobs();
  const auto ev = evaluate(net, d, 10, {0.95}, 2);
  const auto head = [](const std::string& s) { return s.substr(0, s.find('\n')); };
  CHECK(head(report_csv(ev)) == "index,label,predicted,p_0,p_1,p_2,lo_0,lo_1,lo_2,hi_0,hi_1,hi_2,certain");
  CHECK(head(certainty_csv(ev)) == "coverage,prediction,quite_certain,uncertain,total");
  CHECK(head(error_csv(ev)) == "draws,examples,error_rate");
  CHECK(head(layer_summary_csv(net)) == "layer,kind,tau_w,rho_w,tau_b,rho_b");
  const auto s = predictive_samples(net, d.gather(std::vector<std::size_t>{0}), 1, 2);
  const auto csv = samples_csv(s[0]);
  CHECK(head(csv) == "draw,class_0,class_1,class_2");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
  CHECK_THROWS_AS(report_csv(ev, 1), IndexOutOfRange);
}

}  // TEST_SUITE
