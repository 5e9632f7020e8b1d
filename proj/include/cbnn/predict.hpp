#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "cbnn/net.hpp"

namespace cbnn {

struct Dataset;

inline constexpr std::size_t kDefaultDraws = 200;

// N softmax outputs for one example, row-major (draw, class).
struct SampleMatrix {
  std::size_t draws = 0;
  std::size_t classes = 0;
  std::vector<double> v;

  double operator()(std::size_t d, std::size_t c) const { return v[d * classes + c]; }
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

// Softmax outputs of `draws` parameter draws for every example of `inputs`. Draw d uses
// the keyed stream (seed, d) for all examples, so chunking and threads cannot change it.
std::vector<SampleMatrix> predictive_samples(Net& net, const Tensor& inputs, std::size_t draws, std::uint64_t seed);

// Mean of the sampled softmax vectors.
std::vector<double> mean_probs(const SampleMatrix& samples);

// Posterior-predictive class probabilities for every example of `inputs`.
std::vector<std::vector<double>> posterior_predictive(Net& net, const Tensor& inputs, std::size_t draws,
                                                      std::uint64_t seed);

// Linear interpolation between order statistics at position p * (N - 1).
double empirical_quantile(std::vector<double> values, double p);

// Per-class interval between the (1 - coverage)/2 and (1 + coverage)/2 quantiles.
std::vector<Interval> credible_intervals(const SampleMatrix& samples, double coverage);

// True iff the predicted class's lower end lies strictly above every other upper end.
bool certainty_classify(const std::vector<Interval>& intervals, std::size_t predicted);

struct CertaintyTable {
  double coverage = 0.0;
  std::size_t correct_certain = 0;
  std::size_t correct_uncertain = 0;
  std::size_t wrong_certain = 0;
  std::size_t wrong_uncertain = 0;
};

struct ExampleReport {
  std::size_t index = 0;
  int label = 0;
  std::size_t predicted = 0;
  std::vector<double> probs;
  std::vector<std::vector<Interval>> intervals;  // one set per coverage
  std::vector<bool> certain;                     // one flag per coverage
};

struct Evaluation {
  std::size_t draws = 0;
  std::vector<double> coverages;
  double error_rate = 0.0;
  std::vector<CertaintyTable> tables;  // one per coverage
  std::vector<ExampleReport> reports;
};

Evaluation evaluate(Net& net, const Dataset& data, std::size_t draws, const std::vector<double>& coverages,
                    std::uint64_t seed);

// index,label,predicted,p_0..,lo_0..,hi_0..,certain at coverages[which].
std::string report_csv(const Evaluation& eval, std::size_t which = 0);
// coverage,prediction,quite_certain,uncertain,total
std::string certainty_csv(const Evaluation& eval);
// draws,examples,error_rate
std::string error_csv(const Evaluation& eval);
// Per Bayesian layer: tau and rho of weights and biases.
std::string layer_summary_csv(const Net& net);
// draw,class_0..class_{C-1}
std::string samples_csv(const SampleMatrix& samples);

}  // namespace cbnn
