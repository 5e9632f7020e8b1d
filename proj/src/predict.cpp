#include "cbnn/predict.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "cbnn/data.hpp"
#include "cbnn/errors.hpp"

namespace cbnn {

namespace {

constexpr std::size_t kChunk = 500;

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

std::vector<SampleMatrix> predictive_samples(Net& net, const Tensor& inputs, std::size_t draws, std::uint64_t seed) {
  if (draws == 0) throw Error("predictive_samples: need at least one draw");
  const std::size_t count = inputs.batch();
  const std::size_t classes = net.classes();
  std::vector<SampleMatrix> out(count, SampleMatrix{draws, classes, std::vector<double>(draws * classes)});
  const std::size_t stride = inputs.stride();
  for (std::size_t begin = 0; begin < count; begin += kChunk) {
    const std::size_t end = std::min(count, begin + kChunk);
    auto shape = inputs.shape;
    shape[0] = end - begin;
    Tensor chunk(shape);
    std::copy(inputs.data.begin() + static_cast<std::ptrdiff_t>(begin * stride),
              inputs.data.begin() + static_cast<std::ptrdiff_t>(end * stride), chunk.data.begin());
    for (std::size_t d = 0; d < draws; ++d) {
      const Tensor logits = net.forward(chunk, PassContext{false, seed, d, NoiseMode::sample});
      for (std::size_t i = begin; i < end; ++i) {
        const auto p = softmax(logits.row(i - begin));
        std::copy(p.begin(), p.end(), out[i].v.begin() + static_cast<std::ptrdiff_t>(d * classes));
      }
    }
  }
  return out;
}

std::vector<double> mean_probs(const SampleMatrix& samples) {
  std::vector<double> mean(samples.classes, 0.0);
  for (std::size_t d = 0; d < samples.draws; ++d)
    for (std::size_t c = 0; c < samples.classes; ++c) mean[c] += samples(d, c);
  for (auto& m : mean) m /= static_cast<double>(samples.draws);
  return mean;
}

std::vector<std::vector<double>> posterior_predictive(Net& net, const Tensor& inputs, std::size_t draws,
                                                      std::uint64_t seed) {
  std::vector<std::vector<double>> out;
  for (const auto& s : predictive_samples(net, inputs, draws, seed)) out.push_back(mean_probs(s));
  return out;
}

double empirical_quantile(std::vector<double> values, double p) {
  if (values.empty()) throw Error("empirical_quantile: no values");
  if (!(p >= 0.0 && p <= 1.0)) throw Error("empirical_quantile: probability outside [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = p * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= values.size()) return values.back();
  const double frac = h - static_cast<double>(lo);
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

std::vector<Interval> credible_intervals(const SampleMatrix& samples, double coverage) {
  if (!(coverage > 0.0 && coverage < 1.0)) throw Error("credible_intervals: coverage must lie in (0, 1)");
  const double tail = 0.5 * (1.0 - coverage);
  std::vector<Interval> out(samples.classes);
  std::vector<double> column(samples.draws);
  for (std::size_t c = 0; c < samples.classes; ++c) {
    for (std::size_t d = 0; d < samples.draws; ++d) column[d] = samples(d, c);
    out[c] = {empirical_quantile(column, tail), empirical_quantile(column, 1.0 - tail)};
  }
  return out;
}

bool certainty_classify(const std::vector<Interval>& intervals, std::size_t predicted) {
  if (predicted >= intervals.size()) throw IndexOutOfRange("certainty_classify: predicted class out of range");
  for (std::size_t c = 0; c < intervals.size(); ++c) {
    if (c != predicted && !(intervals[predicted].lo > intervals[c].hi)) return false;
  }
  return true;
}

Evaluation evaluate(Net& net, const Dataset& data, std::size_t draws, const std::vector<double>& coverages,
                    std::uint64_t seed) {
  if (data.size() == 0) throw DataError("evaluate: empty test set");
  if (coverages.empty()) throw Error("evaluate: no coverage levels given");
  Evaluation ev;
  ev.draws = draws;
  ev.coverages = coverages;
  for (double cov : coverages) ev.tables.push_back(CertaintyTable{cov});

  const auto samples = predictive_samples(net, data.images, draws, seed);
  std::size_t wrong = 0;
  ev.reports.resize(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    ExampleReport& r = ev.reports[i];
    r.index = i;
    r.label = data.labels[i];
    r.probs = mean_probs(samples[i]);
    r.predicted = argmax(r.probs);
    const bool correct = static_cast<int>(r.predicted) == r.label;
    if (!correct) ++wrong;
    for (std::size_t k = 0; k < coverages.size(); ++k) {
      r.intervals.push_back(credible_intervals(samples[i], coverages[k]));
      const bool certain = certainty_classify(r.intervals.back(), r.predicted);
      r.certain.push_back(certain);
      auto& t = ev.tables[k];
      if (correct) {
        ++(certain ? t.correct_certain : t.correct_uncertain);
      } else {
        ++(certain ? t.wrong_certain : t.wrong_uncertain);
      }
    }
  }
  ev.error_rate = static_cast<double>(wrong) / static_cast<double>(data.size());
  return ev;
}

std::string report_csv(const Evaluation& eval, std::size_t which) {
  if (which >= eval.coverages.size()) throw IndexOutOfRange("report_csv: coverage index out of range");
  std::ostringstream os;
  os << std::setprecision(17);
  const std::size_t classes = eval.reports.empty() ? 0 : eval.reports.front().probs.size();
  os << "index,label,predicted";
  for (std::size_t c = 0; c < classes; ++c) os << ",p_" << c;
  for (std::size_t c = 0; c < classes; ++c) os << ",lo_" << c;
  for (std::size_t c = 0; c < classes; ++c) os << ",hi_" << c;
  os << ",certain\n";
  for (const auto& r : eval.reports) {
    os << r.index << ',' << r.label << ',' << r.predicted;
    for (double p : r.probs) os << ',' << p;
    for (const auto& iv : r.intervals[which]) os << ',' << iv.lo;
    for (const auto& iv : r.intervals[which]) os << ',' << iv.hi;
    os << ',' << (r.certain[which] ? 1 : 0) << '\n';
  }
  return os.str();
}

std::string certainty_csv(const Evaluation& eval) {
  std::ostringstream os;
  os << "coverage,prediction,quite_certain,uncertain,total\n";
  for (const auto& t : eval.tables) {
    os << t.coverage << ",correct," << t.correct_certain << ',' << t.correct_uncertain << ','
       << t.correct_certain + t.correct_uncertain << '\n';
    os << t.coverage << ",wrong," << t.wrong_certain << ',' << t.wrong_uncertain << ','
       << t.wrong_certain + t.wrong_uncertain << '\n';
  }
  return os.str();
}

std::string error_csv(const Evaluation& eval) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "draws,examples,error_rate\n" << eval.draws << ',' << eval.reports.size() << ',' << eval.error_rate << '\n';
  return os.str();
}

std::string layer_summary_csv(const Net& net) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "layer,kind,tau_w,rho_w,tau_b,rho_b\n";
  for (const auto& layer : net.layers()) {
    const auto* p = dynamic_cast<const ParametricLayer*>(layer.get());
    if (p == nullptr || !p->bayesian()) continue;
    os << p->index() << ',' << to_string(p->kind()) << ',' << p->weight_group().tau() << ','
       << p->weight_group().rho() << ',' << p->bias_group().tau() << ',' << p->bias_group().rho() << '\n';
  }
  return os.str();
}

std::string samples_csv(const SampleMatrix& samples) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "draw";
  for (std::size_t c = 0; c < samples.classes; ++c) os << ",class_" << c;
  os << '\n';
  for (std::size_t d = 0; d < samples.draws; ++d) {
    os << d;
    for (std::size_t c = 0; c < samples.classes; ++c) os << ',' << samples(d, c);
    os << '\n';
  }
  return os.str();
}

}  // namespace cbnn
