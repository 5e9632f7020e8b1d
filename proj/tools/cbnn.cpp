// cbnn: train, evaluate and inspect networks with correlated Gaussian weights.
//
// Exit codes: 0 success, 1 verification failure, 2 usage/config/input error,
// 3 runtime failure (e.g. a numerical blow-up during training).

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "cbnn/config.hpp"
#include "cbnn/errors.hpp"
#include "cbnn/net.hpp"
#include "cbnn/parallel.hpp"
#include "cbnn/predict.hpp"
#include "cbnn/verify.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kUsage = 2;
constexpr int kRuntime = 3;

namespace fs = std::filesystem;

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw cbnn::Error("cannot write " + path.string());
  out << text;
  std::cerr << "wrote " << path.string() << '\n';
}

cbnn::RunConfig read_config(const std::string& path) {
  auto cfg = cbnn::load_config(path);
  cbnn::apply_env_overrides(cfg);
  return cfg;
}

// Raised for problems with the user's inputs rather than with the computation.
struct InputError : cbnn::Error {
  using cbnn::Error::Error;
};

void check_compatible(const cbnn::Net& net, const cbnn::Dataset& data) {
  if (!(net.input_shape() == data.shape)) {
    throw InputError("checkpoint expects inputs of " + std::to_string(net.input_shape().size()) +
                     " values per example but the dataset provides " + std::to_string(data.shape.size()));
  }
  if (net.classes() != data.class_count) throw InputError("checkpoint and dataset disagree on the class count");
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
  const auto cfg = read_config(config_path);
  auto [train, test] = cbnn::load_data(cfg.data, cfg.seed);
  std::cerr << "train " << cfg.id << ": " << train.size() << " training and " << test.size()
            << " monitor examples, mode " << cbnn::to_string(cfg.mode) << ", " << cbnn::thread_count()
            << " thread(s)\n";
  cbnn::Checkpoint ck(cbnn::Net(train.shape, cfg.layers, cfg.mode, cfg.seed), cfg.seed);
  const auto result = cbnn::train(ck, train, &test, cfg.train, [](const cbnn::LogRow& r) {
    std::fprintf(stderr, "iter %llu  lr %.6g  loss %.6f  approx_test_error %.4f\n",
                 static_cast<unsigned long long>(r.iteration), r.lr, r.loss, r.approx_test_error);
  });
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  cbnn::save_checkpoint(ck, (dir / (cfg.id + ".ckpt")).string());
  std::cerr << "wrote " << (dir / (cfg.id + ".ckpt")).string() << '\n';
  write_file(dir / (cfg.id + "_train_log.csv"), cbnn::log_csv(result.log));
  return kOk;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint_path, std::size_t draws,
             std::vector<double> coverages, const std::string& out_dir) {
  const auto cfg = read_config(config_path);
  auto ck = cbnn::load_checkpoint(checkpoint_path);
  const auto test = cbnn::load_data(cfg.data, cfg.seed).second;
  check_compatible(ck.net, test);
  if (draws == 0) draws = ck.net.mode() == cbnn::Mode::bayesian ? cfg.eval.draws : 1;
  if (coverages.empty()) coverages = cfg.eval.coverages;
  const auto ev = cbnn::evaluate(ck.net, test, draws, coverages, cfg.eval.seed);
  std::cout << "error_rate " << ev.error_rate << " over " << test.size() << " examples, " << draws << " draw(s)\n";
  for (const auto& t : ev.tables) {
    std::cout << "coverage " << t.coverage << ": correct certain " << t.correct_certain << ", correct uncertain "
              << t.correct_uncertain << ", wrong certain " << t.wrong_certain << ", wrong uncertain "
              << t.wrong_uncertain << '\n';
  }
  const fs::path dir(out_dir);
  write_file(dir / (cfg.id + "_eval_error.csv"), cbnn::error_csv(ev));
  write_file(dir / (cfg.id + "_certainty.csv"), cbnn::certainty_csv(ev));
  for (std::size_t k = 0; k < coverages.size(); ++k) {
    char tag[32];
    std::snprintf(tag, sizeof tag, "%g", coverages[k]);
    write_file(dir / (cfg.id + "_predictions_" + tag + ".csv"), cbnn::report_csv(ev, k));
  }
  if (ck.net.mode() == cbnn::Mode::bayesian) write_file(dir / (cfg.id + "_layers.csv"), cbnn::layer_summary_csv(ck.net));
  return kOk;
}

int cmd_verify(std::vector<std::string> suites, std::uint64_t seed, std::size_t samples, const std::string& csv_path) {
  if (suites.empty() || (suites.size() == 1 && suites[0] == "all")) {
    suites = {"covariance", "cholesky", "gradients", "kl", "sampling"};
  }
  std::vector<cbnn::verify::CheckResult> results;
  for (const auto& s : suites) {
    std::vector<cbnn::verify::CheckResult> r;
    if (s == "covariance") r = cbnn::verify::covariance_suite(seed);
    else if (s == "cholesky") r = cbnn::verify::cholesky_suite(seed);
    else if (s == "gradients") r = cbnn::verify::gradient_suite(seed);
    else if (s == "kl") r = cbnn::verify::kl_suite(seed, samples);
    else if (s == "sampling") r = cbnn::verify::sampling_suite(seed, samples);
    else throw InputError("unknown suite '" + s + "'");
    results.insert(results.end(), r.begin(), r.end());
  }
  std::ostringstream csv;
  csv << std::setprecision(6) << "suite,check,passed,worst,threshold,detail\n";
  bool ok = true;
  for (const auto& r : results) {
    ok = ok && r.passed;
    std::string detail = r.detail;
    std::replace(detail.begin(), detail.end(), ',', ';');
    csv << r.suite << ',' << r.name << ',' << (r.passed ? "pass" : "FAIL") << ',' << r.worst << ',' << r.threshold
        << ',' << detail << '\n';
  }
  std::cout << csv.str();
  if (!csv_path.empty()) write_file(csv_path, csv.str());
  return ok ? kOk : kVerifyFailed;
}

int cmd_boxdata(const std::string& config_path, const std::string& checkpoint_path, std::size_t index,
                std::size_t draws, const std::string& out_path) {
  const auto cfg = read_config(config_path);
  auto ck = cbnn::load_checkpoint(checkpoint_path);
  const auto test = cbnn::load_data(cfg.data, cfg.seed).second;
  check_compatible(ck.net, test);
  if (index >= test.size()) {
    throw cbnn::IndexOutOfRange("image index " + std::to_string(index) + " out of range (test set has " +
                                std::to_string(test.size()) + " examples)");
  }
  const std::vector<std::size_t> one{index};
  const auto samples = cbnn::predictive_samples(ck.net, test.gather(one), draws, cfg.eval.seed);
  const std::string csv = cbnn::samples_csv(samples.front());
  if (out_path.empty()) {
    std::cout << csv;
  } else {
    write_file(out_path, csv);
  }
  std::cerr << "label " << test.labels[index] << '\n';
  return kOk;
}

int cmd_summary(const std::string& checkpoint_path) {
  auto ck = cbnn::load_checkpoint(checkpoint_path);
  std::cout << "mode " << cbnn::to_string(ck.net.mode()) << ", iteration " << ck.iteration << ", "
            << ck.net.parameter_count() << " learnable values\n";
  std::cout << cbnn::layer_summary_csv(ck.net);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian networks with tridiagonal-covariance Gaussian weights"};
  app.require_subcommand(1);
  std::size_t threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: $CBNN_THREADS or 1)");

  std::string config, checkpoint, out_dir = "runs", out_file, csv_path;
  std::size_t draws = 0, box_draws = 200, index = 0, samples = 1'000'000;
  std::uint64_t seed = 1;
  std::vector<double> coverages;
  std::vector<std::string> suites;

  auto* train = app.add_subcommand("train", "Train a network from a config file");
  train->add_option("config", config, "Config file")->required()->check(CLI::ExistingFile);
  train->add_option("-o,--out", out_dir, "Output directory");

  auto* eval = app.add_subcommand("eval", "Posterior-predictive evaluation with credible intervals");
  eval->add_option("config", config, "Config file")->required()->check(CLI::ExistingFile);
  eval->add_option("checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("-n,--draws", draws, "Predictive draws (default from config; 1 for frequentist)");
  eval->add_option("-a,--coverage", coverages, "Interval coverage level(s), e.g. 0.95");
  eval->add_option("-o,--out", out_dir, "Output directory");

  auto* verify = app.add_subcommand("verify", "Run numerical verification suites");
  verify->add_option("suites", suites, "covariance, cholesky, gradients, kl, sampling or all");
  verify->add_option("--seed", seed, "Seed for random instances");
  verify->add_option("--samples", samples, "Monte-Carlo samples for kl and sampling");
  verify->add_option("--csv", csv_path, "Also write the report here");

  auto* box = app.add_subcommand("boxdata", "Raw per-draw softmax outputs for one test image");
  box->add_option("config", config, "Config file")->required()->check(CLI::ExistingFile);
  box->add_option("checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  box->add_option("-i,--index", index, "Test image index")->required();
  box->add_option("-n,--draws", box_draws, "Draws")->capture_default_str();
  box->add_option("-o,--out", out_file, "Output CSV (default stdout)");

  auto* summary = app.add_subcommand("summary", "Per-layer tau and rho of a checkpoint");
  summary->add_option("checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  if (threads > 0) cbnn::set_thread_count(threads);

  try {
    if (*train) return cmd_train(config, out_dir);
    if (*eval) return cmd_eval(config, checkpoint, draws, coverages, out_dir);
    if (*verify) return cmd_verify(suites, seed, samples, csv_path);
    if (*box) return cmd_boxdata(config, checkpoint, index, box_draws, out_file);
    if (*summary) return cmd_summary(checkpoint);
  } catch (const cbnn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const cbnn::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kUsage;
  } catch (const cbnn::FormatError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kUsage;
  } catch (const cbnn::CorruptCheckpoint& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kUsage;
  } catch (const cbnn::IndexOutOfRange& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
