#pragma once

// Run configuration files.
//
//   # comment
//   [run]      id, mode (bayes | freq), seed
//   [data]     format (mnist | cifar10 | blobs), dir, train_per_class, train_count,
//              test_count, blob_classes, blob_per_class, blob_test_per_class,
//              blob_dims, blob_separation
//   [train]    batch_size, iterations, base_lr, lr_policy (inv | fixed), lr_gamma,
//              lr_power, momentum, nu (number or auto), kl_reduction, kappa,
//              log_every, monitor_examples
//   [eval]     draws, coverages (comma separated), seed
//   [layer]    repeated, in network order: kind (dense | conv | relu | maxpool |
//              dropout), outputs, kernel, stride, padding, rate, prior_std,
//              bias_prior_std, weight_decay
//
// Every line is `key = value`. Unknown sections or keys are errors. Counts of 0 for
// train_per_class / train_count / test_count mean "use everything".

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cbnn/data.hpp"
#include "cbnn/layers.hpp"
#include "cbnn/net.hpp"

namespace cbnn {

enum class DataFormat : std::uint8_t { mnist, cifar10, blobs };

struct DataConfig {
  DataFormat format = DataFormat::mnist;
  std::string dir = "data/mnist";
  std::size_t train_per_class = 0;
  std::size_t train_count = 0;
  std::size_t test_count = 0;
  std::size_t blob_classes = 2;
  std::size_t blob_per_class = 500;
  std::size_t blob_test_per_class = 200;
  std::size_t blob_dims = 2;
  double blob_separation = 10.0;

  bool operator==(const DataConfig&) const = default;
};

struct EvalConfig {
  std::size_t draws = 200;
  std::vector<double> coverages = {0.95, 0.99};
  std::uint64_t seed = 7;

  bool operator==(const EvalConfig&) const = default;
};

struct RunConfig {
  std::string id = "run";
  Mode mode = Mode::bayesian;
  std::uint64_t seed = 1;  // initialization and training streams
  DataConfig data;
  TrainConfig train;
  EvalConfig eval;
  std::vector<LayerSpec> layers;

  bool operator==(const RunConfig&) const = default;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
std::string serialize_config(const RunConfig& config);

// Replaces data.dir with $CBNN_DATA_DIR when that variable is set.
void apply_env_overrides(RunConfig& config);

// Loads (train, test) as described by the [data] section.
std::pair<Dataset, Dataset> load_data(const DataConfig& data, std::uint64_t seed);

}  // namespace cbnn
