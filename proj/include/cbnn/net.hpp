#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cbnn/layers.hpp"
#include "cbnn/tensor.hpp"

namespace cbnn {

struct Dataset;

enum class Mode : std::uint8_t { frequentist = 0, bayesian = 1 };

const char* to_string(Mode mode);

// Sequential classifier; the last layer's outputs are the logits.
class Net {
 public:
  Net(Shape3 input, std::vector<LayerSpec> specs, Mode mode, std::uint64_t init_seed);
  Net(const Net& other);
  Net& operator=(const Net& other);
  Net(Net&&) noexcept = default;
  Net& operator=(Net&&) noexcept = default;

  Tensor forward(const Tensor& input, const PassContext& ctx);
  Tensor backward(const Tensor& dlogits, const GradScale& scale);

  // Sum of layer KL divergences at the most recent draw.
  double kl() const;

  // Learnable blocks in a fixed order (layer order, then weights before biases).
  std::vector<ParamBlock> params();
  std::size_t parameter_count();

  Mode mode() const { return mode_; }
  Shape3 input_shape() const { return input_; }
  std::size_t classes() const;
  const std::vector<LayerSpec>& specs() const { return specs_; }
  std::vector<std::unique_ptr<Layer>>& layers() { return layers_; }
  const std::vector<std::unique_ptr<Layer>>& layers() const { return layers_; }

 private:
  Shape3 input_;
  std::vector<LayerSpec> specs_;
  Mode mode_;
  std::vector<std::unique_ptr<Layer>> layers_;
};

enum class LrPolicy : std::uint8_t { fixed = 0, inv = 1 };

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t iterations = 1000;
  double base_lr = 0.01;
  LrPolicy policy = LrPolicy::inv;
  double lr_gamma = 1e-4;
  double lr_power = 0.75;
  double momentum = 0.9;
  // KL multiplier. When unset, nu = 1 / (training-set size * kl_reduction).
  std::optional<double> nu;
  double kl_reduction = 1.0;
  double kappa = 1.0;
  std::uint64_t seed = 1;
  std::size_t log_every = 100;
  // Examples of the monitor set used for the one-draw test error; 0 means all.
  std::size_t monitor_examples = 0;

  bool operator==(const TrainConfig&) const = default;
};

double resolve_nu(const TrainConfig& config, std::size_t training_size);

double lr_at(std::uint64_t iteration, const TrainConfig& config);

// v <- momentum * v - lr * g;  p <- p + v
void sgd_momentum_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity,
                       double lr, double momentum);

struct LossBreakdown {
  double data = 0.0;   // mean cross-entropy over the batch
  double kl = 0.0;     // sum of layer KLs (unscaled)
  double total = 0.0;  // data + nu * kl
};

// One-sample estimate of the mini-batch objective. Runs forward and backward, leaving
// the gradients of data + nu * KL in the network's parameter blocks.
LossBreakdown lvi_minibatch_loss(Net& net, const Tensor& batch, std::span<const int> labels, const PassContext& ctx,
                                 const GradScale& scale);

// Everything needed to resume training bit-for-bit.
struct Checkpoint {
  Net net;
  std::vector<std::vector<double>> velocity;  // one buffer per parameter block
  std::uint64_t iteration = 0;
  std::uint64_t seed = 0;

  explicit Checkpoint(Net n, std::uint64_t seed_value = 0);
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct LogRow {
  std::uint64_t iteration = 0;
  double lr = 0.0;
  double loss = 0.0;
  double approx_test_error = 0.0;  // NaN when no monitor set was given
};

struct TrainResult {
  std::vector<LogRow> log;            // rows at the logging cadence
  std::vector<double> losses;         // objective at every iteration
  std::vector<double> data_losses;    // cross-entropy part at every iteration
};

// Runs config.iterations further iterations starting from checkpoint.iteration.
// monitor may be null; otherwise its one-draw error is logged at the cadence.
TrainResult train(Checkpoint& checkpoint, const Dataset& data, const Dataset* monitor, const TrainConfig& config,
                  const std::function<void(const LogRow&)>& on_log = {});

// Error rate of argmax predictions from a single draw (training = false).
double single_draw_error(Net& net, const Dataset& data, std::uint64_t seed, std::uint64_t draw,
                         std::size_t limit = 0);

std::string log_csv(const std::vector<LogRow>& rows);

}  // namespace cbnn
