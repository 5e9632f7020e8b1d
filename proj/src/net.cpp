#include "cbnn/net.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "cbnn/data.hpp"
#include "cbnn/errors.hpp"

namespace cbnn {

namespace {

// Monitoring draws use their own key space so they never reuse training noise.
constexpr std::uint64_t kMonitorSeedOffset = 0x6d6f6e69746f72ULL;

}  // namespace

const char* to_string(Mode mode) { return mode == Mode::bayesian ? "bayes" : "freq"; }

Net::Net(Shape3 input, std::vector<LayerSpec> specs, Mode mode, std::uint64_t init_seed)
    : input_(input), specs_(std::move(specs)), mode_(mode) {
  if (specs_.empty()) throw ShapeMismatch("network needs at least one layer");
  Shape3 shape = input;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    layers_.push_back(make_layer(i, specs_[i], shape, mode == Mode::bayesian, init_seed));
    shape = layers_.back()->output_shape();
  }
  if (specs_.back().kind != LayerKind::dense) throw ShapeMismatch("the last layer must be dense (logits)");
}

Net::Net(const Net& other) : input_(other.input_), specs_(other.specs_), mode_(other.mode_) {
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Net& Net::operator=(const Net& other) {
  if (this != &other) {
    Net copy(other);
    *this = std::move(copy);
  }
  return *this;
}

std::size_t Net::classes() const { return layers_.back()->output_shape().size(); }

Tensor Net::forward(const Tensor& input, const PassContext& ctx) {
  Tensor x = input;
  for (auto& layer : layers_) x = layer->forward(x, ctx);
  return x;
}

Tensor Net::backward(const Tensor& dlogits, const GradScale& scale) {
  Tensor g = dlogits;
  for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(g, scale);
  return g;
}

double Net::kl() const {
  double s = 0.0;
  for (const auto& layer : layers_) s += layer->kl();
  return s;
}

std::vector<ParamBlock> Net::params() {
  std::vector<ParamBlock> out;
  for (auto& layer : layers_) {
    for (auto& block : layer->params()) out.push_back(std::move(block));
  }
  return out;
}

std::size_t Net::parameter_count() {
  std::size_t n = 0;
  for (const auto& block : params()) n += block.value.size();
  return n;
}

double resolve_nu(const TrainConfig& config, std::size_t training_size) {
  if (config.nu) return *config.nu;
  if (training_size == 0) throw Error("resolve_nu: empty training set");
  return 1.0 / (static_cast<double>(training_size) * config.kl_reduction);
}

double lr_at(std::uint64_t iteration, const TrainConfig& config) {
  if (config.policy == LrPolicy::fixed) return config.base_lr;
  return config.base_lr * std::pow(1.0 + config.lr_gamma * static_cast<double>(iteration), -config.lr_power);
}

void sgd_momentum_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity,
                       double lr, double momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ShapeMismatch("sgd_momentum_step: parameter, gradient and velocity sizes differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] - lr * grads[i];
    params[i] += velocity[i];
  }
}

LossBreakdown lvi_minibatch_loss(Net& net, const Tensor& batch, std::span<const int> labels, const PassContext& ctx,
                                 const GradScale& scale) {
  if (batch.batch() == 0) throw ShapeMismatch("lvi_minibatch_loss: empty batch");
  const Tensor logits = net.forward(batch, ctx);
  BatchLoss ce = softmax_cross_entropy(logits, labels);
  LossBreakdown out;
  out.data = ce.loss;
  out.kl = net.mode() == Mode::bayesian ? net.kl() : 0.0;
  out.total = out.data + scale.nu * out.kl;
  net.backward(ce.dlogits, scale);
  return out;
}

Checkpoint::Checkpoint(Net n, std::uint64_t seed_value) : net(std::move(n)), seed(seed_value) {
  for (const auto& block : net.params()) velocity.emplace_back(block.value.size(), 0.0);
}

double single_draw_error(Net& net, const Dataset& data, std::uint64_t seed, std::uint64_t draw, std::size_t limit) {
  const std::size_t count = limit == 0 ? data.size() : std::min(limit, data.size());
  if (count == 0) return std::numeric_limits<double>::quiet_NaN();
  PassContext ctx{false, seed, draw, NoiseMode::sample};
  constexpr std::size_t kChunk = 500;
  std::size_t wrong = 0;
  for (std::size_t begin = 0; begin < count; begin += kChunk) {
    const std::size_t end = std::min(count, begin + kChunk);
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    const Tensor logits = net.forward(data.gather(idx), ctx);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto row = logits.row(i);
      std::size_t best = 0;
      for (std::size_t c = 1; c < row.size(); ++c)
        if (row[c] > row[best]) best = c;
      if (static_cast<int>(best) != data.labels[idx[i]]) ++wrong;
    }
  }
  return static_cast<double>(wrong) / static_cast<double>(count);
}

TrainResult train(Checkpoint& checkpoint, const Dataset& data, const Dataset* monitor, const TrainConfig& config,
                  const std::function<void(const LogRow&)>& on_log) {
  if (data.size() == 0) throw DataError("train: empty dataset");
  if (config.batch_size == 0) throw Error("train: batch size must be positive");
  Net& net = checkpoint.net;
  const GradScale scale{net.mode() == Mode::bayesian ? resolve_nu(config, data.size()) : 0.0,
                        net.mode() == Mode::bayesian ? config.kappa : 1.0};
  const std::size_t per_epoch = (data.size() + config.batch_size - 1) / config.batch_size;

  TrainResult result;
  result.losses.reserve(config.iterations);
  std::vector<std::vector<std::size_t>> order;
  std::uint64_t order_epoch = std::numeric_limits<std::uint64_t>::max();

  const std::uint64_t first = checkpoint.iteration;
  const std::uint64_t last = first + config.iterations;
  for (std::uint64_t it = first; it < last; ++it) {
    const std::uint64_t epoch = it / per_epoch;
    if (epoch != order_epoch) {
      order = minibatches(data.size(), config.batch_size, config.seed, epoch);
      order_epoch = epoch;
    }
    const auto& idx = order[it % per_epoch];
    const Tensor batch = data.gather(idx);
    const std::vector<int> labels = data.gather_labels(idx);

    const PassContext ctx{true, config.seed, it, NoiseMode::sample};
    const LossBreakdown loss = lvi_minibatch_loss(net, batch, labels, ctx, scale);
    if (!std::isfinite(loss.total)) {
      std::ostringstream os;
      os << "non-finite objective at iteration " << it << " (data " << loss.data << ", kl " << loss.kl << ")";
      throw NumericalBlowup(os.str());
    }
    result.losses.push_back(loss.total);
    result.data_losses.push_back(loss.data);

    const double lr = lr_at(it, config);
    auto blocks = net.params();
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      auto& block = blocks[b];
      if (block.weight_decay != 0.0) {
        for (std::size_t i = 0; i < block.value.size(); ++i) block.grad[i] += block.weight_decay * block.value[i];
      }
      sgd_momentum_step(block.value, block.grad, checkpoint.velocity[b], lr, config.momentum);
    }
    checkpoint.iteration = it + 1;

    const bool log_now = config.log_every > 0 && ((it + 1) % config.log_every == 0 || it + 1 == last);
    if (log_now) {
      LogRow row{it + 1, lr, loss.total, std::numeric_limits<double>::quiet_NaN()};
      if (monitor != nullptr) {
        row.approx_test_error =
            single_draw_error(net, *monitor, config.seed + kMonitorSeedOffset, it, config.monitor_examples);
      }
      result.log.push_back(row);
      if (on_log) on_log(row);
    }
  }
  checkpoint.seed = config.seed;
  return result;
}

std::string log_csv(const std::vector<LogRow>& rows) {
  std::ostringstream os;
  os << "iteration,lr,loss,approx_test_error\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.iteration << ',' << r.lr << ',' << r.loss << ',';
    if (std::isnan(r.approx_test_error)) {
      os << "nan";
    } else {
      os << r.approx_test_error;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace cbnn
