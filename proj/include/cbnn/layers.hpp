#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cbnn/corrgauss.hpp"
#include "cbnn/rng.hpp"
#include "cbnn/tensor.hpp"

namespace cbnn {

enum class LayerKind : std::uint8_t { dense = 1, conv = 2, relu = 3, maxpool = 4, dropout = 5 };

const char* to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t outputs = 0;  // dense units, or conv output channels
  std::size_t kernel = 0;   // conv kernel side, or pooling window side
  std::size_t stride = 1;
  std::size_t padding = 0;
  double dropout_rate = 0.5;
  double prior_std = 1.0;       // Bayesian weight prior
  double bias_prior_std = 1.0;  // Bayesian bias prior
  double weight_decay = 0.0;    // frequentist L2 strength

  bool operator==(const LayerSpec&) const = default;
};

enum class NoiseMode {
  sample,  // stabilize, then draw fresh noise from the keyed stream
  frozen,  // reuse the stored noise and skip stabilization (gradient checks, injected noise)
};

struct PassContext {
  bool training = true;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;  // training iteration, or predictive draw index
  NoiseMode noise = NoiseMode::sample;
};

// Scales applied in the backward pass of Bayesian layers.
struct GradScale {
  double nu = 0.0;     // KL multiplier
  double kappa = 1.0;  // extra multiplier on the gamma gradient
};

struct ParamBlock {
  std::string name;
  std::span<double> value;
  std::span<double> grad;
  double weight_decay = 0.0;
};

// Row-major flat index of (out_channel, in_channel, row, col) within a kernel of the
// given dims. Dense weights use dims (outputs, inputs, 1, 1). This order defines which
// parameters are neighbours in the correlation chain.
std::size_t flatten_index(const std::array<std::size_t, 4>& dims, const std::array<std::size_t, 4>& index);
std::array<std::size_t, 4> unflatten_index(const std::array<std::size_t, 4>& dims, std::size_t flat);

// One variational distribution (weights or biases of one layer) plus the caches needed
// to backpropagate through the most recent draw.
class VariationalGroup {
 public:
  VariationalGroup() = default;
  VariationalGroup(std::size_t n, Stream noise_stream, Stream stabilize_stream);

  VariationalParams params;
  PriorSpec prior;
  std::vector<double> grad_m;
  double grad_delta = 0.0;
  double grad_gamma = 0.0;

  std::size_t size() const { return params.m.size(); }
  double tau() const { return reparam_tau(params.delta); }
  double rho() const { return reparam_rho(params.gamma); }

  // Writes one draw into out. In training mode the stored parameters are stabilized in
  // place; in evaluation mode a stabilized copy is used and params stay untouched.
  void draw(const PassContext& ctx, std::uint64_t layer, std::span<double> out);

  // Maps dL/dw of the last draw to the variational gradients (assigns, not accumulates).
  void backward(std::span<const double> dL_dw, const GradScale& scale);

  double kl() const;

  void set_noise(std::vector<double> noise);
  const std::vector<double>& noise() const { return noise_; }
  bool has_noise() const { return has_noise_; }
  const FactorL& factor() const { return factor_; }

 private:
  Stream noise_stream_ = Stream::weight_noise;
  Stream stabilize_stream_ = Stream::weight_stabilize;
  std::vector<double> noise_;
  bool has_noise_ = false;
  FactorL factor_;
  VariationalParams drawn_;  // parameters the cached factor was built from
};

class Layer {
 public:
  explicit Layer(std::size_t index) : index_(index) {}
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  virtual const LayerSpec& spec() const = 0;
  virtual Shape3 input_shape() const = 0;
  virtual Shape3 output_shape() const = 0;

  virtual Tensor forward(const Tensor& input, const PassContext& ctx) = 0;
  virtual Tensor backward(const Tensor& grad_output, const GradScale& scale) = 0;

  virtual std::vector<ParamBlock> params() { return {}; }
  virtual double kl() const { return 0.0; }
  virtual bool bayesian() const { return false; }
  virtual std::unique_ptr<Layer> clone() const = 0;

  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

// Dense or convolutional layer. Holds either point parameters (frequentist) or a pair
// of variational groups (Bayesian) from which the parameters are drawn on every pass.
class ParametricLayer : public Layer {
 public:
  ParametricLayer(std::size_t index, const LayerSpec& spec, Shape3 input, bool bayesian, std::uint64_t init_seed);

  LayerKind kind() const override { return spec_.kind; }
  const LayerSpec& spec() const override { return spec_; }
  Shape3 input_shape() const override { return input_; }
  Shape3 output_shape() const override { return output_; }
  bool bayesian() const override { return bayesian_; }

  Tensor forward(const Tensor& input, const PassContext& ctx) override;
  Tensor backward(const Tensor& grad_output, const GradScale& scale) override;
  std::vector<ParamBlock> params() override;
  double kl() const override;
  std::unique_ptr<Layer> clone() const override;

  std::size_t weight_count() const { return weights_.size(); }
  std::size_t bias_count() const { return biases_.size(); }
  // (out, in, kh, kw); dense layers report (outputs, inputs, 1, 1).
  std::array<std::size_t, 4> kernel_dims() const;

  // Frequentist parameters, or the most recent draw for Bayesian layers.
  std::vector<double>& weights() { return weights_; }
  std::vector<double>& biases() { return biases_; }
  const std::vector<double>& weight_grad() const { return grad_w_; }
  const std::vector<double>& bias_grad() const { return grad_b_; }

  VariationalGroup& weight_group() { return vw_; }
  VariationalGroup& bias_group() { return vb_; }
  const VariationalGroup& weight_group() const { return vw_; }
  const VariationalGroup& bias_group() const { return vb_; }

 private:
  Tensor forward_dense(const Tensor& input);
  Tensor backward_dense(const Tensor& grad_output);
  Tensor forward_conv(const Tensor& input);
  Tensor backward_conv(const Tensor& grad_output);

  LayerSpec spec_;
  Shape3 input_;
  Shape3 output_;
  bool bayesian_;
  std::vector<double> weights_, biases_;
  std::vector<double> grad_w_, grad_b_;
  VariationalGroup vw_, vb_;
  Tensor last_input_;
  std::vector<double> cols_;  // im2col buffers for the last batch
};

class ReluLayer : public Layer {
 public:
  ReluLayer(std::size_t index, const LayerSpec& spec, Shape3 input) : Layer(index), spec_(spec), shape_(input) {}
  LayerKind kind() const override { return LayerKind::relu; }
  const LayerSpec& spec() const override { return spec_; }
  Shape3 input_shape() const override { return shape_; }
  Shape3 output_shape() const override { return shape_; }
  Tensor forward(const Tensor& input, const PassContext& ctx) override;
  Tensor backward(const Tensor& grad_output, const GradScale& scale) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReluLayer>(*this); }

 private:
  LayerSpec spec_;
  Shape3 shape_;
  Tensor last_input_;
};

class MaxPoolLayer : public Layer {
 public:
  MaxPoolLayer(std::size_t index, const LayerSpec& spec, Shape3 input);
  LayerKind kind() const override { return LayerKind::maxpool; }
  const LayerSpec& spec() const override { return spec_; }
  Shape3 input_shape() const override { return input_; }
  Shape3 output_shape() const override { return output_; }
  Tensor forward(const Tensor& input, const PassContext& ctx) override;
  Tensor backward(const Tensor& grad_output, const GradScale& scale) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPoolLayer>(*this); }

 private:
  LayerSpec spec_;
  Shape3 input_;
  Shape3 output_;
  std::vector<std::size_t> argmax_;
  std::size_t batch_ = 0;
};

// Inverted dropout; identity outside training.
class DropoutLayer : public Layer {
 public:
  DropoutLayer(std::size_t index, const LayerSpec& spec, Shape3 input);
  LayerKind kind() const override { return LayerKind::dropout; }
  const LayerSpec& spec() const override { return spec_; }
  Shape3 input_shape() const override { return shape_; }
  Shape3 output_shape() const override { return shape_; }
  Tensor forward(const Tensor& input, const PassContext& ctx) override;
  Tensor backward(const Tensor& grad_output, const GradScale& scale) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<DropoutLayer>(*this); }

 private:
  LayerSpec spec_;
  Shape3 shape_;
  std::vector<double> mask_;
};

std::unique_ptr<Layer> make_layer(std::size_t index, const LayerSpec& spec, Shape3 input, bool bayesian,
                                  std::uint64_t init_seed);

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> dlogits;
};

// -ln softmax(logits)[label] and its gradient; softmax is shifted by the max logit.
LossAndGrad softmax_cross_entropy(std::span<const double> logits, std::size_t label);

// Mean cross-entropy over a (batch, classes) tensor; dlogits is scaled by 1/batch.
struct BatchLoss {
  double loss = 0.0;
  Tensor dlogits;
};
BatchLoss softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

std::vector<double> softmax(std::span<const double> logits);

// Classical building blocks, exposed for tests.
void im2col(const double* image, Shape3 in, std::size_t kernel, std::size_t stride, std::size_t padding,
            std::size_t out_h, std::size_t out_w, double* cols);
void col2im(const double* cols, Shape3 in, std::size_t kernel, std::size_t stride, std::size_t padding,
            std::size_t out_h, std::size_t out_w, double* image);

}  // namespace cbnn
