#include "cbnn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "cbnn/errors.hpp"
#include "cbnn/parallel.hpp"

namespace cbnn {

namespace {

// tau = 0.05 at initialization.
const double kInitDelta = std::log(std::expm1(0.05));
constexpr double kInitBias = 0.1;

void check_input(const Tensor& input, Shape3 expected, const char* who) {
  if (input.shape.empty() || input.stride() != expected.size()) {
    std::ostringstream os;
    os << who << ": input " << input.shape_string() << " does not match per-example size " << expected.size();
    throw ShapeMismatch(os.str());
  }
}

std::vector<std::size_t> batch_shape(std::size_t batch, Shape3 s) {
  if (s.height == 1 && s.width == 1) return {batch, s.channels};
  return {batch, s.channels, s.height, s.width};
}

}  // namespace

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::dropout: return "dropout";
  }
  return "unknown";
}

std::size_t flatten_index(const std::array<std::size_t, 4>& dims, const std::array<std::size_t, 4>& index) {
  std::size_t flat = 0;
  for (std::size_t d = 0; d < 4; ++d) {
    if (index[d] >= dims[d]) {
      throw IndexOutOfRange("flatten_index: axis " + std::to_string(d) + " index " + std::to_string(index[d]) +
                            " >= " + std::to_string(dims[d]));
    }
    flat = flat * dims[d] + index[d];
  }
  return flat;
}

std::array<std::size_t, 4> unflatten_index(const std::array<std::size_t, 4>& dims, std::size_t flat) {
  if (flat >= dims[0] * dims[1] * dims[2] * dims[3]) throw IndexOutOfRange("unflatten_index: flat index too large");
  std::array<std::size_t, 4> idx{};
  for (std::size_t d = 4; d-- > 0;) {
    idx[d] = flat % dims[d];
    flat /= dims[d];
  }
  return idx;
}

// ---------------------------------------------------------------------------------------
// VariationalGroup

VariationalGroup::VariationalGroup(std::size_t n, Stream noise_stream, Stream stabilize_stream)
    : grad_m(n, 0.0), noise_stream_(noise_stream), stabilize_stream_(stabilize_stream) {
  params.m.assign(n, 0.0);
  prior.mu.assign(n, 0.0);
}

void VariationalGroup::draw(const PassContext& ctx, std::uint64_t layer, std::span<double> out) {
  const std::size_t n = size();
  if (ctx.noise == NoiseMode::frozen) {
    if (!has_noise_) throw MissingForward("frozen draw requested but no noise is stored");
    drawn_ = params;
  } else {
    KeyedRng stab(ctx.seed, layer, stabilize_stream_, ctx.step);
    const auto coin = [&stab] { return stab.coin(); };
    if (ctx.training) {
      params = stabilize_params(std::move(params), coin);
      drawn_ = params;
    } else {
      drawn_ = stabilize_params(params, coin);
    }
    KeyedRng rng(ctx.seed, layer, noise_stream_, ctx.step);
    noise_.resize(n);
    for (auto& x : noise_) x = rng.normal();
    has_noise_ = true;
  }
  factor_ = build_factor(drawn_.m, reparam_tau(drawn_.delta), reparam_rho(drawn_.gamma));
  sample_into(drawn_.m, factor_, noise_, out);
}

void VariationalGroup::backward(std::span<const double> dL_dw, const GradScale& scale) {
  if (!has_noise_ || factor_.size() != size()) throw MissingForward("variational backward without a forward pass");
  ParamGrads g = banded_backward(drawn_.m, drawn_.delta, drawn_.gamma, factor_, noise_, dL_dw, scale.nu, &prior);
  grad_m = std::move(g.dm);
  grad_delta = g.ddelta;
  grad_gamma = scale.kappa * g.dgamma;
}

double VariationalGroup::kl() const {
  if (has_noise_ && factor_.size() == size()) {
    return kl_to_prior(drawn_.m, factor_.tau, factor_, prior);
  }
  const FactorL f = build_factor(params.m, tau(), rho());
  return kl_to_prior(params.m, f.tau, f, prior);
}

void VariationalGroup::set_noise(std::vector<double> noise) {
  if (noise.size() != size()) throw ShapeMismatch("set_noise: length does not match the group");
  noise_ = std::move(noise);
  has_noise_ = true;
}

// ---------------------------------------------------------------------------------------
// ParametricLayer

ParametricLayer::ParametricLayer(std::size_t index, const LayerSpec& spec, Shape3 input, bool bayesian,
                                 std::uint64_t init_seed)
    : Layer(index), spec_(spec), input_(input), bayesian_(bayesian) {
  if (spec.outputs == 0) throw ShapeMismatch("layer needs a positive output count");
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
  if (spec.kind == LayerKind::dense) {
    output_ = {spec.outputs, 1, 1};
    fan_in = input.size();
    fan_out = spec.outputs;
    weights_.resize(spec.outputs * input.size());
  } else if (spec.kind == LayerKind::conv) {
    const std::size_t k = spec.kernel;
    if (k == 0 || spec.stride == 0) throw ShapeMismatch("conv needs positive kernel and stride");
    if (input.height + 2 * spec.padding < k || input.width + 2 * spec.padding < k) {
      throw ShapeMismatch("conv kernel larger than padded input");
    }
    output_ = {spec.outputs, (input.height + 2 * spec.padding - k) / spec.stride + 1,
               (input.width + 2 * spec.padding - k) / spec.stride + 1};
    fan_in = input.channels * k * k;
    fan_out = spec.outputs * k * k;
    weights_.resize(spec.outputs * input.channels * k * k);
  } else {
    throw ShapeMismatch("ParametricLayer accepts dense or conv specs only");
  }
  biases_.assign(spec.outputs, kInitBias);
  grad_w_.assign(weights_.size(), 0.0);
  grad_b_.assign(biases_.size(), 0.0);

  KeyedRng rng(init_seed, index, Stream::init, 0);
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& w : weights_) w = rng.uniform(-limit, limit);

  if (bayesian_) {
    vw_ = VariationalGroup(weights_.size(), Stream::weight_noise, Stream::weight_stabilize);
    vb_ = VariationalGroup(biases_.size(), Stream::bias_noise, Stream::bias_stabilize);
    vw_.params.m = weights_;
    vb_.params.m = biases_;
    vw_.params.delta = kInitDelta;
    vb_.params.delta = kInitDelta;
    vw_.params.gamma = rng.coin() ? kGammaFloor : -kGammaFloor;
    vb_.params.gamma = rng.coin() ? kGammaFloor : -kGammaFloor;
    vw_.prior.zeta = spec.prior_std;
    vb_.prior.zeta = spec.bias_prior_std;
  }
}

std::array<std::size_t, 4> ParametricLayer::kernel_dims() const {
  if (spec_.kind == LayerKind::dense) return {spec_.outputs, input_.size(), 1, 1};
  return {spec_.outputs, input_.channels, spec_.kernel, spec_.kernel};
}

Tensor ParametricLayer::forward(const Tensor& input, const PassContext& ctx) {
  check_input(input, input_, spec_.kind == LayerKind::dense ? "dense forward" : "conv forward");
  if (bayesian_) {
    vw_.draw(ctx, index(), weights_);
    vb_.draw(ctx, index(), biases_);
  }
  return spec_.kind == LayerKind::dense ? forward_dense(input) : forward_conv(input);
}

Tensor ParametricLayer::backward(const Tensor& grad_output, const GradScale& scale) {
  if (last_input_.shape.empty()) throw MissingForward("backward called before forward");
  if (grad_output.batch() != last_input_.batch() || grad_output.stride() != output_.size()) {
    throw ShapeMismatch("backward: gradient shape " + grad_output.shape_string() + " does not match output");
  }
  Tensor grad_in = spec_.kind == LayerKind::dense ? backward_dense(grad_output) : backward_conv(grad_output);
  if (bayesian_) {
    vw_.backward(grad_w_, scale);
    vb_.backward(grad_b_, scale);
  }
  return grad_in;
}

Tensor ParametricLayer::forward_dense(const Tensor& input) {
  const std::size_t batch = input.batch();
  const std::size_t in = input_.size();
  const std::size_t out = spec_.outputs;
  last_input_ = input;
  Tensor y({batch, out});
  gemm_nt(batch, out, in, input.data.data(), weights_.data(), y.data.data());
  for (std::size_t b = 0; b < batch; ++b) {
    double* row = y.data.data() + b * out;
    for (std::size_t o = 0; o < out; ++o) row[o] += biases_[o];
  }
  return y;
}

Tensor ParametricLayer::backward_dense(const Tensor& grad_output) {
  const std::size_t batch = grad_output.batch();
  const std::size_t in = input_.size();
  const std::size_t out = spec_.outputs;
  gemm_tn(out, in, batch, grad_output.data.data(), last_input_.data.data(), grad_w_.data());
  std::fill(grad_b_.begin(), grad_b_.end(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = grad_output.data.data() + b * out;
    for (std::size_t o = 0; o < out; ++o) grad_b_[o] += row[o];
  }
  Tensor dx(last_input_.shape);
  gemm_nn(batch, in, out, grad_output.data.data(), weights_.data(), dx.data.data());
  return dx;
}

void im2col(const double* image, Shape3 in, std::size_t kernel, std::size_t stride, std::size_t padding,
            std::size_t out_h, std::size_t out_w, double* cols) {
  const std::size_t positions = out_h * out_w;
  for (std::size_t c = 0; c < in.channels; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        double* dst = cols + ((c * kernel + ky) * kernel + kx) * positions;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(in.height) &&
                                ix < static_cast<std::ptrdiff_t>(in.width);
            dst[oy * out_w + ox] = inside ? image[(c * in.height + iy) * in.width + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, Shape3 in, std::size_t kernel, std::size_t stride, std::size_t padding,
            std::size_t out_h, std::size_t out_w, double* image) {
  const std::size_t positions = out_h * out_w;
  std::fill(image, image + in.size(), 0.0);
  for (std::size_t c = 0; c < in.channels; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        const double* src = cols + ((c * kernel + ky) * kernel + kx) * positions;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.height)) continue;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.width)) continue;
            image[(c * in.height + iy) * in.width + ix] += src[oy * out_w + ox];
          }
        }
      }
    }
  }
}

Tensor ParametricLayer::forward_conv(const Tensor& input) {
  const std::size_t batch = input.batch();
  const std::size_t k = spec_.kernel;
  const std::size_t patch = input_.channels * k * k;
  const std::size_t positions = output_.height * output_.width;
  const std::size_t oc = spec_.outputs;
  last_input_ = input;
  cols_.resize(batch * patch * positions);
  Tensor y(batch_shape(batch, output_));
  parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t b = b0; b < b1; ++b) {
      double* col = cols_.data() + b * patch * positions;
      im2col(input.data.data() + b * input_.size(), input_, k, spec_.stride, spec_.padding, output_.height,
             output_.width, col);
      double* out = y.data.data() + b * output_.size();
      gemm_nn(oc, positions, patch, weights_.data(), col, out);
      for (std::size_t o = 0; o < oc; ++o) {
        for (std::size_t p = 0; p < positions; ++p) out[o * positions + p] += biases_[o];
      }
    }
  });
  return y;
}

Tensor ParametricLayer::backward_conv(const Tensor& grad_output) {
  const std::size_t batch = grad_output.batch();
  const std::size_t k = spec_.kernel;
  const std::size_t patch = input_.channels * k * k;
  const std::size_t positions = output_.height * output_.width;
  const std::size_t oc = spec_.outputs;

  std::fill(grad_w_.begin(), grad_w_.end(), 0.0);
  std::fill(grad_b_.begin(), grad_b_.end(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* dy = grad_output.data.data() + b * output_.size();
    gemm_nt(oc, patch, positions, dy, cols_.data() + b * patch * positions, grad_w_.data(), true);
    for (std::size_t o = 0; o < oc; ++o) {
      double s = 0.0;
      for (std::size_t p = 0; p < positions; ++p) s += dy[o * positions + p];
      grad_b_[o] += s;
    }
  }

  Tensor dx(last_input_.shape);
  parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
    std::vector<double> dcol(patch * positions);
    for (std::size_t b = b0; b < b1; ++b) {
      const double* dy = grad_output.data.data() + b * output_.size();
      gemm_tn(patch, positions, oc, weights_.data(), dy, dcol.data());
      col2im(dcol.data(), input_, k, spec_.stride, spec_.padding, output_.height, output_.width,
             dx.data.data() + b * input_.size());
    }
  });
  return dx;
}

std::vector<ParamBlock> ParametricLayer::params() {
  const std::string prefix = std::string(to_string(spec_.kind)) + std::to_string(index());
  if (!bayesian_) {
    return {{prefix + ".w", weights_, grad_w_, spec_.weight_decay},
            {prefix + ".b", biases_, grad_b_, spec_.weight_decay}};
  }
  return {
      {prefix + ".w.m", vw_.params.m, vw_.grad_m, 0.0},
      {prefix + ".w.delta", {&vw_.params.delta, 1}, {&vw_.grad_delta, 1}, 0.0},
      {prefix + ".w.gamma", {&vw_.params.gamma, 1}, {&vw_.grad_gamma, 1}, 0.0},
      {prefix + ".b.m", vb_.params.m, vb_.grad_m, 0.0},
      {prefix + ".b.delta", {&vb_.params.delta, 1}, {&vb_.grad_delta, 1}, 0.0},
      {prefix + ".b.gamma", {&vb_.params.gamma, 1}, {&vb_.grad_gamma, 1}, 0.0},
  };
}

double ParametricLayer::kl() const { return bayesian_ ? vw_.kl() + vb_.kl() : 0.0; }

std::unique_ptr<Layer> ParametricLayer::clone() const { return std::make_unique<ParametricLayer>(*this); }

// ---------------------------------------------------------------------------------------
// Activation, pooling, dropout

Tensor ReluLayer::forward(const Tensor& input, const PassContext&) {
  check_input(input, shape_, "relu forward");
  last_input_ = input;
  Tensor y = input;
  for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor ReluLayer::backward(const Tensor& grad_output, const GradScale&) {
  if (grad_output.size() != last_input_.size()) throw ShapeMismatch("relu backward: shape mismatch");
  Tensor dx(last_input_.shape);
  for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] = last_input_.data[i] > 0.0 ? grad_output.data[i] : 0.0;
  return dx;
}

MaxPoolLayer::MaxPoolLayer(std::size_t index, const LayerSpec& spec, Shape3 input)
    : Layer(index), spec_(spec), input_(input) {
  if (spec.kernel == 0 || spec.stride == 0) throw ShapeMismatch("maxpool needs positive window and stride");
  if (input.height < spec.kernel || input.width < spec.kernel) throw ShapeMismatch("maxpool window larger than input");
  output_ = {input.channels, (input.height - spec.kernel) / spec.stride + 1,
             (input.width - spec.kernel) / spec.stride + 1};
}

Tensor MaxPoolLayer::forward(const Tensor& input, const PassContext&) {
  check_input(input, input_, "maxpool forward");
  batch_ = input.batch();
  Tensor y(batch_shape(batch_, output_));
  argmax_.assign(y.size(), 0);
  const std::size_t k = spec_.kernel;
  const std::size_t s = spec_.stride;
  for (std::size_t b = 0; b < batch_; ++b) {
    for (std::size_t c = 0; c < input_.channels; ++c) {
      const std::size_t plane = (b * input_.channels + c) * input_.height * input_.width;
      for (std::size_t oy = 0; oy < output_.height; ++oy) {
        for (std::size_t ox = 0; ox < output_.width; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_at = plane + (oy * s) * input_.width + ox * s;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::size_t at = plane + (oy * s + ky) * input_.width + ox * s + kx;
              if (input.data[at] > best) {
                best = input.data[at];
                best_at = at;
              }
            }
          }
          const std::size_t o = ((b * output_.channels + c) * output_.height + oy) * output_.width + ox;
          y.data[o] = best;
          argmax_[o] = best_at;
        }
      }
    }
  }
  return y;
}

Tensor MaxPoolLayer::backward(const Tensor& grad_output, const GradScale&) {
  if (grad_output.size() != argmax_.size()) throw ShapeMismatch("maxpool backward: shape mismatch");
  Tensor dx(batch_shape(batch_, input_));
  for (std::size_t o = 0; o < argmax_.size(); ++o) dx.data[argmax_[o]] += grad_output.data[o];
  return dx;
}

DropoutLayer::DropoutLayer(std::size_t index, const LayerSpec& spec, Shape3 input)
    : Layer(index), spec_(spec), shape_(input) {
  if (!(spec.dropout_rate >= 0.0 && spec.dropout_rate < 1.0)) throw ShapeMismatch("dropout rate must be in [0, 1)");
}

Tensor DropoutLayer::forward(const Tensor& input, const PassContext& ctx) {
  check_input(input, shape_, "dropout forward");
  if (!ctx.training) {
    mask_.assign(input.size(), 1.0);
    return input;
  }
  const double keep_scale = 1.0 / (1.0 - spec_.dropout_rate);
  if (ctx.noise != NoiseMode::frozen || mask_.size() != input.size()) {
    KeyedRng rng(ctx.seed, index(), Stream::dropout, ctx.step);
    mask_.resize(input.size());
    for (auto& m : mask_) m = rng.uniform() >= spec_.dropout_rate ? keep_scale : 0.0;
  }
  Tensor y = input;
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= mask_[i];
  return y;
}

Tensor DropoutLayer::backward(const Tensor& grad_output, const GradScale&) {
  if (grad_output.size() != mask_.size()) throw ShapeMismatch("dropout backward: shape mismatch");
  Tensor dx = grad_output;
  for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] *= mask_[i];
  return dx;
}

std::unique_ptr<Layer> make_layer(std::size_t index, const LayerSpec& spec, Shape3 input, bool bayesian,
                                  std::uint64_t init_seed) {
  switch (spec.kind) {
    case LayerKind::dense:
    case LayerKind::conv: return std::make_unique<ParametricLayer>(index, spec, input, bayesian, init_seed);
    case LayerKind::relu: return std::make_unique<ReluLayer>(index, spec, input);
    case LayerKind::maxpool: return std::make_unique<MaxPoolLayer>(index, spec, input);
    case LayerKind::dropout: return std::make_unique<DropoutLayer>(index, spec, input);
  }
  throw ShapeMismatch("unknown layer kind");
}

// ---------------------------------------------------------------------------------------
// Loss

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  const double top = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - top);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

LossAndGrad softmax_cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) throw IndexOutOfRange("softmax_cross_entropy: label out of range");
  const double top = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - top);
  const double log_norm = top + std::log(sum);
  LossAndGrad out;
  out.loss = log_norm - logits[label];
  out.dlogits.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out.dlogits[i] = std::exp(logits[i] - log_norm);
  out.dlogits[label] -= 1.0;
  return out;
}

BatchLoss softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t batch = logits.batch();
  if (labels.size() != batch) throw ShapeMismatch("softmax_cross_entropy: label count differs from batch");
  BatchLoss out;
  out.dlogits = Tensor(logits.shape);
  const std::size_t classes = logits.stride();
  const double inv = 1.0 / static_cast<double>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    LossAndGrad one = softmax_cross_entropy(logits.row(b), static_cast<std::size_t>(labels[b]));
    out.loss += one.loss;
    for (std::size_t c = 0; c < classes; ++c) out.dlogits.data[b * classes + c] = one.dlogits[c] * inv;
  }
  out.loss *= inv;
  return out;
}

}  // namespace cbnn
