#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace cbnn {

// Dense row-major tensor of doubles. Axis 0 is the batch axis wherever a batch exists.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0)
      : shape(std::move(dims)), data(element_count(shape), fill) {}

  static std::size_t element_count(const std::vector<std::size_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t size() const { return data.size(); }
  std::size_t batch() const { return shape.empty() ? 0 : shape[0]; }
  // Elements per batch entry.
  std::size_t stride() const { return shape.empty() || shape[0] == 0 ? 0 : data.size() / shape[0]; }

  std::span<double> row(std::size_t b) { return {data.data() + b * stride(), stride()}; }
  std::span<const double> row(std::size_t b) const { return {data.data() + b * stride(), stride()}; }

  std::string shape_string() const {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }
};

// Channel/height/width of one example's feature map. Dense activations are (n, 1, 1).
struct Shape3 {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t size() const { return channels * height * width; }
  bool operator==(const Shape3&) const = default;
};

}  // namespace cbnn
