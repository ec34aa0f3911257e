#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "zoomloc/common/error.hpp"
#include "zoomloc/common/rng.hpp"

namespace zoomloc::nncore {

// Dense n-dimensional value buffer with an optional gradient buffer of the
// same shape. Image tensors use NHWC layout.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;
  std::vector<T> grad;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel(), T(0));
  }

  std::size_t numel() const {
    std::size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw ShapeMismatch("tensor dimension must be positive");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  void alloc_grad() { grad.assign(data.size(), T(0)); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

// He-uniform initialization: uniform in [-limit, limit] with
// limit = sqrt(6 / fan_in). Biases stay zero-initialized elsewhere.
template <typename T>
std::vector<T> he_uniform(std::size_t count, std::size_t fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<T> out(count);
  for (T& v : out) v = static_cast<T>(rng.uniform(-limit, limit));
  return out;
}

}  // namespace zoomloc::nncore
