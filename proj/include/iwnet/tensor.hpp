#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "iwnet/common.hpp"

namespace iwnet {

// (batch, channels, z, y, x)
struct Shape5 {
  int n = 0;
  int c = 0;
  int z = 0;
  int y = 0;
  int x = 0;

  std::size_t spatial() const { return static_cast<std::size_t>(z) * y * x; }
  std::size_t size() const { return static_cast<std::size_t>(n) * c * spatial(); }
  bool same_spatial(const Shape5& o) const { return z == o.z && y == o.y && x == o.x; }
  bool operator==(const Shape5&) const = default;
};

// Activations and their gradients are both plain Tensor5 values; a backward
// rule takes dL/d(output) as a tensor and produces dL/d(input) as another.
template <class T>
struct Tensor5 {
  Shape5 shape;
  std::vector<T> values;

  Tensor5() = default;
  explicit Tensor5(const Shape5& s, T fill = T{}) : shape(s), values(s.size(), fill) {}

  std::size_t size() const { return values.size(); }

  // Contiguous spatial block of one (sample, channel).
  T* plane(int n, int c) { return values.data() + (static_cast<std::size_t>(n) * shape.c + c) * shape.spatial(); }
  const T* plane(int n, int c) const {
    return values.data() + (static_cast<std::size_t>(n) * shape.c + c) * shape.spatial();
  }

  T& at(int n, int c, int z, int y, int x) {
    return plane(n, c)[(static_cast<std::size_t>(z) * shape.y + y) * shape.x + x];
  }
  const T& at(int n, int c, int z, int y, int x) const {
    return plane(n, c)[(static_cast<std::size_t>(z) * shape.y + y) * shape.x + x];
  }
};

// A learnable array with its accumulated gradient.
template <class T>
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool trainable = true;  // running BN statistics are stored as non-trainable params

  Param() = default;
  Param(std::string n, std::vector<int> s, T fill = T{}) : name(std::move(n)), shape(std::move(s)) {
    const auto count = static_cast<std::size_t>(
        std::accumulate(shape.begin(), shape.end(), std::size_t{1}, [](std::size_t a, int b) { return a * b; }));
    value.assign(count, fill);
    grad.assign(count, T{});
  }

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T{}); }
};

}  // namespace iwnet
