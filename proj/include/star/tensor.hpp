#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace star {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t numel(const Shape& shape);

// Dense row-major array. Rank >= 1; a scalar is shape {1}.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(numel(shape), fill) {
    check_shape();
  }
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    check_shape();
    if (data.size() != numel(shape)) {
      throw ShapeError("tensor of shape " + to_string(shape) + " given " +
                       std::to_string(data.size()) + " values");
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T{0}) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor vector(std::size_t n, T fill = T{0}) { return Tensor({n}, fill); }
  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  std::size_t rank() const { return shape.size(); }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  // Leading axes flattened; the last axis is the "row".
  std::size_t cols() const { return shape.empty() ? 0 : shape.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : data.size() / cols(); }

  T& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

 private:
  void check_shape() const {
    if (shape.empty()) throw ShapeError("tensor needs rank >= 1");
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dims must be positive, got " + to_string(shape));
    }
  }
};

}  // namespace star
