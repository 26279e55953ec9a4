#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "star/tensor.hpp"

// Reverse-mode automatic differentiation over dense arrays.
//
// A Tape records every operator applied during a forward pass. Values are
// computed eagerly; backward() then walks the tape in reverse creation
// order. Tapes are single-use: one forward, at most one backward.
namespace star::ad {

class AutodiffError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
  std::size_t index = 0;  // position in the owning ParameterSet
};

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape; }
  // Gradient after backward(); zeros if nothing flowed here.
  Tensor<T> grad() const;

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  // Receives the tape and the node's own id; reads grad_of(self) and
  // accumulates into its parents with accumulate_grad().
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Tensor<T> value);
  Var<T> leaf(Tensor<T> value);  // differentiable input
  // One node per parameter per tape; repeated calls return the same Var.
  Var<T> param(const Parameter<T>& p);

  void backward(const Var<T>& loss);
  bool backward_done() const { return backward_done_; }

  // Gradient that reached a parameter, or nullptr if it was unused / frozen.
  const Tensor<T>* param_grad(const Parameter<T>& p) const;

  // Operator plumbing.
  Var<T> push(Tensor<T> value, std::vector<std::size_t> parents, BackwardFn fn);
  const Tensor<T>& value_of(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor<T>& grad_of(std::size_t id) const;
  Tensor<T>& accumulate_grad(std::size_t id);  // zero-initialised on first use
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };

  bool grad_enabled_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
};

// ---- operators --------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false);
// Same shape, or b is rank-1 matching the trailing axis of a.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);
template <typename T>
Var<T> sigmoid(const Var<T>& a);
template <typename T>
Var<T> relu(const Var<T>& a);
template <typename T>
Var<T> softmax(const Var<T>& a);  // last axis
template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));
template <typename T>
Var<T> embed(const Var<T>& table, std::span<const int> ids);
// Summed negative log-likelihood of `targets` under row-wise softmax(logits).
// Rows whose target equals ignore_index contribute nothing.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets, int ignore_index = -1);
// axis 0 stacks rows; axis -1 joins along the trailing axis.
template <typename T>
Var<T> concat(std::span<const Var<T>> parts, int axis);
// Adds kMaskedLogit wherever visible[i] == 0. `visible` has a's element count.
template <typename T>
Var<T> mask_add(const Var<T>& a, std::span<const std::uint8_t> visible);
template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> slice_cols(const Var<T>& a, std::size_t start, std::size_t count);
// Rows of a (or elements, for rank-1 a) at `indices`, in the given order.
template <typename T>
Var<T> gather_rows(const Var<T>& a, std::span<const std::size_t> indices);
template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape);

inline constexpr double kMaskedLogit = -1e9;

}  // namespace star::ad
