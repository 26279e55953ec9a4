#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <string_view>
#include <vector>

#include "star/autodiff.hpp"

namespace star::ad {

// Owns parameters with stable addresses, in registration order.
template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(std::string name, Tensor<T> init);
  Parameter<T>* find(std::string_view name);
  const Parameter<T>* find(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const;
  // Marks every parameter whose name starts with `prefix`.
  void set_trainable(std::string_view prefix, bool trainable);

 private:
  std::deque<Parameter<T>> params_;
};

// Per-parameter gradient sums over a minibatch.
template <typename T>
class GradientBuffer {
 public:
  explicit GradientBuffer(const ParameterSet<T>& params);
  // Adds whatever gradient each parameter received on `tape`.
  void accumulate(const Tape<T>& tape, const ParameterSet<T>& params);
  void scale(T factor);
  void zero();
  const Tensor<T>& operator[](std::size_t i) const { return grads_[i]; }
  Tensor<T>& operator[](std::size_t i) { return grads_[i]; }
  std::size_t size() const { return grads_.size(); }
  T global_norm() const;

 private:
  std::vector<Tensor<T>> grads_;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t step = 0;
};

// Bias-corrected Adam. Non-trainable parameters are left untouched.
// Throws AutodiffError (naming the parameter) before modifying anything if a
// gradient is non-finite.
template <typename T>
void adam_step(ParameterSet<T>& params, const GradientBuffer<T>& grads, AdamState<T>& state,
               const AdamConfig& cfg);

}  // namespace star::ad
