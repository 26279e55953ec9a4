#include "star/optim.hpp"

#include <cmath>

namespace star::ad {

template <typename T>
Parameter<T>& ParameterSet<T>::add(std::string name, Tensor<T> init) {
  if (find(name) != nullptr) throw AutodiffError("duplicate parameter name '" + name + "'");
  Parameter<T>& p = params_.emplace_back();
  p.name = std::move(name);
  p.value = std::move(init);
  p.index = params_.size() - 1;
  return p;
}

template <typename T>
Parameter<T>* ParameterSet<T>::find(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template <typename T>
const Parameter<T>* ParameterSet<T>::find(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
void ParameterSet<T>::set_trainable(std::string_view prefix, bool trainable) {
  for (auto& p : params_) {
    if (std::string_view(p.name).starts_with(prefix)) p.trainable = trainable;
  }
}

template <typename T>
GradientBuffer<T>::GradientBuffer(const ParameterSet<T>& params) {
  for (const auto& p : params) grads_.emplace_back(p.value.shape);
}

template <typename T>
void GradientBuffer<T>::accumulate(const Tape<T>& tape, const ParameterSet<T>& params) {
  for (const auto& p : params) {
    const Tensor<T>* g = tape.param_grad(p);
    if (g == nullptr) continue;
    auto& dst = grads_[p.index];
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += g->data[i];
  }
}

template <typename T>
void GradientBuffer<T>::scale(T factor) {
  for (auto& g : grads_) {
    for (auto& v : g.data) v *= factor;
  }
}

template <typename T>
void GradientBuffer<T>::zero() {
  for (auto& g : grads_) std::fill(g.data.begin(), g.data.end(), T{0});
}

template <typename T>
T GradientBuffer<T>::global_norm() const {
  double s = 0;
  for (const auto& g : grads_) {
    for (auto v : g.data) s += static_cast<double>(v) * v;
  }
  return static_cast<T>(std::sqrt(s));
}

template <typename T>
void adam_step(ParameterSet<T>& params, const GradientBuffer<T>& grads, AdamState<T>& state,
               const AdamConfig& cfg) {
  if (!(cfg.lr > 0)) throw AutodiffError("adam learning rate must be positive");
  if (grads.size() != params.size()) {
    throw AutodiffError("adam: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params.size()) + " parameters");
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.value.shape);
      state.v.emplace_back(p.value.shape);
    }
  }
  for (const auto& p : params) {
    const auto& g = grads[p.index];
    if (g.shape != p.value.shape || state.m[p.index].shape != p.value.shape) {
      throw ShapeError("adam: shape mismatch for '" + p.name + "': " + to_string(p.value.shape) +
                       " vs gradient " + to_string(g.shape));
    }
    if (!p.trainable) continue;
    for (auto v : g.data) {
      if (!std::isfinite(v)) throw AutodiffError("non-finite gradient for parameter '" + p.name + "'");
    }
  }
  ++state.step;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (auto& p : params) {
    if (!p.trainable) continue;
    const auto& g = grads[p.index];
    auto& m = state.m[p.index];
    auto& v = state.v[p.index];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double gi = g.data[i];
      const double mi = b1 * m.data[i] + (1.0 - b1) * gi;
      const double vi = b2 * v.data[i] + (1.0 - b2) * gi * gi;
      m.data[i] = static_cast<T>(mi);
      v.data[i] = static_cast<T>(vi);
      const double update = cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
      p.value.data[i] = static_cast<T>(p.value.data[i] - update);
    }
  }
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class GradientBuffer<float>;
template class GradientBuffer<double>;
template void adam_step(ParameterSet<float>&, const GradientBuffer<float>&, AdamState<float>&,
                        const AdamConfig&);
template void adam_step(ParameterSet<double>&, const GradientBuffer<double>&, AdamState<double>&,
                        const AdamConfig&);

}  // namespace star::ad
