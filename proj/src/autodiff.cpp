#include "star/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "star/kernels.hpp"

namespace star {

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

}  // namespace star

namespace star::ad {

// ---- Var / Tape -------------------------------------------------------

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value_of(id_);
}

template <typename T>
Tensor<T> Var<T>::grad() const {
  if (tape_->has_grad(id_)) return tape_->grad_of(id_);
  return Tensor<T>(value().shape);
}

template <typename T>
Var<T> Tape<T>::push(Tensor<T> value, std::vector<std::size_t> parents, BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  if (grad_enabled_) {
    for (auto p : parents) node.requires_grad = node.requires_grad || nodes_[p].requires_grad;
    if (node.requires_grad) {
      node.parents = std::move(parents);
      node.backward = std::move(fn);
    }
  }
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  return push(std::move(value), {}, nullptr);
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  Var<T> v = push(std::move(value), {}, nullptr);
  nodes_[v.id()].requires_grad = grad_enabled_;
  return v;
}

template <typename T>
Var<T> Tape<T>::param(const Parameter<T>& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<T>(this, it->second);
  Var<T> v = push(p.value, {}, nullptr);
  nodes_[v.id()].requires_grad = grad_enabled_ && p.trainable;
  param_nodes_.emplace(&p, v.id());
  return v;
}

template <typename T>
const Tensor<T>* Tape<T>::param_grad(const Parameter<T>& p) const {
  auto it = param_nodes_.find(&p);
  if (it == param_nodes_.end()) return nullptr;
  const Node& n = nodes_[it->second];
  if (!n.requires_grad || n.grad.empty()) return nullptr;
  return &n.grad;
}

template <typename T>
const Tensor<T>& Tape<T>::grad_of(std::size_t id) const {
  return nodes_[id].grad;
}

template <typename T>
Tensor<T>& Tape<T>::accumulate_grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape);
  return n.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (loss.tape_ != this) throw AutodiffError("loss belongs to a different tape");
  if (backward_done_) throw AutodiffError("backward already ran on this tape; build a new tape");
  if (!grad_enabled_) throw AutodiffError("tape was created with gradients disabled");
  const Node& root = nodes_[loss.id()];
  if (root.value.size() != 1) {
    throw AutodiffError("loss must be a scalar, got shape " + to_string(root.value.shape));
  }
  if (!root.requires_grad) throw AutodiffError("loss is detached from every differentiable leaf");
  backward_done_ = true;
  accumulate_grad(loss.id()).data[0] = T{1};
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, id);
  }
}

// ---- helpers ----------------------------------------------------------

namespace {

template <typename T>
void require_rank2(const Var<T>& v, const char* op) {
  if (v.value().rank() != 2) {
    throw ShapeError(std::string(op) + " expects a matrix, got " + to_string(v.shape()));
  }
}

template <typename T>
bool same_tape(const Var<T>& a, const Var<T>& b) {
  return &a.tape() == &b.tape();
}

template <typename T>
void check_tapes(const Var<T>& a, const Var<T>& b, const char* op) {
  if (!same_tape(a, b)) throw AutodiffError(std::string(op) + ": operands on different tapes");
}

template <typename T>
void axpy_into(Tensor<T>& dst, const Tensor<T>& src, T s = T{1}) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += s * src.data[i];
}

}  // namespace

// ---- operators --------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a, bool trans_b) {
  check_tapes(a, b, "matmul");
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const auto& A = a.value();
  const auto& B = b.value();
  const std::size_t m = trans_a ? A.shape[1] : A.shape[0];
  const std::size_t k = trans_a ? A.shape[0] : A.shape[1];
  const std::size_t kb = trans_b ? B.shape[1] : B.shape[0];
  const std::size_t n = trans_b ? B.shape[0] : B.shape[1];
  if (k != kb) {
    throw ShapeError("matmul inner dims differ: " + to_string(A.shape) + (trans_a ? "^T" : "") +
                     " x " + to_string(B.shape) + (trans_b ? "^T" : ""));
  }
  Tensor<T> out = Tensor<T>::matrix(m, n);
  kernels::gemm(trans_a, trans_b, m, n, k, A.data.data(), B.data.data(), out.data.data(), false);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), {ia, ib}, [=](Tape<T>& t, std::size_t self) {
    const T* g = t.grad_of(self).data.data();
    const T* Av = t.value_of(ia).data.data();
    const T* Bv = t.value_of(ib).data.data();
    if (t.requires_grad(ia)) {
      T* da = t.accumulate_grad(ia).data.data();
      if (!trans_a) {
        kernels::gemm(false, !trans_b, m, k, n, g, Bv, da, true);
      } else {
        kernels::gemm(trans_b, true, k, m, n, Bv, g, da, true);
      }
    }
    if (t.requires_grad(ib)) {
      T* db = t.accumulate_grad(ib).data.data();
      if (!trans_b) {
        kernels::gemm(!trans_a, false, k, n, m, Av, g, db, true);
      } else {
        kernels::gemm(true, trans_a, n, k, m, g, Av, db, true);
      }
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_tapes(a, b, "add");
  const auto& A = a.value();
  const auto& B = b.value();
  const bool same = A.shape == B.shape;
  const bool bcast = !same && B.rank() == 1 && B.size() == A.cols();
  if (!same && !bcast) {
    throw ShapeError("add shape mismatch: " + to_string(A.shape) + " + " + to_string(B.shape));
  }
  Tensor<T> out = A;
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i];
  } else {
    const std::size_t c = A.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i % c];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), {ia, ib}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    if (t.requires_grad(ia)) axpy_into(t.accumulate_grad(ia), g);
    if (t.requires_grad(ib)) {
      auto& db = t.accumulate_grad(ib);
      if (same) {
        axpy_into(db, g);
      } else {
        const std::size_t c = db.size();
        for (std::size_t i = 0; i < g.size(); ++i) db.data[i % c] += g.data[i];
      }
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return add(a, scale(b, T{-1}));
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_tapes(a, b, "mul");
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape != B.shape) {
    throw ShapeError("mul shape mismatch: " + to_string(A.shape) + " * " + to_string(B.shape));
  }
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= B.data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), {ia, ib}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    if (t.requires_grad(ia)) {
      auto& da = t.accumulate_grad(ia);
      const auto& bv = t.value_of(ib);
      for (std::size_t i = 0; i < g.size(); ++i) da.data[i] += g.data[i] * bv.data[i];
    }
    if (t.requires_grad(ib)) {
      auto& db = t.accumulate_grad(ib);
      const auto& av = t.value_of(ia);
      for (std::size_t i = 0; i < g.size(); ++i) db.data[i] += g.data[i] * av.data[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= factor;
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [=](Tape<T>& t, std::size_t self) {
    axpy_into(t.accumulate_grad(ia), t.grad_of(self), factor);
  });
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = stable_sigmoid(v);
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    const auto& y = t.value_of(self);
    auto& da = t.accumulate_grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) da.data[i] += g.data[i] * y.data[i] * (T{1} - y.data[i]);
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = v > T{0} ? v : T{0};
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    const auto& x = t.value_of(ia);
    auto& da = t.accumulate_grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x.data[i] > T{0}) da.data[i] += g.data[i];
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& a) {
  Tensor<T> out = a.value();
  const std::size_t rows = out.rows(), cols = out.cols();
  kernels::softmax_rows(out.data.data(), rows, cols);
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    const auto& y = t.value_of(self);
    auto& da = t.accumulate_grad(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g.data.data() + r * cols;
      const T* yr = y.data.data() + r * cols;
      T dot{0};
      for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
      T* dr = da.data.data() + r * cols;
      for (std::size_t j = 0; j < cols; ++j) dr[j] += yr[j] * (gr[j] - dot);
    }
  });
}

template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  check_tapes(x, gamma, "layernorm");
  check_tapes(x, beta, "layernorm");
  const auto& X = x.value();
  const std::size_t rows = X.rows(), cols = X.cols();
  if (gamma.value().shape != Shape{cols} || beta.value().shape != Shape{cols}) {
    throw ShapeError("layernorm affine terms must be [" + std::to_string(cols) + "], got " +
                     to_string(gamma.shape()) + " and " + to_string(beta.shape()));
  }
  Tensor<T> xhat(X.shape);
  std::vector<T> inv_std(rows);
  kernels::normalize_rows(X.data.data(), xhat.data.data(), inv_std.data(), rows, cols, eps);
  Tensor<T> out = xhat;
  const auto& G = gamma.value();
  const auto& Bt = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) out.data[r * cols + j] = out.data[r * cols + j] * G.data[j] + Bt.data[j];
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().push(
      std::move(out), {ix, ig, ib},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_of(self);
        const auto& Gv = t.value_of(ig);
        if (t.requires_grad(ig)) {
          auto& dg = t.accumulate_grad(ig);
          for (std::size_t i = 0; i < g.size(); ++i) dg.data[i % cols] += g.data[i] * xhat.data[i];
        }
        if (t.requires_grad(ib)) {
          auto& db = t.accumulate_grad(ib);
          for (std::size_t i = 0; i < g.size(); ++i) db.data[i % cols] += g.data[i];
        }
        if (t.requires_grad(ix)) {
          auto& dx = t.accumulate_grad(ix);
          std::vector<T> dxhat(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_d{0}, mean_dx{0};
            for (std::size_t j = 0; j < cols; ++j) {
              dxhat[j] = g.data[r * cols + j] * Gv.data[j];
              mean_d += dxhat[j];
              mean_dx += dxhat[j] * xhat.data[r * cols + j];
            }
            mean_d /= static_cast<T>(cols);
            mean_dx /= static_cast<T>(cols);
            for (std::size_t j = 0; j < cols; ++j) {
              dx.data[r * cols + j] +=
                  inv_std[r] * (dxhat[j] - mean_d - xhat.data[r * cols + j] * mean_dx);
            }
          }
        }
      });
}

template <typename T>
Var<T> embed(const Var<T>& table, std::span<const int> ids) {
  require_rank2(table, "embed");
  const auto& W = table.value();
  const std::size_t vocab = W.shape[0], d = W.shape[1];
  if (ids.empty()) throw ShapeError("embed needs at least one id");
  std::vector<int> idv(ids.begin(), ids.end());
  Tensor<T> out = Tensor<T>::matrix(idv.size(), d);
  for (std::size_t i = 0; i < idv.size(); ++i) {
    if (idv[i] < 0 || static_cast<std::size_t>(idv[i]) >= vocab) {
      throw ShapeError("embed id " + std::to_string(idv[i]) + " outside table " + to_string(W.shape));
    }
    std::copy_n(W.data.begin() + idv[i] * d, d, out.data.begin() + i * d);
  }
  const std::size_t it = table.id();
  return table.tape().push(std::move(out), {it}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    auto& dw = t.accumulate_grad(it);
    for (std::size_t i = 0; i < idv.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) dw.data[idv[i] * d + j] += g.data[i * d + j];
    }
  });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets, int ignore_index) {
  require_rank2(logits, "cross_entropy");
  const auto& L = logits.value();
  const std::size_t rows = L.shape[0], cols = L.shape[1];
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     to_string(L.shape));
  }
  std::vector<int> tv(targets.begin(), targets.end());
  Tensor<T> probs = L;
  kernels::softmax_rows(probs.data.data(), rows, cols);
  T loss{0};
  for (std::size_t r = 0; r < rows; ++r) {
    if (tv[r] == ignore_index) continue;
    if (tv[r] < 0 || static_cast<std::size_t>(tv[r]) >= cols) {
      throw ShapeError("cross_entropy target " + std::to_string(tv[r]) + " outside " +
                       std::to_string(cols) + " classes");
    }
    // log-sum-exp form keeps the value exact for extreme logits
    const T* lr = L.data.data() + r * cols;
    const T mx = *std::max_element(lr, lr + cols);
    T se{0};
    for (std::size_t j = 0; j < cols; ++j) se += std::exp(lr[j] - mx);
    loss += (mx + std::log(se)) - lr[tv[r]];
  }
  const std::size_t il = logits.id();
  return logits.tape().push(
      Tensor<T>::scalar(loss), {il}, [=, probs = std::move(probs)](Tape<T>& t, std::size_t self) {
        const T g = t.grad_of(self).data[0];
        auto& dl = t.accumulate_grad(il);
        for (std::size_t r = 0; r < rows; ++r) {
          if (tv[r] == ignore_index) continue;
          for (std::size_t j = 0; j < cols; ++j) {
            const T onehot = static_cast<int>(j) == tv[r] ? T{1} : T{0};
            dl.data[r * cols + j] += g * (probs.data[r * cols + j] - onehot);
          }
        }
      });
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Tape<T>& tape = parts[0].tape();
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    if (&p.tape() != &tape) throw AutodiffError("concat: operands on different tapes");
    ids.push_back(p.id());
  }
  if (axis == 0) {
    const auto& first = parts[0].value();
    const std::size_t cols = first.cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
      const auto& v = p.value();
      if (v.rank() != first.rank() || v.cols() != cols || (v.rank() > 2)) {
        throw ShapeError("concat axis 0: incompatible " + to_string(first.shape) + " and " +
                         to_string(v.shape));
      }
      rows += first.rank() == 1 ? v.size() : v.rows();
    }
    Shape shape = first.rank() == 1 ? Shape{rows} : Shape{rows, cols};
    std::vector<T> data;
    data.reserve(numel(shape));
    for (const auto& p : parts) data.insert(data.end(), p.value().data.begin(), p.value().data.end());
    return tape.push(Tensor<T>(shape, std::move(data)), ids, [ids](Tape<T>& t, std::size_t self) {
      const auto& g = t.grad_of(self);
      std::size_t off = 0;
      for (auto id : ids) {
        const std::size_t n = t.value_of(id).size();
        if (t.requires_grad(id)) {
          auto& d = t.accumulate_grad(id);
          for (std::size_t i = 0; i < n; ++i) d.data[i] += g.data[off + i];
        }
        off += n;
      }
    });
  }
  if (axis != -1) throw ShapeError("concat supports axis 0 or -1, got " + std::to_string(axis));
  const std::size_t rows = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    if (v.rows() != rows || v.rank() != parts[0].value().rank()) {
      throw ShapeError("concat axis -1: incompatible " + to_string(parts[0].shape()) + " and " +
                       to_string(v.shape));
    }
    widths.push_back(v.cols());
    total += v.cols();
  }
  Shape shape = parts[0].shape();
  shape.back() = total;
  Tensor<T> out(shape);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data.begin() + r * widths[k], widths[k], out.data.begin() + r * total + off);
    }
    off += widths[k];
  }
  return tape.push(std::move(out), ids, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    std::size_t o = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        auto& d = t.accumulate_grad(ids[k]);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[k]; ++j) d.data[r * widths[k] + j] += g.data[r * total + o + j];
        }
      }
      o += widths[k];
    }
  });
}

template <typename T>
Var<T> mask_add(const Var<T>& a, std::span<const std::uint8_t> visible) {
  if (visible.size() != a.value().size()) {
    throw ShapeError("mask_add: mask of " + std::to_string(visible.size()) + " entries for " +
                     to_string(a.shape()));
  }
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!visible[i]) out.data[i] += static_cast<T>(kMaskedLogit);
  }
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [=](Tape<T>& t, std::size_t self) {
    axpy_into(t.accumulate_grad(ia), t.grad_of(self));
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s{0};
  for (auto v : a.value().data) s += v;
  const std::size_t ia = a.id();
  return a.tape().push(Tensor<T>::scalar(s), {ia}, [=](Tape<T>& t, std::size_t self) {
    const T g = t.grad_of(self).data[0];
    for (auto& v : t.accumulate_grad(ia).data) v += g;
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, std::size_t start, std::size_t count) {
  require_rank2(a, "slice_cols");
  const auto& A = a.value();
  const std::size_t rows = A.shape[0], cols = A.shape[1];
  if (count == 0 || start + count > cols) {
    throw ShapeError("slice_cols [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + to_string(A.shape));
  }
  Tensor<T> out = Tensor<T>::matrix(rows, count);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(A.data.begin() + r * cols + start, count, out.data.begin() + r * count);
  }
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    auto& da = t.accumulate_grad(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < count; ++j) da.data[r * cols + start + j] += g.data[r * count + j];
    }
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& a, std::span<const std::size_t> indices) {
  const auto& A = a.value();
  if (A.rank() > 2) throw ShapeError("gather_rows expects rank <= 2, got " + to_string(A.shape));
  if (indices.empty()) throw ShapeError("gather_rows needs at least one index");
  const std::size_t width = A.rank() == 1 ? 1 : A.shape[1];
  const std::size_t count = A.rank() == 1 ? A.size() : A.shape[0];
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  for (auto i : idx) {
    if (i >= count) {
      throw ShapeError("gather_rows index " + std::to_string(i) + " outside " + to_string(A.shape));
    }
  }
  Shape shape = A.rank() == 1 ? Shape{idx.size()} : Shape{idx.size(), width};
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(A.data.begin() + idx[r] * width, width, out.data.begin() + r * width);
  }
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    auto& da = t.accumulate_grad(ia);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t j = 0; j < width; ++j) da.data[idx[r] * width + j] += g.data[r * width + j];
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (numel(shape) != a.value().size()) {
    throw ShapeError("reshape " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  Tensor<T> out(std::move(shape), a.value().data);
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {ia}, [=](Tape<T>& t, std::size_t self) {
    axpy_into(t.accumulate_grad(ia), t.grad_of(self));
  });
}

#define STAR_INSTANTIATE(T)                                                                   \
  template class Var<T>;                                                                      \
  template class Tape<T>;                                                                     \
  template Var<T> matmul(const Var<T>&, const Var<T>&, bool, bool);                           \
  template Var<T> add(const Var<T>&, const Var<T>&);                                          \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                          \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                          \
  template Var<T> scale(const Var<T>&, T);                                                    \
  template Var<T> sigmoid(const Var<T>&);                                                     \
  template Var<T> relu(const Var<T>&);                                                        \
  template Var<T> softmax(const Var<T>&);                                                     \
  template Var<T> layernorm(const Var<T>&, const Var<T>&, const Var<T>&, T);                  \
  template Var<T> embed(const Var<T>&, std::span<const int>);                                 \
  template Var<T> cross_entropy(const Var<T>&, std::span<const int>, int);                    \
  template Var<T> concat(std::span<const Var<T>>, int);                                       \
  template Var<T> mask_add(const Var<T>&, std::span<const std::uint8_t>);                     \
  template Var<T> sum(const Var<T>&);                                                         \
  template Var<T> slice_cols(const Var<T>&, std::size_t, std::size_t);                        \
  template Var<T> gather_rows(const Var<T>&, std::span<const std::size_t>);                   \
  template Var<T> reshape(const Var<T>&, Shape);

STAR_INSTANTIATE(float)
STAR_INSTANTIATE(double)

#undef STAR_INSTANTIATE

}  // namespace star::ad
