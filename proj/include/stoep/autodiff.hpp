#pragma once

// Tape-free reverse-mode automatic differentiation over dense tensors.
//
// Every operation returns a Var that owns its value and, when any input
// requires a gradient, a closure that pushes the output gradient back to its
// inputs. backward() orders the graph topologically from the root and runs
// the closures in reverse. Leaf parameters accumulate gradients across calls
// until zero_grad().

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stoep/tensor.hpp"

namespace stoep::ad {

struct Node {
  Tensor value;
  Tensor grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backward;
  bool requires_grad = false;

  Tensor& ensure_grad() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape());
    return grad;
  }
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// Disables graph construction in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
  }

  static Var parameter(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    node->grad = Tensor(node->value.shape());
    return Var(std::move(node));
  }

  const Tensor& value() const { return node_->value; }
  // Direct access for optimizers and checkpoint restore; only meaningful on leaves.
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->ensure_grad().fill(0.0); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  double item() const { return node_->value[0]; }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

template <class Backward>
Var make_op(Tensor value, std::initializer_list<Var> parents, Backward&& backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (grad_enabled()) {
    for (const Var& p : parents)
      if (p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const Var& p : parents) node->parents.push_back(p.shared());
    node->backward = std::forward<Backward>(backward);
  }
  return Var(std::move(node));
}

template <class Backward>
Var make_op(Tensor value, const std::vector<Var>& parents, Backward&& backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (grad_enabled()) {
    for (const Var& p : parents)
      if (p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const Var& p : parents) node->parents.push_back(p.shared());
    node->backward = std::forward<Backward>(backward);
  }
  return Var(std::move(node));
}

// Runs reverse accumulation from a single-element root.
inline void backward(const Var& root) {
  if (root.size() != 1) throw std::invalid_argument("backward: root must hold one element");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward) continue;
    node->ensure_grad();
    for (auto& p : node->parents)
      if (p->requires_grad) p->ensure_grad();
    node->backward(*node);
  }
}

namespace detail {

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                " vs " + shape_string(b.shape()));
}

inline Tensor& grad_of(const Var& v) { return v.node()->grad; }

template <class F>
Var unary(const Var& x, F&& f, std::function<double(double, double)> dydx) {
  Tensor out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_op(std::move(out), {x}, [x, dydx = std::move(dydx)](const Node& self) {
    if (!x.requires_grad()) return;
    auto& gx = grad_of(x);
    const auto& xv = x.value();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * dydx(xv[i], self.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_op(std::move(out), {a, b}, [a, b](const Node& self) {
    if (a.requires_grad())
      for (std::size_t i = 0; i < self.grad.size(); ++i) detail::grad_of(a)[i] += self.grad[i];
    if (b.requires_grad())
      for (std::size_t i = 0; i < self.grad.size(); ++i) detail::grad_of(b)[i] += self.grad[i];
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op(std::move(out), {a, b}, [a, b](const Node& self) {
    if (a.requires_grad())
      for (std::size_t i = 0; i < self.grad.size(); ++i) detail::grad_of(a)[i] += self.grad[i];
    if (b.requires_grad())
      for (std::size_t i = 0; i < self.grad.size(); ++i) detail::grad_of(b)[i] -= self.grad[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_op(std::move(out), {a, b}, [a, b](const Node& self) {
    if (a.requires_grad())
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        detail::grad_of(a)[i] += self.grad[i] * b.value()[i];
    if (b.requires_grad())
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        detail::grad_of(b)[i] += self.grad[i] * a.value()[i];
  });
}

// Elementwise product with a constant tensor of the same shape.
inline Var mul_const(const Var& a, const Tensor& c) {
  if (a.shape() != c.shape())
    throw std::invalid_argument("mul_const: shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(c.shape()));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c[i];
  return make_op(std::move(out), {a}, [a, c](const Node& self) {
    if (!a.requires_grad()) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) detail::grad_of(a)[i] += self.grad[i] * c[i];
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c;
  return make_op(std::move(out), {a}, [a, c](const Node& self) {
    if (!a.requires_grad()) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) detail::grad_of(a)[i] += self.grad[i] * c;
  });
}

inline Var add_const(const Var& a, double c) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c;
  return make_op(std::move(out), {a}, [a](const Node& self) {
    if (!a.requires_grad()) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) detail::grad_of(a)[i] += self.grad[i];
  });
}

inline Var one_minus(const Var& a) { return add_const(scale(a, -1.0), 1.0); }

// s * a for a one-element Var s.
inline Var scale_by(const Var& a, const Var& s) {
  if (s.size() != 1) throw std::invalid_argument("scale_by: scale must hold one element");
  const double sv = s.item();
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * sv;
  return make_op(std::move(out), {a, s}, [a, s](const Node& self) {
    const double sv = s.item();
    if (a.requires_grad())
      for (std::size_t i = 0; i < self.grad.size(); ++i) detail::grad_of(a)[i] += self.grad[i] * sv;
    if (s.requires_grad()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * a.value()[i];
      detail::grad_of(s)[0] += acc;
    }
  });
}

// a + s for a one-element Var s.
inline Var shift_by(const Var& a, const Var& s) {
  if (s.size() != 1) throw std::invalid_argument("shift_by: shift must hold one element");
  const double sv = s.item();
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + sv;
  return make_op(std::move(out), {a, s}, [a, s](const Node& self) {
    if (a.requires_grad())
      for (std::size_t i = 0; i < self.grad.size(); ++i) detail::grad_of(a)[i] += self.grad[i];
    if (s.requires_grad()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i];
      detail::grad_of(s)[0] += acc;
    }
  });
}

// (1 - w) * a + w * b for a one-element Var w.
inline Var lerp(const Var& a, const Var& b, const Var& w) {
  detail::check_same_shape(a, b, "lerp");
  if (w.size() != 1) throw std::invalid_argument("lerp: weight must hold one element");
  const double wv = w.item();
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (1.0 - wv) * a.value()[i] + wv * b.value()[i];
  return make_op(std::move(out), {a, b, w}, [a, b, w](const Node& self) {
    const double wv = w.item();
    if (a.requires_grad())
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        detail::grad_of(a)[i] += (1.0 - wv) * self.grad[i];
    if (b.requires_grad())
      for (std::size_t i = 0; i < self.grad.size(); ++i) detail::grad_of(b)[i] += wv * self.grad[i];
    if (w.requires_grad()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        acc += self.grad[i] * (b.value()[i] - a.value()[i]);
      detail::grad_of(w)[0] += acc;
    }
  });
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& x) {
  return detail::unary(x, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(const Var& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Var abs(const Var& x) {
  return detail::unary(x, [](double v) { return std::fabs(v); },
                       [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// max(x, 0); the subgradient at 0 is taken as 0.
inline Var relu(const Var& x) {
  return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

// Elementwise min; ties route the gradient to a.
inline Var minimum(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "minimum");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.value()[i], b.value()[i]);
  return make_op(std::move(out), {a, b}, [a, b](const Node& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const bool take_a = a.value()[i] <= b.value()[i];
      if (take_a && a.requires_grad()) detail::grad_of(a)[i] += self.grad[i];
      if (!take_a && b.requires_grad()) detail::grad_of(b)[i] += self.grad[i];
    }
  });
}

// ------------------------------------------------------------------ reshaping

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_op(std::move(out), {x}, [x](const Node& self) {
    if (!x.requires_grad()) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) detail::grad_of(x)[i] += self.grad[i];
  });
}

inline Var transpose(const Var& x) {
  if (x.shape().size() != 2) throw std::invalid_argument("transpose: expects a matrix");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = x.value()(i, j);
  return make_op(std::move(out), {x}, [x, m, n](const Node& self) {
    if (!x.requires_grad()) return;
    auto& gx = detail::grad_of(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx(i, j) += self.grad(j, i);
  });
}

// [a, b, c] -> [a, c, b]
inline Var swap_last(const Var& x) {
  if (x.shape().size() != 3) throw std::invalid_argument("swap_last: expects rank 3");
  const std::size_t a = x.shape()[0], b = x.shape()[1], c = x.shape()[2];
  Tensor out({a, c, b});
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j)
      for (std::size_t k = 0; k < c; ++k) out(i, k, j) = x.value()(i, j, k);
  return make_op(std::move(out), {x}, [x, a, b, c](const Node& self) {
    if (!x.requires_grad()) return;
    auto& gx = detail::grad_of(x);
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j)
        for (std::size_t k = 0; k < c; ++k) gx(i, j, k) += self.grad(i, k, j);
  });
}

// Columns [start, start + count) of a matrix.
inline Var slice_cols(const Var& x, std::size_t start, std::size_t count) {
  if (x.shape().size() != 2 || start + count > x.shape()[1])
    throw std::invalid_argument("slice_cols: range outside " + shape_string(x.shape()));
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out({m, count});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = x.value()(i, start + j);
  return make_op(std::move(out), {x}, [x, m, n, start, count](const Node& self) {
    if (!x.requires_grad()) return;
    auto& gx = detail::grad_of(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) gx[i * n + start + j] += self.grad(i, j);
  });
}

// Column j of a matrix as a vector.
inline Var column(const Var& x, std::size_t j) {
  return reshape(slice_cols(x, j, 1), {x.shape()[0]});
}

// Equal-length vectors laid side by side: k vectors of length m -> [m, k].
inline Var stack_columns(const std::vector<Var>& cols) {
  if (cols.empty()) throw std::invalid_argument("stack_columns: no columns");
  const std::size_t m = cols.front().size(), k = cols.size();
  Tensor out({m, k});
  for (std::size_t j = 0; j < k; ++j) {
    if (cols[j].size() != m) throw std::invalid_argument("stack_columns: ragged columns");
    for (std::size_t i = 0; i < m; ++i) out(i, j) = cols[j].value()[i];
  }
  return make_op(std::move(out), cols, [cols, m, k](const Node& self) {
    for (std::size_t j = 0; j < k; ++j) {
      if (!cols[j].requires_grad()) continue;
      auto& g = detail::grad_of(cols[j]);
      for (std::size_t i = 0; i < m; ++i) g[i] += self.grad(i, j);
    }
  });
}

// x[n, t, c] -> x[n, t - shift, c], zero where t < shift.
inline Var time_shift(const Var& x, std::size_t shift) {
  if (x.shape().size() != 3) throw std::invalid_argument("time_shift: expects rank 3");
  const std::size_t n = x.shape()[0], t = x.shape()[1], c = x.shape()[2];
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = shift; j < t; ++j)
      for (std::size_t k = 0; k < c; ++k) out(i, j, k) = x.value()(i, j - shift, k);
  return make_op(std::move(out), {x}, [x, n, t, c, shift](const Node& self) {
    if (!x.requires_grad()) return;
    auto& gx = detail::grad_of(x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = shift; j < t; ++j)
        for (std::size_t k = 0; k < c; ++k) gx(i, j - shift, k) += self.grad(i, j, k);
  });
}

// ---------------------------------------------------------------- reductions

inline Var sum(const Var& x) {
  double acc = 0.0;
  for (double v : x.value().values()) acc += v;
  return make_op(Tensor::scalar(acc), {x}, [x](const Node& self) {
    if (!x.requires_grad()) return;
    const double g = self.grad[0];
    for (auto& v : detail::grad_of(x).values()) v += g;
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

// Mean over the last axis: [..., T] -> [...].
inline Var mean_last(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw std::invalid_argument("mean_last: expects rank >= 2");
  const std::size_t t = s.back(), rows = x.size() / t;
  Shape out_shape(s.begin(), s.end() - 1);
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < t; ++j) acc += x.value()[r * t + j];
    out[r] = acc / static_cast<double>(t);
  }
  return make_op(std::move(out), {x}, [x, rows, t](const Node& self) {
    if (!x.requires_grad()) return;
    auto& gx = detail::grad_of(x);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < t; ++j) gx[r * t + j] += self.grad[r] / static_cast<double>(t);
  });
}

// mean |pred - truth| against a constant target.
inline Var mean_abs_error(const Var& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape())
    throw std::invalid_argument("mean_abs_error: shape mismatch " + shape_string(pred.shape()) +
                                " vs " + shape_string(truth.shape()));
  double acc = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) acc += std::fabs(pred.value()[i] - truth[i]);
  const double count = static_cast<double>(truth.size());
  return make_op(Tensor::scalar(acc / count), {pred}, [pred, truth, count](const Node& self) {
    if (!pred.requires_grad()) return;
    auto& g = detail::grad_of(pred);
    const double scale = self.grad[0] / count;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const double d = pred.value()[i] - truth[i];
      g[i] += d > 0.0 ? scale : (d < 0.0 ? -scale : 0.0);
    }
  });
}

// ------------------------------------------------------------- linear algebra

// A [m, k] times B [k, ...] -> [m, ...]; trailing axes of B are flattened.
inline Var matmul(const Var& a, const Var& b) {
  if (a.shape().size() != 2 || b.shape().empty() || a.shape()[1] != b.shape()[0])
    throw std::invalid_argument("matmul: incompatible " + shape_string(a.shape()) + " * " +
                                shape_string(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.size() / k;
  Shape out_shape = b.shape();
  out_shape[0] = m;
  Tensor out(out_shape);
  const double* av = a.value().data();
  const double* bv = b.value().data();
  double* ov = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) ov[i * n + j] += aip * bv[p * n + j];
    }
  return make_op(std::move(out), {a, b}, [a, b, m, k, n](const Node& self) {
    const double* g = self.grad.data();
    if (a.requires_grad()) {
      double* ga = detail::grad_of(a).data();
      const double* bv = b.value().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (b.requires_grad()) {
      double* gb = detail::grad_of(b).data();
      const double* av = a.value().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
  });
}

// Affine map over the last axis: x [..., k] * W [k, n] + b [n] -> [..., n].
// Pass an empty Var for a bias-free map.
inline Var linear(const Var& x, const Var& w, const Var& b = Var()) {
  const Shape& xs = x.shape();
  if (w.shape().size() != 2 || xs.empty() || xs.back() != w.shape()[0])
    throw std::invalid_argument("linear: incompatible " + shape_string(xs) + " * " +
                                shape_string(w.shape()));
  const std::size_t k = w.shape()[0], n = w.shape()[1], rows = x.size() / k;
  if (b && b.size() != n) throw std::invalid_argument("linear: bias size mismatch");
  Shape out_shape = xs;
  out_shape.back() = n;
  Tensor out(out_shape);
  const double* xv = x.value().data();
  const double* wv = w.value().data();
  double* ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (b)
      for (std::size_t j = 0; j < n; ++j) ov[r * n + j] = b.value()[j];
    for (std::size_t p = 0; p < k; ++p) {
      const double xp = xv[r * k + p];
      if (xp == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) ov[r * n + j] += xp * wv[p * n + j];
    }
  }
  std::vector<Var> parents{x, w};
  if (b) parents.push_back(b);
  return make_op(std::move(out), parents, [x, w, b, rows, k, n](const Node& self) {
    const double* g = self.grad.data();
    if (x.requires_grad()) {
      double* gx = detail::grad_of(x).data();
      const double* wv = w.value().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[r * n + j] * wv[p * n + j];
          gx[r * k + p] += acc;
        }
    }
    if (w.requires_grad()) {
      double* gw = detail::grad_of(w).data();
      const double* xv = x.value().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t p = 0; p < k; ++p) {
          const double xp = xv[r * k + p];
          if (xp == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gw[p * n + j] += xp * g[r * n + j];
        }
    }
    if (b && b.requires_grad()) {
      double* gb = detail::grad_of(b).data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
    }
  });
}

inline void softmax_row(const double* in, double* out, std::size_t n) {
  double mx = in[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    z += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= z;
}

inline Var softmax_rows(const Var& x) {
  if (x.shape().size() != 2) throw std::invalid_argument("softmax_rows: expects a matrix");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) softmax_row(x.value().data() + i * n, out.data() + i * n, n);
  return make_op(std::move(out), {x}, [x, m, n](const Node& self) {
    if (!x.requires_grad()) return;
    auto& gx = detail::grad_of(x);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad(i, j) * self.value(i, j);
      for (std::size_t j = 0; j < n; ++j) gx(i, j) += self.value(i, j) * (self.grad(i, j) - dot);
    }
  });
}

// Each row divided by (row sum + eps).
inline Var row_normalize(const Var& x, double eps) {
  if (x.shape().size() != 2) throw std::invalid_argument("row_normalize: expects a matrix");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out({m, n});
  std::vector<double> denom(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x.value()(i, j);
    denom[i] = s + eps;
    for (std::size_t j = 0; j < n; ++j) out(i, j) = x.value()(i, j) / denom[i];
  }
  return make_op(std::move(out), {x}, [x, m, n, denom](const Node& self) {
    if (!x.requires_grad()) return;
    auto& gx = detail::grad_of(x);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad(i, j) * x.value()(i, j);
      const double d = denom[i];
      for (std::size_t j = 0; j < n; ++j) gx(i, j) += self.grad(i, j) / d - dot / (d * d);
    }
  });
}

// Multi-head self-attention maps over the leading (region) axis, averaged over
// every time step and head: q, k are [N, T, C] with C divisible by heads.
// Returns the [N, N] mean of softmax(q_th k_th^T / sqrt(C / heads)).
inline Var attention_average(const Var& q, const Var& k, std::size_t heads) {
  detail::check_same_shape(q, k, "attention_average");
  if (q.shape().size() != 3) throw std::invalid_argument("attention_average: expects rank 3");
  const std::size_t n = q.shape()[0], t = q.shape()[1], c = q.shape()[2];
  if (heads == 0 || c % heads != 0)
    throw std::invalid_argument("attention_average: " + std::to_string(heads) +
                                " heads do not divide " + std::to_string(c) + " channels");
  const std::size_t dh = c / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const double inv_maps = 1.0 / static_cast<double>(heads * t);

  std::vector<double> maps(t * heads * n * n);
  std::vector<double> logits(n);
  Tensor out({n, n});
  for (std::size_t s = 0; s < t; ++s)
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = maps.data() + (s * heads + h) * n * n;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          double dot = 0.0;
          for (std::size_t e = h * dh; e < (h + 1) * dh; ++e) dot += q.value()(i, s, e) * k.value()(j, s, e);
          logits[j] = dot * inv_sqrt;
        }
        softmax_row(logits.data(), p + i * n, n);
        for (std::size_t j = 0; j < n; ++j) out(i, j) += p[i * n + j] * inv_maps;
      }
    }

  return make_op(std::move(out), {q, k},
                 [q, k, n, t, c, heads, dh, inv_sqrt, inv_maps, maps = std::move(maps)](const Node& self) {
                   (void)c;
                   std::vector<double> dl(n);
                   for (std::size_t s = 0; s < t; ++s)
                     for (std::size_t h = 0; h < heads; ++h) {
                       const double* p = maps.data() + (s * heads + h) * n * n;
                       for (std::size_t i = 0; i < n; ++i) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < n; ++j) dot += self.grad(i, j) * inv_maps * p[i * n + j];
                         for (std::size_t j = 0; j < n; ++j)
                           dl[j] = p[i * n + j] * (self.grad(i, j) * inv_maps - dot) * inv_sqrt;
                         for (std::size_t j = 0; j < n; ++j)
                           for (std::size_t e = h * dh; e < (h + 1) * dh; ++e) {
                             if (q.requires_grad()) detail::grad_of(q)(i, s, e) += dl[j] * k.value()(j, s, e);
                             if (k.requires_grad()) detail::grad_of(k)(j, s, e) += dl[j] * q.value()(i, s, e);
                           }
                       }
                     }
                 });
}

}  // namespace stoep::ad
