#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "winlin/common.hpp"
#include "winlin/rng.hpp"

namespace winlin {

// Thread-local switch: when disabled, ops run forward-only and build no graph.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool f = true;
    return f;
  }
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense row-major tensor handle with an optional gradient slot. Copies share
// storage; the handle is value-like and cheap to move across threads. The
// backward graph hangs off the node: each op stores its parents and a closure
// that routes the node's gradient into the parents' gradients.
template <typename T>
class Tensor {
 public:
  static constexpr Dtype dtype = dtype_of<T>::value;

  struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // reads self.grad, writes parents
    const char* op = "";

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

    void accum_grad_at(std::int64_t i, T v) {
      if (grad.empty()) grad.assign(data.size(), T(0));
      grad[static_cast<std::size_t>(i)] += v;
    }

    std::vector<T>& grad_buffer() {
      if (grad.empty()) grad.assign(data.size(), T(0));
      return grad;
    }
  };

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data.assign(static_cast<std::size_t>(numel_of(n->shape)), T(0));
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data) {
    check_shape(numel_of(shape) == static_cast<std::int64_t>(data.size()),
                "tensor data length " + std::to_string(data.size()) + " does not match shape " +
                    shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return Tensor(std::move(n));
  }

  static Tensor scalar(T value) { return from({1}, {value}); }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1)) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.node_->data) v = static_cast<T>(rng.normal(0.0, static_cast<double>(stddev)));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::int64_t numel() const { return node_->numel(); }

  T* data() { return node_->data.data(); }
  const T* data() const { return node_->data.data(); }
  std::vector<T>& vec() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }

  T item() const {
    check_shape(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<T>& grad() const { return node_->grad; }
  std::vector<T>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  // Deep copy of values; no graph edge.
  Tensor clone() const {
    Tensor t = from(shape(), node_->data);
    return t;
  }

  std::shared_ptr<Node> node() const { return node_; }

  // Reverse pass from this tensor, seeding with ones. Call on the scalar loss.
  void backward() {
    if (!node_->requires_grad) return;
    auto order = topo_order();
    auto& seed = node_->grad_buffer();
    std::fill(seed.begin(), seed.end(), T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
  }

  // --- op-construction helpers -------------------------------------------

  static Tensor make_result(Shape shape) { return zeros(std::move(shape)); }

  // Wires the graph edge if recording is on and any input needs gradients.
  template <typename... Parents>
  void attach(const char* op, std::function<void(Node&)> backward_fn, const Parents&... parents) {
    if (!GradMode::enabled()) return;
    const bool any = (parents.requires_grad() || ...);
    if (!any) return;
    node_->requires_grad = true;
    node_->op = op;
    node_->parents = {parents.node()...};
    node_->backward_fn = std::move(backward_fn);
  }

  void check_finite_debug() const {
#ifndef NDEBUG
    for (const T v : node_->data) assert(std::isfinite(static_cast<double>(v)));
#endif
  }

 private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  std::vector<Node*> topo_order() const {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative DFS; graphs from deep models overflow the call stack otherwise.
    struct Frame {
      Node* n;
      std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({node_.get(), 0});
    seen.insert(node_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.n->parents.size()) {
        Node* p = f.n->parents[f.next_parent++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<Node> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Named trainable tensor; the name doubles as the checkpoint key.
template <typename T>
struct Parameter {
  Tensor<T> tensor;
  std::string name;

  Parameter() = default;
  Parameter(Tensor<T> t, std::string n) : tensor(std::move(t)), name(std::move(n)) {
    tensor.set_requires_grad(true);
  }
};

}  // namespace winlin
