#pragma once

// Dense double-precision tensors with reverse-mode differentiation.
// A Tensor is a shared handle to a node in a dynamically built DAG;
// ops (see ops.hpp) record a backprop closure on their result node.
// Values are row-major; non-finite values are rejected at construction.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace facet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// Thread-local switch: when disabled, ops build plain value tensors with no
// graph linkage. Used for inference paths.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> adjoint;  // empty until a backward pass touches it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    std::vector<double>& grad_buffer() {
      if (adjoint.empty()) adjoint.assign(values.size(), 0.0);
      return adjoint;
    }
  };

  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                  std::to_string(values.size()) + " values");
    for (double v : values)
      if (!std::isfinite(v)) throw std::invalid_argument("tensor: non-finite value rejected");
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{}, {v}, requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape), 0.0);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->values.size(); }
  const std::vector<double>& values() const { return node_->values; }

  double scalar_value() const {
    if (numel() != 1) throw std::logic_error("scalar_value: tensor has " + std::to_string(numel()) + " elements");
    return node_->values[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_adjoint() const { return !node_->adjoint.empty(); }
  const std::vector<double>& adjoint() const {
    if (node_->adjoint.empty()) throw std::logic_error("adjoint: no gradient has been accumulated");
    return node_->adjoint;
  }

  // Direct value access for parameter updates and data loading. Mutating a
  // tensor that participates in an existing graph invalidates that graph;
  // callers update parameters only between forward passes.
  std::vector<double>& mutable_values() { return node_->values; }

  void zero_adjoint() { node_->adjoint.clear(); }

  // Reverse sweep from a scalar. Accumulates into the adjoint buffers of every
  // grad-requiring ancestor; deterministic (single-threaded, fixed order).
  void backward() const {
    if (numel() != 1) throw std::logic_error("backward: loss must be scalar");
    if (!node_->requires_grad) return;
    std::vector<Node*> order = topo_order(node_.get());
    node_->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backprop && !n->adjoint.empty()) n->backprop(*n);
    }
  }

  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  // Iterative postorder DFS over grad-requiring ancestors.
  static std::vector<Node*> topo_order(Node* root) {
    std::vector<Node*> order;
    std::unordered_set<const Node*> done;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    while (!stack.empty()) {
      auto& [n, child] = stack.back();
      if (done.count(n)) {
        stack.pop_back();
        continue;
      }
      if (child < n->parents.size()) {
        Node* p = n->parents[child].get();
        ++child;
        if (p->requires_grad && !done.count(p)) stack.emplace_back(p, 0);
      } else {
        done.insert(n);
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<Node> node_;
};

}  // namespace facet
