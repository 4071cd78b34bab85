// Dense n-dimensional tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a node in an implicit tape: every operation
// records its inputs and a backward rule on the node it produces. backward()
// linearizes the recorded graph in topological order and runs each rule
// exactly once, accumulating gradients into the leaves that requested them.
// Running backward a second time through the same recorded nodes is an error.
//
// Values are stored in the scalar type T (float in the lab, double in the
// gradient-check suites); reductions and inner products accumulate in double.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "aclip/error.hpp"
#include "aclip/rng.hpp"

namespace aclip {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) {
    if (extent == 0) throw shape_error("tensor extents must be positive");
    n *= extent;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

namespace detail {

// Per-thread switch: when disabled, operations produce plain value nodes with
// no backward rule (used for evaluation loops and finite-difference probes).
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // allocated lazily by the first accumulation
  bool requires_grad = false;
  bool recorded = false;  // produced by an op, carries a backward rule
  bool consumed = false;  // a backward pass already ran through this node
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(const TensorNode&)> backward_rule;

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), T(0));
  }
  bool wants_grad() const { return requires_grad || recorded; }
};

}  // namespace detail

struct NoGradGuard {
  NoGradGuard() : previous(detail::grad_enabled_flag()) {
    detail::grad_enabled_flag() = false;
  }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  bool previous;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

template <typename T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from_values(std::move(shape), {});
  }

  static Tensor full(Shape shape, T value) {
    auto t = zeros(std::move(shape));
    for (auto& v : t.node_->values) v = value;
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  static Tensor from_values(Shape shape, std::vector<T> values) {
    auto node = std::make_shared<Node>();
    const std::size_t n = shape_numel(shape);
    if (values.empty()) values.assign(n, T(0));
    if (values.size() != n)
      throw shape_error("value count " + std::to_string(values.size()) +
                        " does not match shape " + shape_str(shape));
    node->shape = std::move(shape);
    node->values = std::move(values);
    return Tensor(std::move(node));
  }

  static Tensor random_uniform(Shape shape, Rng& rng, double lo = -1.0,
                               double hi = 1.0) {
    auto t = zeros(std::move(shape));
    for (auto& v : t.node_->values) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return checked().shape; }
  std::size_t rank() const { return checked().shape.size(); }
  std::size_t size() const { return checked().values.size(); }

  std::span<const T> values() const { return checked().values; }
  std::span<T> values_mut() { return checked().values; }

  T item() const {
    if (size() != 1) throw shape_error("item() requires a scalar tensor");
    return checked().values[0];
  }

  bool requires_grad() const { return checked().requires_grad; }

  Tensor& set_requires_grad(bool flag) {
    if (checked().recorded)
      throw config_error("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return !checked().grad.empty(); }

  std::span<const T> grad() const {
    if (!has_grad())
      throw config_error("tensor has no gradient; run backward() first");
    return node_->grad;
  }

  void zero_grad() {
    auto& g = checked().grad;
    std::fill(g.begin(), g.end(), T(0));
  }

  // Deep copy of values only: the clone is a fresh leaf.
  Tensor clone_detached() const {
    auto t = from_values(shape(), std::vector<T>(checked().values));
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  // Runs reverse-mode accumulation from this scalar. Every recorded node in
  // the reachable graph is visited exactly once and then marked consumed.
  void backward() {
    if (size() != 1)
      throw config_error("backward() requires a scalar root");
    Node* root = node_.get();
    if (!root->recorded && !root->requires_grad)
      throw config_error("backward() on a tensor with no recorded graph");

    std::vector<Node*> order = topo_order(root);
    for (Node* node : order)
      if (node->recorded && node->consumed)
        throw config_error(
            "backward() already ran through this graph; rebuild it before "
            "differentiating again");

    root->ensure_grad();
    root->grad[0] += T(1);
    // order is parents-first; walk it back to front so each node's gradient
    // is complete before its rule fires.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (!node->recorded) continue;
      node->ensure_grad();
      node->backward_rule(*node);
      node->consumed = true;
    }
  }

  std::shared_ptr<Node> node() const { return node_; }

  // Internal: wraps op outputs. `parents` must contain exactly the
  // grad-relevant inputs; `rule` accumulates this node's grad into them.
  static Tensor make_recorded(Shape shape, std::vector<T> values,
                              std::vector<std::shared_ptr<Node>> parents,
                              std::function<void(const Node&)> rule) {
    Tensor t = from_values(std::move(shape), std::move(values));
    t.node_->recorded = true;
    t.node_->requires_grad = true;
    t.node_->parents = std::move(parents);
    t.node_->backward_rule = std::move(rule);
    return t;
  }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  Node& checked() const {
    if (!node_) throw config_error("use of an empty tensor");
    return *node_;
  }

  static std::vector<Node*> topo_order(Node* root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    // Iterative postorder DFS; frames carry the next parent index to expand.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* parent = node->parents[next++].get();
        if (parent->wants_grad() && !visited.count(parent)) {
          visited.insert(parent);
          stack.emplace_back(parent, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
void check_finite(const std::vector<T>& values, const char* op) {
  for (const T& v : values)
    if (!std::isfinite(static_cast<double>(v)))
      throw numeric_error(std::string(op) + " produced a non-finite value");
}

// Accumulates `delta` into `node`'s gradient if the node participates in
// differentiation.
template <typename T>
void accum_grad(const std::shared_ptr<TensorNode<T>>& node,
                const std::vector<double>& delta) {
  if (!node->wants_grad()) return;
  node->ensure_grad();
  for (std::size_t i = 0; i < delta.size(); ++i)
    node->grad[i] += static_cast<T>(delta[i]);
}

}  // namespace detail

}  // namespace aclip
