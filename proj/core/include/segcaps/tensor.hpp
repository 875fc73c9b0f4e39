#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "segcaps/error.hpp"

namespace segcaps {

std::size_t shape_numel(const Shape& shape);

namespace detail {

// One value in the computation graph. Nodes are created in increasing id
// order and only ever reference older nodes, so descending id is a valid
// reverse topological order.
struct Node {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
  bool is_leaf() const { return !backward; }
};

std::uint64_t next_node_id();

}  // namespace detail

// Dense row-major array of doubles with optional gradient tracking. Copies
// are shallow: two Tensor handles may share one graph node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const { return node_ ? node_->value.size() : 0; }
  std::size_t dim(std::size_t axis) const;

  std::span<const double> data() const;
  // Mutable access to the stored values. Intended for leaves (parameter
  // updates, test perturbation); editing an interior node does not re-run
  // anything downstream.
  std::span<double> data_mut();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }
  double at(std::initializer_list<std::size_t> index) const;

  Tensor& set_requires_grad(bool on = true);
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
  // Zero-filled view if no gradient has been accumulated.
  std::span<const double> grad() const;
  void zero_grad();

  std::uint64_t id() const noexcept { return node_ ? node_->id : 0; }
  const char* op() const noexcept { return node_ ? node_->op : "undefined"; }

  // New leaf with the same values and no history.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Gradient recording is on by default; this disables it for the current
// thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Builds the result of a primitive. The backward rule is attached only when
// recording is enabled and some input requires a gradient. Every value is
// checked for finiteness.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> backward);

// The recorded graph reachable from a root, in topological order (inputs
// before consumers), each node exactly once.
class Graph {
 public:
  static Graph collect(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::shared_ptr<detail::Node>>& nodes() const { return nodes_; }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

// Reverse-mode sweep from a scalar loss. Tracked leaves accumulate into
// their grad buffers; interior gradients are released afterwards.
void backward(const Tensor& loss);

}  // namespace segcaps
