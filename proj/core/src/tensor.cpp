#include "segcaps/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace segcaps {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

ShapeError::ShapeError(std::string_view op, const Shape& lhs, const Shape& rhs,
                       std::string_view detail)
    : Error(std::string(op) + ": incompatible shapes " + shape_str(lhs) + " and " +
            shape_str(rhs) + (detail.empty() ? "" : " (" + std::string(detail) + ")")),
      op_(op) {}

NumericError::NumericError(std::string_view op, std::size_t index, double value)
    : Error(std::string(op) + ": non-finite value " + std::to_string(value) +
            " at flat index " + std::to_string(index)) {}

ParseError::ParseError(std::string_view what, std::size_t offset)
    : Error(std::string(what) + " at byte offset " + std::to_string(offset)),
      offset_(offset) {}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace detail {

std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> value) {
  if (shape_numel(shape) != value.size()) {
    throw ShapeError("tensor", shape, Shape{value.size()}, "value count does not match shape");
  }
  auto node = std::make_shared<detail::Node>();
  node->id = detail::next_node_id();
  node->shape = std::move(shape);
  node->value = std::move(value);
  return node;
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) {
  const std::size_t n = shape_numel(shape);
  node_ = new_node(std::move(shape), std::vector<double>(n, fill));
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : node_(new_node(std::move(shape), std::move(values))) {}

const Shape& Tensor::shape() const {
  static const Shape empty;
  return node_ ? node_->shape : empty;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw Error("dim: axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return shape()[axis];
}

std::span<const double> Tensor::data() const {
  if (!node_) return {};
  return node_->value;
}

std::span<double> Tensor::data_mut() {
  if (!node_) return {};
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw Error("item: tensor " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw Error("at: rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw Error("at: index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_) throw Error("set_requires_grad on undefined tensor");
  node_->requires_grad = on;
  return *this;
}

std::span<const double> Tensor::grad() const {
  if (!node_) return {};
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::detach() const {
  if (!node_) return {};
  return Tensor(node_->shape, node_->value);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> backward) {
  for (std::size_t i = 0; i < value.size(); ++i) {
    if (!std::isfinite(value[i])) throw NumericError(op, i, value[i]);
  }
  auto node = new_node(std::move(shape), std::move(value));
  node->op = op;
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) track = track || t.requires_grad();
  }
  if (track && backward) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Graph Graph::collect(const Tensor& root) {
  Graph g;
  if (!root.defined()) return g;
  std::vector<detail::Node*> stack{root.node().get()};
  std::vector<std::shared_ptr<detail::Node>> found{root.node()};
  std::unordered_set<std::uint64_t> seen{root.id()};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    for (const auto& in : n->inputs) {
      if (!in->requires_grad) continue;
      if (!seen.insert(in->id).second) continue;
      found.push_back(in);
      stack.push_back(in.get());
    }
  }
  std::sort(found.begin(), found.end(),
            [](const auto& a, const auto& b) { return a->id < b->id; });
  g.nodes_ = std::move(found);
  return g;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw Error("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw Error("backward: loss was not recorded with gradient tracking");
  }
  Graph graph = Graph::collect(loss);
  auto& root = *loss.node();
  root.grad_buffer()[0] += 1.0;
  const auto& nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    detail::Node& n = **it;
    if (n.is_leaf() || n.grad.empty()) continue;
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (!std::isfinite(n.grad[i])) throw NumericError(std::string(n.op) + " backward", i, n.grad[i]);
    }
    n.backward(n);
    std::vector<double>().swap(n.grad);
  }
}

}  // namespace segcaps
