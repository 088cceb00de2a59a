#include "panodeform/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace panodeform {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(panodeform::numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (panodeform::numel(shape) != data.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw DimensionError("tensor: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (impl_->data.size() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_str(impl_->shape));
  }
  return impl_->data[0];
}

void Tensor::zero_grad() { impl_->grad.clear(); }

void Tensor::backward() const {
  if (numel() != 1) throw DimensionError("backward() requires a scalar root");
  const double one = 1.0;
  Graph::from_root(*this).backward(std::span<const double>(&one, 1));
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.set_requires_grad(requires_grad());
  return t;
}

Graph Graph::from_root(const Tensor& root) {
  Graph g;
  g.root_ = root.impl();
  // Iterative post-order DFS; children are pushed in input order so the
  // resulting order is a pure function of graph structure.
  std::unordered_set<const TensorImpl*> visited;
  struct Frame {
    std::shared_ptr<TensorImpl> value;
    std::size_t next_input;
  };
  std::vector<Frame> stack;
  stack.push_back({root.impl(), 0});
  visited.insert(root.impl().get());
  while (!stack.empty()) {
    Frame& top = stack.back();
    const auto& fn = top.value->grad_fn;
    if (fn && top.next_input < fn->inputs.size()) {
      auto child = fn->inputs[top.next_input++];
      if (child->grad_fn && visited.insert(child.get()).second) {
        stack.push_back({child, 0});
      }
      continue;
    }
    if (fn) g.records_.push_back({g.records_.size(), top.value.get(), fn});
    stack.pop_back();
  }
  return g;
}

void Graph::backward(std::span<const double> seed) const {
  if (seed.size() != root_->data.size()) throw DimensionError("backward: seed size mismatch");
  auto& root_grad = root_->grad_buffer();
  for (std::size_t i = 0; i < seed.size(); ++i) root_grad[i] += seed[i];
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    auto* value = const_cast<TensorImpl*>(it->value);
    if (value->grad.empty()) continue;
    it->node->backward(value->grad);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void check_finite(std::span<const double> values, std::string_view op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericalError("non-finite value produced by " + std::string(op));
  }
}

Tensor make_result(Shape shape, std::vector<double> data, std::string_view op,
                   const std::vector<Tensor>& inputs, BackwardFn backward) {
  check_finite(data, op);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs_grad = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) {
      if (in.defined() && (in.requires_grad() || in.impl()->grad_fn)) needs_grad = true;
    }
  }
  if (needs_grad) {
    auto node = std::make_shared<Node>();
    node->op = std::string(op);
    for (const auto& in : inputs) {
      if (in.defined()) node->inputs.push_back(in.impl());
    }
    node->backward = std::move(backward);
    impl->grad_fn = std::move(node);
  }
  return Tensor(std::move(impl));
}

}  // namespace panodeform
