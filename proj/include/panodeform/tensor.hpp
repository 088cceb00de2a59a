#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace panodeform {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand extents do not fit an operation's contract.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation produces NaN/Inf or a gradient check fails.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;

  std::vector<double>& grad_buffer();
};

using BackwardFn = std::function<void(std::span<const double> grad_out)>;

/// One recorded operation: which op produced a value and how to push the
/// adjoint of that value back onto its inputs.
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

/// Dense row-major f64 tensor with an optional gradient buffer. Copies share
/// storage; values are never mutated once an op has produced them.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// Write access for parameter initialization and optimizer updates only.
  std::span<double> mutable_data() { return impl_->data; }
  std::span<const double> grad() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
  void zero_grad();

  /// Seeds d(this)/d(this) = 1 and runs reverse-mode accumulation.
  void backward() const;

  /// Same values, cut from the graph.
  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Topologically ordered view of the nodes reachable from a root value.
class Graph {
 public:
  struct Record {
    std::size_t id;
    const TensorImpl* value;
    std::shared_ptr<Node> node;
  };

  static Graph from_root(const Tensor& root);

  /// Records in topological order (inputs before consumers).
  const std::vector<Record>& records() const { return records_; }

  /// Propagates `seed` (same shape as root) back through every record once,
  /// visiting them in reverse topological order.
  void backward(std::span<const double> seed) const;

 private:
  std::shared_ptr<TensorImpl> root_;
  std::vector<Record> records_;
};

/// Disables graph recording on the current thread while alive.
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

/// Builds an op result. Records a node when grad mode is on and any input
/// requires grad; throws NumericalError on non-finite output.
Tensor make_result(Shape shape, std::vector<double> data, std::string_view op,
                   const std::vector<Tensor>& inputs, BackwardFn backward);

void check_finite(std::span<const double> values, std::string_view op);

}  // namespace panodeform
