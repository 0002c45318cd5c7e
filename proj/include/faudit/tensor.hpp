#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace faudit {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Shapes that do not fit an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Arguments outside an operation's mathematical domain (e.g. log of 0).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// An operation produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  bool leaf = true;
};

/// Dense row-major float64 tensor with an optional gradient record.
///
/// A Tensor is a handle: copies share the same storage. Results of
/// operations are fresh tensors; only optimizers mutate data in place.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  const double* raw() const { return impl_->data.data(); }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  /// Value of a size-1 tensor.
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const { return impl_->leaf; }
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer; zeros of the right size if none has been accumulated.
  std::vector<double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Leaf copy of the values, detached from any recorded history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend class Tape;
  friend Tensor make_result(Shape, std::vector<double>, const char*);
};

/// Input gradient buffers handed to a backward rule; null where no gradient
/// is wanted for that input.
using GradInputs = std::span<double* const>;
using BackwardFn = std::function<void(std::span<const double> grad_out, GradInputs grad_in)>;

struct BackwardOptions {
  /// When false, gradients are only written into non-leaf nodes. Lets
  /// several threads differentiate through one shared frozen model.
  bool accumulate_leaf_grads = true;
};

/// Thread-confined record of differentiable operations, in execution order.
class Tape {
 public:
  static Tape& current();

  /// Records `out = op(inputs)` if gradient mode is on and any input
  /// requires a gradient. Marks `out` as a non-leaf accordingly.
  void record(const Tensor& out, std::vector<Tensor> inputs, BackwardFn fn);

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  void backward(const Tensor& loss, const BackwardOptions& options);

 private:
  struct Entry {
    std::shared_ptr<TensorImpl> out;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

bool grad_enabled();

/// Sets gradient recording on the current thread for its lifetime.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

/// Runs reverse-mode differentiation from a scalar loss and clears the tape.
void backward(const Tensor& loss, const BackwardOptions& options = {});

/// Builds an operation result, rejecting non-finite values.
Tensor make_result(Shape shape, std::vector<double> data, const char* op);

}  // namespace faudit
