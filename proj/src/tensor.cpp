#include "faudit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>

namespace faudit {

namespace {
thread_local bool tl_grad_enabled = true;

// Exponent-bit test; unlike std::isfinite this loop vectorizes.
bool all_finite(const std::vector<double>& data) {
  constexpr std::uint64_t kExp = 0x7FF0000000000000ULL;
  std::uint64_t bad = 0;
  for (double v : data) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    bad |= static_cast<std::uint64_t>((bits & kExp) == kExp);
  }
  return bad == 0;
}
}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

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

Tensor::Tensor() : impl_(std::make_shared<TensorImpl>()) { impl_->shape = {0}; }

Tensor::Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<TensorImpl>()) {
  if (shape_size(shape) != data.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  if (!all_finite(data)) throw NumericError("tensor: non-finite value in constructor");
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  const auto n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("matrix: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("dim: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape()));
  }
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item: tensor has " + std::to_string(size()) + " values");
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(size(), 0.0);
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor make_result(Shape shape, std::vector<double> data, const char* op) {
  if (!all_finite(data)) throw NumericError(std::string(op) + ": produced a non-finite value");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

bool grad_enabled() { return tl_grad_enabled; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(tl_grad_enabled) { tl_grad_enabled = enabled; }
GradModeGuard::~GradModeGuard() { tl_grad_enabled = previous_; }

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(const Tensor& out, std::vector<Tensor> inputs, BackwardFn fn) {
  if (!tl_grad_enabled) return;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return;
  out.impl_->requires_grad = true;
  out.impl_->leaf = false;
  Entry e;
  e.out = out.impl_;
  e.inputs.reserve(inputs.size());
  for (auto& t : inputs) e.inputs.push_back(t.impl_);
  e.fn = std::move(fn);
  entries_.push_back(std::move(e));
}

void Tape::backward(const Tensor& loss, const BackwardOptions& options) {
  if (loss.size() != 1) {
    throw DimensionError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (entries_.empty() || !loss.requires_grad() || loss.is_leaf()) {
    entries_.clear();
    throw std::logic_error("backward: loss has no recorded history");
  }
  auto& seed = loss.impl_->grad;
  if (seed.empty()) seed.assign(1, 0.0);
  seed[0] += 1.0;

  std::vector<double*> grad_in;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    auto& out = *it->out;
    if (out.grad.empty()) continue;
    grad_in.assign(it->inputs.size(), nullptr);
    bool any = false;
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      auto& in = *it->inputs[i];
      if (!in.requires_grad) continue;
      if (in.leaf && !options.accumulate_leaf_grads) continue;
      if (in.grad.empty()) in.grad.assign(in.data.size(), 0.0);
      grad_in[i] = in.grad.data();
      any = true;
    }
    if (any) it->fn(out.grad, grad_in);
  }
  entries_.clear();
}

void backward(const Tensor& loss, const BackwardOptions& options) {
  Tape::current().backward(loss, options);
}

}  // namespace faudit
