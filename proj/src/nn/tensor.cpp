#include "motionbook/nn/tensor.hpp"

#include <cmath>

#include "motionbook/error.hpp"

namespace motionbook::nn {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

template <typename T>
void check_finite_impl(std::span<const T> values, std::string_view what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      fail(ErrorKind::kNonFiniteValue,
           "non-finite value produced by " + std::string(what) + " at element " + std::to_string(i));
    }
  }
}

}  // namespace

void check_finite(std::span<const float> values, std::string_view what) {
  check_finite_impl(values, what);
}
void check_finite(std::span<const double> values, std::string_view what) {
  check_finite_impl(values, what);
}

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> values) {
  require(shape_numel(shape) == values.size(), ErrorKind::kShapeMismatch,
          "tensor values do not match shape " + shape_string(shape));
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  return Tensor(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  const auto count = shape_numel(shape);
  return constant(std::move(shape), std::vector<T>(count, T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  t.node_->op = "parameter";
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  require(numel() == 1, ErrorKind::kShapeMismatch,
          "item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T> Tape<T>::record(const char* op, Shape shape, std::vector<T> value,
                          std::vector<Tensor<T>> inputs, BackwardFn backward) {
  if (shape_numel(shape) != value.size()) {
    fail(ErrorKind::kShapeMismatch, std::string(op) + ": output size does not match " + shape_string(shape));
  }
  check_finite(std::span<const T>(value), op);
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  for (const auto& in : inputs) {
    if (in.defined() && in.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->inputs.reserve(inputs.size());
    for (const auto& in : inputs) n->inputs.push_back(in.ptr());
    n->backward = std::move(backward);
    nodes_.push_back(n);
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  require(loss.numel() == 1, ErrorKind::kShapeMismatch, "backward() needs a scalar loss");
  Node<T>& root = *loss.node();
  if (!root.requires_grad) return;
  root.grad_buffer()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<T>& n = **it;
    if (n.grad.empty() || !n.backward) continue;
    n.backward(n);
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace motionbook::nn
