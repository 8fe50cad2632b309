#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace motionbook::nn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
  // Gradient buffer of input i, or nullptr when that input is a constant.
  T* input_grad(std::size_t i) {
    Node& in = *inputs[i];
    return in.requires_grad ? in.grad_buffer().data() : nullptr;
  }
  const T* input_value(std::size_t i) const { return inputs[i]->value.data(); }
};

// Handle to a node. Copies share the node.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<T> values);
  static Tensor zeros(Shape shape);
  static Tensor scalar(T value) { return constant({}, {value}); }
  // Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<T> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Ordered record of executed differentiable ops. Only ops with at least one
// gradient-requiring input are recorded. backward() walks the record in
// reverse, visiting each node once.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Node<T>&)>;

  // Creates the output node. Throws NonFiniteValue if any value is not finite.
  Tensor<T> record(const char* op, Shape shape, std::vector<T> value,
                   std::vector<Tensor<T>> inputs, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and propagates. loss must hold one element.
  void backward(const Tensor<T>& loss);

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::shared_ptr<Node<T>>> nodes_;
};

void check_finite(std::span<const float> values, std::string_view what);
void check_finite(std::span<const double> values, std::string_view what);

}  // namespace motionbook::nn
