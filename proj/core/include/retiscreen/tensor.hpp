#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace retiscreen::dl {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

/// Thread-local switch for recording operations. Inference paths disable it so
/// no backward closures are allocated.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  /// Allocates (zero-filled) gradient storage on first use.
  std::vector<T>& grad_storage() {
    if (grad.empty()) grad.assign(values.size(), T{0});
    return grad;
  }
};

/// N-dimensional row-major array with reverse-mode gradient recording.
///
/// A tensor is a handle: copies share storage and history, like the
/// parameter tensors of most autograd engines. Use clone() for an
/// independent copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value) { return BasicTensor({1}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const T> values() const;
  std::span<T> mutable_values();
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Back-propagates from a single-element tensor with seed 1.
  void backward() const;
  /// Back-propagates with an explicit upstream gradient of this tensor's shape.
  void backward(std::span<const T> seed) const;

  /// Same values, no history, requires_grad = false.
  BasicTensor detach() const;
  /// Independent deep copy of values (and requires_grad flag), no history.
  BasicTensor clone() const;

  /// Builds the result of a differentiable operation. History is recorded only
  /// when grad mode is on and at least one parent requires a gradient.
  static BasicTensor from_op(Shape shape, std::vector<T> values, std::vector<BasicTensor> parents,
                             std::function<void(Node&)> backward_fn);

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

using Tensor = BasicTensor<float>;

}  // namespace retiscreen::dl
