#include "retiscreen/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace retiscreen::dl {

namespace {
thread_local bool grad_mode_enabled = true;
}

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool enabled) { grad_mode_enabled = enabled; }

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw std::invalid_argument("tensor shape " + to_string(shape) + " has a zero dimension");
  if (element_count(shape) != values.size())
    throw std::invalid_argument("tensor shape " + to_string(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  const auto n = element_count(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = element_count(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->shape;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw std::out_of_range("tensor axis out of range");
  return s[axis];
}

template <typename T>
std::size_t BasicTensor<T>::size() const {
  return node_ ? node_->values.size() : 0;
}

template <typename T>
std::span<const T> BasicTensor<T>::values() const {
  if (!node_) return {};
  return node_->values;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_values() {
  if (!node_) return {};
  return node_->values;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (size() != 1) throw std::logic_error("item() on tensor of shape " + to_string(shape()));
  return node_->values[0];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool flag) {
  if (!node_) throw std::logic_error("use of undefined tensor");
  node_->requires_grad = flag;
}

template <typename T>
bool BasicTensor<T>::has_grad() const {
  return node_ && !node_->grad.empty();
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
  if (!node_) return {};
  return node_->grad;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_grad() {
  if (!node_) return {};
  return node_->grad_storage();
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
}

template <typename T>
void BasicTensor<T>::backward() const {
  if (size() != 1) throw std::logic_error("backward() without seed needs a single-element tensor");
  const T one{1};
  backward(std::span<const T>(&one, 1));
}

template <typename T>
void BasicTensor<T>::backward(std::span<const T> seed) const {
  if (!node_) throw std::logic_error("backward on undefined tensor");
  if (seed.size() != node_->values.size()) throw std::invalid_argument("backward seed size mismatch");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  auto& g = node_->grad_storage();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(shape(), node_->values, false);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return BasicTensor(shape(), node_->values, node_->requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_op(Shape shape, std::vector<T> values, std::vector<BasicTensor> parents,
                                       std::function<void(Node&)> backward_fn) {
  BasicTensor out(std::move(shape), std::move(values), false);
  if (!GradMode::enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(parents.size());
  for (const auto& p : parents) out.node_->parents.push_back(p.node_);
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace retiscreen::dl
