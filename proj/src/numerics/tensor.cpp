#include "apa/numerics/tensor.hpp"

#include <unordered_set>

#include "apa/errors.hpp"

namespace apa::num {

namespace {
thread_local bool t_grad_enabled = true;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!impl_) throw ContractError("tensor: undefined");
  return impl_->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("tensor: axis out of range for " + shape_str(s));
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return impl_ ? impl_->data.size() : 0;
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!impl_) throw ContractError("tensor: undefined");
  return impl_->data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!impl_) throw ContractError("tensor: undefined");
  return impl_->data;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!impl_) throw ContractError("tensor: undefined");
  return impl_->grad;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return impl_ && impl_->grad.size() == impl_->data.size();
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("tensor: item() on " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  if (!impl_) throw ContractError("tensor: undefined");
  impl_->requires_grad = flag;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (impl_) impl_->grad.clear();
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw ContractError("backward: output must be a single element, got " + shape_str(shape()));
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS gives a topological order of the recorded graph.
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> seen;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack{{impl_.get(), 0}};
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* parents = node->node ? &node->node->parents : nullptr;
    if (parents && next < parents->size()) {
      TensorImpl<T>* p = (*parents)[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  for (auto* n : order) n->ensure_grad();
  impl_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* n = *it;
    if (n->node && n->node->backward) n->node->backward(*n);
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), std::vector<T>(data().begin(), data().end()));
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace apa::num
