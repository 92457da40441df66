#pragma once

// Dense row-major tensors with a dynamically recorded reverse-mode graph.
//
// A Tensor is a shared handle: copies alias the same storage, the way
// parameters are shared between a model and its optimizer. Ops never mutate
// their inputs; they allocate a new tensor and, when gradients are enabled
// and any input requires them, attach a Node holding the backward rule.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace apa::num {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorImpl;

template <typename T>
struct Node {
  std::vector<std::shared_ptr<TensorImpl<T>>> parents;
  // Reads out.grad and accumulates into parents' grads.
  std::function<void(TensorImpl<T>& out)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first backward pass touches it
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

// Gradient recording is on by default; NoGradGuard turns it off for the
// current thread (inference, finite differences).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const T> data() const;
  // Direct write access; reserved for optimizers and test harnesses.
  std::span<T> mutable_data();
  std::span<const T> grad() const;
  bool has_grad() const;

  T item() const;
  T at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  void zero_grad();

  // Reverse pass from a single-element tensor; seeds d(self)/d(self) = 1.
  void backward() const;

  // Deep copy of values with no graph attached.
  Tensor detach() const;

  // Same storage identity.
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Casts between precisions; the result is a detached leaf.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> out(x.numel());
  auto src = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(src[i]);
  return Tensor<To>::from(x.shape(), std::move(out));
}

}  // namespace apa::num
