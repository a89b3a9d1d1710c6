#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "epca/error.hpp"
#include "epca/rng.hpp"

namespace epca {

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string to_string(const Shape& shape);

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::f32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::f64;
}

const char* dtype_name(DType d);

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct TensorImpl;

template <typename T>
struct GradNode {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  /// Reads out.grad and accumulates into the inputs that require grad.
  std::function<void(const TensorImpl<T>& out)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first written
  bool requires_grad = false;
  std::shared_ptr<GradNode<T>> grad_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
  }
};

}  // namespace detail

/// Recording switch for the gradient graph. Disabled inside NoGradGuard.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy. Activations are NCHW.
template <typename T>
class Tensor {
 public:
  using Impl = detail::TensorImpl<T>;
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng);
  static Tensor normal(Shape shape, double mean, double stddev, Rng& rng);
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T* ptr() { return impl_->data.data(); }
  const T* ptr() const { return impl_->data.data(); }
  std::vector<T> to_vector() const { return impl_->data; }

  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;
  T& at(std::initializer_list<std::int64_t> index);

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return !impl_->grad_fn; }
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer; all zeros when nothing has been accumulated yet.
  std::vector<T> grad() const;
  std::span<T> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad();
  void clear_grad() { impl_->grad.clear(); }

  /// Reverse-mode pass from this scalar. Leaf gradients accumulate across
  /// calls until zero_grad(); intermediate gradients are reset per call.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;
  Tensor reshape(Shape shape) const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(impl_->data.begin(), impl_->data.end());
    return Tensor<U>(impl_->shape, std::move(out));
  }

  const std::shared_ptr<Impl>& impl() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<Impl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  std::int64_t offset(std::initializer_list<std::int64_t> index) const;

  std::shared_ptr<Impl> impl_;
};

/// Topologically ordered view of the recorded operations reachable from a
/// root. Built per backward call; single-writer.
template <typename T>
class GradGraph {
 public:
  static GradGraph build(const Tensor<T>& root);

  /// Seeds d(root)/d(root) = 1 and runs every node's backward rule once in
  /// reverse topological order.
  void run(const Tensor<T>& root) const;

  std::size_t size() const { return order_.size(); }
  std::vector<std::string> op_names() const;

 private:
  std::vector<std::shared_ptr<detail::TensorImpl<T>>> order_;  // inputs before outputs
};

namespace detail {

/// Wraps computed data into a tensor, attaching a backward rule when any
/// input participates in the graph and recording is enabled.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(const TensorImpl<T>&)> backward);

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op, const std::vector<Tensor<T>>& inputs,
                      std::function<void(const TensorImpl<T>&)> backward);

}  // namespace detail

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace epca
