#include "epca/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace epca {

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    require_dims(d >= 0, "negative dimension in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

namespace {
thread_local bool grad_mode_enabled = true;
}

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool on) { grad_mode_enabled = on; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<Impl>()) {
  impl_->data.assign(static_cast<std::size_t>(numel_of(shape)), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<Impl>()) {
  require_dims(numel_of(shape) == static_cast<std::int64_t>(data.size()),
               "data length " + std::to_string(data.size()) + " does not match shape " + to_string(shape));
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

template <typename T>
Tensor<T> Tensor<T>::uniform(Shape shape, double lo, double hi, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.impl_->data) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::normal(Shape shape, double mean, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.impl_->data) v = static_cast<T>(rng.normal(mean, stddev));
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  require(impl_->data.size() == 1, "item() requires a single-element tensor, got shape " + to_string(shape()));
  return impl_->data[0];
}

template <typename T>
std::int64_t Tensor<T>::offset(std::initializer_list<std::int64_t> index) const {
  require_dims(index.size() == impl_->shape.size(), "index rank does not match tensor rank");
  std::int64_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    const auto d = impl_->shape[axis++];
    require(i >= 0 && i < d, "index out of range");
    off = off * d + i;
  }
  return off;
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
  return impl_->data[static_cast<std::size_t>(offset(index))];
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::int64_t> index) {
  return impl_->data[static_cast<std::size_t>(offset(index))];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  require(!on || is_leaf(), "requires_grad can only be set on leaf tensors");
  impl_->requires_grad = on;
  return *this;
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (impl_->grad.empty()) return std::vector<T>(impl_->data.size(), T{0});
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
}

template <typename T>
void Tensor<T>::backward() const {
  require(impl_->data.size() == 1, "backward() requires a scalar loss, got shape " + to_string(shape()));
  GradGraph<T>::build(*this).run(*this);
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = impl_->shape;
  t.impl_->data = impl_->data;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor t = detach();
  t.impl_->requires_grad = impl_->requires_grad && is_leaf();
  t.impl_->grad = impl_->grad;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape new_shape) const {
  require_dims(numel_of(new_shape) == numel(),
               "cannot reshape " + to_string(shape()) + " into " + to_string(new_shape));
  auto src = impl_;
  return detail::make_result<T>(std::move(new_shape), impl_->data, "reshape", {*this},
                                [src](const Impl& out) {
                                  if (!src->requires_grad) return;
                                  auto& g = src->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
                                });
}

template <typename T>
GradGraph<T> GradGraph<T>::build(const Tensor<T>& root) {
  GradGraph graph;
  using ImplPtr = std::shared_ptr<detail::TensorImpl<T>>;
  std::unordered_set<const detail::TensorImpl<T>*> visited;
  // iterative post-order DFS
  std::vector<std::pair<ImplPtr, std::size_t>> stack;
  if (root.impl()->grad_fn) stack.emplace_back(root.impl(), 0);
  visited.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto& inputs = node->grad_fn->inputs;
    if (next < inputs.size()) {
      const ImplPtr child = inputs[next++];
      if (child->grad_fn && visited.insert(child.get()).second) stack.emplace_back(child, 0);
      continue;
    }
    graph.order_.push_back(node);
    stack.pop_back();
  }
  return graph;
}

template <typename T>
void GradGraph<T>::run(const Tensor<T>& root) const {
  for (const auto& impl : order_) std::fill(impl->grad.begin(), impl->grad.end(), T{0});
  auto& seed = root.impl()->grad_buffer();
  seed[0] += T{1};
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    const auto& impl = *it;
    if (impl->grad.empty()) continue;
    impl->grad_fn->backward(*impl);
  }
}

template <typename T>
std::vector<std::string> GradGraph<T>::op_names() const {
  std::vector<std::string> names;
  names.reserve(order_.size());
  for (const auto& impl : order_) names.push_back(impl->grad_fn->op);
  return names;
}

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op, const std::vector<Tensor<T>>& inputs,
                      std::function<void(const TensorImpl<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!GradMode::enabled()) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor<T>& t) { return t.defined() && t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<GradNode<T>>();
  node->op = op;
  for (const auto& t : inputs)
    if (t.defined() && t.requires_grad()) node->inputs.push_back(t.impl());
  node->backward = std::move(backward);
  out.impl()->grad_fn = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(const TensorImpl<T>&)> backward) {
  return make_result<T>(std::move(shape), std::move(data), op, std::vector<Tensor<T>>(inputs), std::move(backward));
}

template Tensor<float> make_result(Shape, std::vector<float>, const char*, const std::vector<Tensor<float>>&,
                                   std::function<void(const TensorImpl<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, const char*, const std::vector<Tensor<double>>&,
                                    std::function<void(const TensorImpl<double>&)>);
template Tensor<float> make_result(Shape, std::vector<float>, const char*, std::initializer_list<Tensor<float>>,
                                   std::function<void(const TensorImpl<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, const char*, std::initializer_list<Tensor<double>>,
                                    std::function<void(const TensorImpl<double>&)>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template class GradGraph<float>;
template class GradGraph<double>;

}  // namespace epca
