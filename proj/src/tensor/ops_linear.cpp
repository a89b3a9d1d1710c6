#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "epca/ops.hpp"

namespace epca {

namespace {
template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias) {
  require_dims(x.rank() == 2, "linear expects [N, Cin] input, got " + to_string(x.shape()));
  require_dims(weight.rank() == 2 && weight.dim(1) == x.dim(1),
               "linear: weight " + to_string(weight.shape()) + " does not match input " + to_string(x.shape()));
  const auto n = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
  if (bias) require_dims(bias->rank() == 1 && bias->dim(0) == cout, "linear bias must be [Cout]");
  std::vector<T> out(static_cast<std::size_t>(n * cout));
  Eigen::Map<const RowMat<T>> xm(x.ptr(), n, cin);
  Eigen::Map<const RowMat<T>> wm(weight.ptr(), cout, cin);
  Eigen::Map<RowMat<T>> om(out.data(), n, cout);
  om.noalias() = xm * wm.transpose();
  if (bias) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bm(bias->ptr(), 1, cout);
    om.rowwise() += bm;
  }
  auto px = x.impl();
  auto pw = weight.impl();
  auto pb = bias ? bias->impl() : nullptr;
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return detail::make_result<T>(Shape{n, cout}, std::move(out), "linear", inputs,
                                [px, pw, pb, n, cin, cout](const detail::TensorImpl<T>& o) {
                                  Eigen::Map<const RowMat<T>> gm(o.grad.data(), n, cout);
                                  if (px->requires_grad) {
                                    Eigen::Map<RowMat<T>> gx(px->grad_buffer().data(), n, cin);
                                    Eigen::Map<const RowMat<T>> wm(pw->data.data(), cout, cin);
                                    gx.noalias() += gm * wm;
                                  }
                                  if (pw->requires_grad) {
                                    Eigen::Map<RowMat<T>> gw(pw->grad_buffer().data(), cout, cin);
                                    Eigen::Map<const RowMat<T>> xm(px->data.data(), n, cin);
                                    gw.noalias() += gm.transpose() * xm;
                                  }
                                  if (pb && pb->requires_grad) {
                                    auto& gb = pb->grad_buffer();
                                    for (std::int64_t j = 0; j < cout; ++j) gb[j] += gm.col(j).sum();
                                  }
                                });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require_dims(logits.rank() == 2, "softmax expects [N, K] logits");
  const auto n = logits.dim(0), k = logits.dim(1);
  std::vector<T> out(logits.data().begin(), logits.data().end());
  for (std::int64_t i = 0; i < n; ++i) {
    T* row = out.data() + i * k;
    const T mx = *std::max_element(row, row + k);
    T z{0};
    for (std::int64_t j = 0; j < k; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::int64_t j = 0; j < k; ++j) row[j] /= z;
  }
  return Tensor<T>(logits.shape(), std::move(out));
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_dims(logits.rank() == 2, "softmax_cross_entropy expects [N, K] logits, got " + to_string(logits.shape()));
  const auto n = logits.dim(0), k = logits.dim(1);
  require(static_cast<std::int64_t>(labels.size()) == n, "softmax_cross_entropy: label count does not match batch");
  for (int y : labels)
    require(y >= 0 && y < k, "label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
  auto probs = std::make_shared<std::vector<T>>(logits.data().begin(), logits.data().end());
  double loss = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    T* row = probs->data() + i * k;
    const T mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::int64_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    const double log_z = std::log(z) + static_cast<double>(mx);
    loss += log_z - static_cast<double>(row[labels[i]]);
    for (std::int64_t j = 0; j < k; ++j) row[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - log_z));
  }
  loss /= static_cast<double>(n);
  auto src = logits.impl();
  std::vector<int> ys(labels.begin(), labels.end());
  return detail::make_result<T>(Shape{}, std::vector<T>{static_cast<T>(loss)}, "softmax_cross_entropy", {logits},
                                [src, probs, ys, n, k](const detail::TensorImpl<T>& o) {
                                  auto& g = src->grad_buffer();
                                  const T s = o.grad[0] / static_cast<T>(n);
                                  for (std::int64_t i = 0; i < n; ++i)
                                    for (std::int64_t j = 0; j < k; ++j) {
                                      const T target = (j == ys[i]) ? T{1} : T{0};
                                      g[i * k + j] += s * ((*probs)[i * k + j] - target);
                                    }
                                });
}

#define EPCA_INSTANTIATE(T)                                                          \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);  \
  template Tensor<T> softmax(const Tensor<T>&);                                     \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);

EPCA_INSTANTIATE(float)
EPCA_INSTANTIATE(double)
#undef EPCA_INSTANTIATE

}  // namespace epca
