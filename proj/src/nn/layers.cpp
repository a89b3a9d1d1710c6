#include <cmath>

#include "epca/module.hpp"

namespace epca {

const char* role_name(ParamRole role) {
  switch (role) {
    case ParamRole::backbone:
      return "backbone";
    case ParamRole::adapter:
      return "adapter";
    case ParamRole::head:
      return "head";
  }
  return "?";
}

template <typename T>
Conv2d<T>::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, bool bias, Rng& rng)
    : stride_(stride), padding_(padding) {
  require(in_channels > 0 && out_channels > 0 && kernel > 0, "Conv2d: sizes must be positive");
  const double fan_in = static_cast<double>(in_channels) * kernel * kernel;
  const double bound = std::sqrt(6.0 / fan_in);
  weight_ = Tensor<T>::uniform({out_channels, in_channels, kernel, kernel}, -bound, bound, rng);
  weight_.set_requires_grad(true);
  if (bias) {
    bias_ = Tensor<T>::uniform({out_channels}, -1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in), rng);
    bias_.set_requires_grad(true);
  }
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) {
  return conv2d(x, weight_, bias_.defined() ? &bias_ : nullptr, stride_, padding_);
}

template <typename T>
void Conv2d<T>::collect(const std::string& prefix, ParamRole role, Registry<T>& reg) {
  reg.params.push_back({prefix + ".weight", weight_, role, true});
  if (bias_.defined()) reg.params.push_back({prefix + ".bias", bias_, role, true});
}

template <typename T>
Shape Conv2d<T>::audit(const Shape& in, const std::string& prefix, std::vector<LayerAudit>& rows) const {
  const auto cout = weight_.dim(0), cin = weight_.dim(1), kh = weight_.dim(2), kw = weight_.dim(3);
  require_dims(in.size() == 3 && in[0] == cin, "Conv2d audit: input " + to_string(in) + " has wrong channels");
  const auto oh = (in[1] + 2 * padding_ - kh) / stride_ + 1;
  const auto ow = (in[2] + 2 * padding_ - kw) / stride_ + 1;
  LayerAudit row{prefix, "conv", weight_.numel() + (bias_.defined() ? bias_.numel() : 0),
                 2 * cout * cin * kh * kw * oh * ow + (bias_.defined() ? cout * oh * ow : 0), {cout, oh, ow}, false};
  rows.push_back(row);
  return row.output;
}

template <typename T>
BatchNorm<T>::BatchNorm(int channels, bool affine, double eps, double momentum)
    : affine_(affine), eps_(eps), momentum_(momentum), state_(static_cast<std::size_t>(channels)) {
  require(channels > 0, "BatchNorm: channel count must be positive");
  require(eps > 0.0, "BatchNorm: eps must be positive");
  if (affine_) {
    gamma_ = Tensor<T>::ones({channels});
    beta_ = Tensor<T>::zeros({channels});
    gamma_.set_requires_grad(true);
    beta_.set_requires_grad(true);
  }
}

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x) {
  return batch_norm(x, affine_ ? &gamma_ : nullptr, affine_ ? &beta_ : nullptr, state_, this->training_ && !frozen_,
                    eps_, momentum_);
}

template <typename T>
void BatchNorm<T>::collect(const std::string& prefix, ParamRole role, Registry<T>& reg) {
  if (affine_) {
    reg.params.push_back({prefix + ".weight", gamma_, role, false});
    reg.params.push_back({prefix + ".bias", beta_, role, false});
  }
  reg.buffers.push_back({prefix + ".running_mean", &state_.running_mean, role});
  reg.buffers.push_back({prefix + ".running_var", &state_.running_var, role});
}

template <typename T>
Shape BatchNorm<T>::audit(const Shape& in, const std::string& prefix, std::vector<LayerAudit>& rows) const {
  rows.push_back({prefix, "bn", affine_ ? 2 * static_cast<std::int64_t>(state_.running_mean.size()) : 0,
                  numel_of(in), in, false});
  return in;
}

template <typename T>
Linear<T>::Linear(int in_features, int out_features, bool bias, Rng& rng) {
  require(in_features > 0 && out_features > 0, "Linear: sizes must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight_ = Tensor<T>::uniform({out_features, in_features}, -bound, bound, rng);
  weight_.set_requires_grad(true);
  if (bias) {
    bias_ = Tensor<T>::uniform({out_features}, -bound, bound, rng);
    bias_.set_requires_grad(true);
  }
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) {
  return linear(x, weight_, bias_.defined() ? &bias_ : nullptr);
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, ParamRole role, Registry<T>& reg) {
  reg.params.push_back({prefix + ".weight", weight_, role, true});
  if (bias_.defined()) reg.params.push_back({prefix + ".bias", bias_, role, true});
}

template <typename T>
Shape Linear<T>::audit(const Shape& in, const std::string& prefix, std::vector<LayerAudit>& rows) const {
  const auto cout = weight_.dim(0), cin = weight_.dim(1);
  require_dims(numel_of(in) == cin, "Linear audit: input " + to_string(in) + " has wrong width");
  rows.push_back({prefix, "linear", weight_.numel() + (bias_.defined() ? bias_.numel() : 0), 2 * cin * cout, {cout},
                  false});
  return {cout};
}

template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm<float>;
template class BatchNorm<double>;
template class Linear<float>;
template class Linear<double>;

}  // namespace epca
