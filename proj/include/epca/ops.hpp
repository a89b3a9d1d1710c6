#pragma once

#include <cstdint>
#include <optional>
#include <type_traits>
#include <vector>

#include "epca/tensor.hpp"

namespace epca {

// Differentiable operators. Every function records a backward rule on the
// gradient graph when an input requires grad and GradMode is enabled.

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias, int stride, int padding);

/// Running statistics of a batch-norm layer, one entry per channel.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels) : running_mean(channels, T{0}), running_var(channels, T{1}) {}
};

/// Per-channel normalization of x viewed as [N, C, L] (rank-4 NCHW or rank-3
/// [N, C, 1]). Training normalizes with biased batch statistics and updates
/// the running stats (unbiased variance); eval uses the running stats.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const std::type_identity_t<Tensor<T>>* gamma, const std::type_identity_t<Tensor<T>>* beta, BatchNormState<T>& state,
                     bool training, double eps, double momentum);

/// Output cell (i, j) averages rows [floor(i*H/k), ceil((i+1)*H/k)) and the
/// analogous columns.
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, int k);

/// [N, C, H, W] -> [N, C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int kernel, int stride, int padding);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// Inverted dropout: survivors are scaled by 1/(1-rate); identity in eval.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng& rng);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise product of equally shaped tensors.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor);

/// x[N, C, H, W] * g[N, C, 1] with g broadcast over the spatial axes.
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& gate);

/// x[N, Cin] @ weight[Cout, Cin]^T + bias[Cout]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias);

/// Mean cross-entropy of softmax(logits[N, K]) against integer labels.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Row-wise softmax, not recorded.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Concatenation along the last axis; leading dims must agree.
template <typename T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts);

/// x[..., offset : offset + length] along the last axis.
template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::int64_t offset, std::int64_t length);

/// Channel-wise selection x[:, c0 : c0 + count, ...] along axis 1.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t c0, std::int64_t count);

/// t[N, C, F] contracted with w[F] (shared) or w[C, F] (per channel) into
/// [N, C, 1]: z[n, c] = sum_f w[f] * t[n, c, f].
template <typename T>
Tensor<T> contract_last(const Tensor<T>& t, const Tensor<T>& w);

/// 1-D convolution along the channel axis of x[N, C, 1] with an odd kernel,
/// zero padded, no bias.
template <typename T>
Tensor<T> channel_conv1d(const Tensor<T>& x, const Tensor<T>& kernel);

/// Records |x| near relu kinks (and max-pool ties) while active so gradient
/// checks can resample inputs away from non-differentiable points.
class KinkMonitor {
 public:
  explicit KinkMonitor(double threshold);
  ~KinkMonitor();
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;

  bool tripped() const;
  void reset();

  static void observe(double distance_to_kink);

 private:
  double threshold_;
  bool tripped_ = false;
  KinkMonitor* prev_;
};

}  // namespace epca
