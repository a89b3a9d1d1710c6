#include <cmath>

#include "epca/ops.hpp"

namespace epca {

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const std::type_identity_t<Tensor<T>>* gamma, const std::type_identity_t<Tensor<T>>* beta, BatchNormState<T>& state,
                     bool training, double eps, double momentum) {
  require(eps > 0.0, "batch_norm eps must be positive");
  require(momentum >= 0.0 && momentum <= 1.0, "batch_norm momentum must lie in [0, 1]");
  require_dims(x.rank() == 4 || x.rank() == 3, "batch_norm expects rank-4 or rank-3 input, got " + to_string(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), l = x.numel() / (n * c);
  require_dims(state.running_mean.size() == static_cast<std::size_t>(c) &&
                   state.running_var.size() == static_cast<std::size_t>(c),
               "batch_norm: running stats do not match channel count " + std::to_string(c));
  if (gamma) require_dims(gamma->numel() == c, "batch_norm: gamma must have one entry per channel");
  if (beta) require_dims(beta->numel() == c, "batch_norm: beta must have one entry per channel");
  const std::int64_t m = n * l;
  require(m >= 1, "batch_norm on an empty batch");

  const auto xd = x.data();
  auto xhat = std::make_shared<std::vector<T>>(xd.size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
  std::vector<T> out(xd.size());
  for (std::int64_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (training) {
      double s = 0.0;
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < l; ++j) s += xd[(i * c + ch) * l + j];
      const double mean = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < l; ++j) {
          const double dv = xd[(i * c + ch) * l + j] - mean;
          ss += dv * dv;
        }
      const double biased = ss / static_cast<double>(m);
      const double unbiased = m > 1 ? ss / static_cast<double>(m - 1) : biased;
      mu = static_cast<T>(mean);
      var = static_cast<T>(biased);
      state.running_mean[ch] = static_cast<T>((1.0 - momentum) * state.running_mean[ch] + momentum * mean);
      state.running_var[ch] = static_cast<T>((1.0 - momentum) * state.running_var[ch] + momentum * unbiased);
    } else {
      mu = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const T is = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + eps));
    (*inv_std)[ch] = is;
    const T gv = gamma ? gamma->data()[ch] : T{1};
    const T bv = beta ? beta->data()[ch] : T{0};
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < l; ++j) {
        const auto idx = (i * c + ch) * l + j;
        const T xh = (xd[idx] - mu) * is;
        (*xhat)[idx] = xh;
        out[idx] = xh * gv + bv;
      }
  }

  auto px = x.impl();
  auto pg = gamma ? gamma->impl() : nullptr;
  auto pb = beta ? beta->impl() : nullptr;
  std::vector<Tensor<T>> inputs{x};
  if (gamma) inputs.push_back(*gamma);
  if (beta) inputs.push_back(*beta);
  return detail::make_result<T>(
      x.shape(), std::move(out), "batch_norm", inputs,
      [px, pg, pb, xhat, inv_std, n, c, l, m, training](const detail::TensorImpl<T>& o) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T gv = pg ? pg->data[ch] : T{1};
          T sum_dy{0}, sum_dy_xh{0};
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < l; ++j) {
              const auto idx = (i * c + ch) * l + j;
              sum_dy += o.grad[idx];
              sum_dy_xh += o.grad[idx] * (*xhat)[idx];
            }
          if (pg && pg->requires_grad) pg->grad_buffer()[ch] += sum_dy_xh;
          if (pb && pb->requires_grad) pb->grad_buffer()[ch] += sum_dy;
          if (!px->requires_grad) continue;
          auto& gx = px->grad_buffer();
          const T is = (*inv_std)[ch];
          if (training) {
            const T inv_m = T{1} / static_cast<T>(m);
            for (std::int64_t i = 0; i < n; ++i)
              for (std::int64_t j = 0; j < l; ++j) {
                const auto idx = (i * c + ch) * l + j;
                gx[idx] += gv * is * inv_m *
                           (static_cast<T>(m) * o.grad[idx] - sum_dy - (*xhat)[idx] * sum_dy_xh);
              }
          } else {
            for (std::int64_t i = 0; i < n; ++i)
              for (std::int64_t j = 0; j < l; ++j) {
                const auto idx = (i * c + ch) * l + j;
                gx[idx] += gv * is * o.grad[idx];
              }
          }
        }
      });
}

template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, int k) {
  require_dims(x.rank() == 4, "adaptive_avg_pool expects NCHW input, got " + to_string(x.shape()));
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(k >= 1 && k <= h && k <= w, "adaptive_avg_pool: grid size " + std::to_string(k) +
                                          " exceeds spatial extent " + std::to_string(h) + "x" + std::to_string(w));
  // bin [floor(i*H/k), ceil((i+1)*H/k))
  auto bins = [k](std::int64_t extent) {
    std::vector<std::pair<std::int64_t, std::int64_t>> b(static_cast<std::size_t>(k));
    for (std::int64_t i = 0; i < k; ++i) b[i] = {(i * extent) / k, ((i + 1) * extent + k - 1) / k};
    return b;
  };
  const auto rows = bins(h), cols = bins(w);
  std::vector<T> out(static_cast<std::size_t>(n * c * k * k));
  const auto d = x.data();
  for (std::int64_t plane = 0; plane < n * c; ++plane)
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) {
        T acc{0};
        for (auto y = rows[i].first; y < rows[i].second; ++y)
          for (auto xx = cols[j].first; xx < cols[j].second; ++xx) acc += d[(plane * h + y) * w + xx];
        const auto cnt = (rows[i].second - rows[i].first) * (cols[j].second - cols[j].first);
        out[(plane * k + i) * k + j] = acc / static_cast<T>(cnt);
      }
  auto src = x.impl();
  return detail::make_result<T>(Shape{n, c, k, k}, std::move(out), "adaptive_avg_pool", {x},
                                [src, rows, cols, n, c, h, w, k](const detail::TensorImpl<T>& o) {
                                  auto& g = src->grad_buffer();
                                  for (std::int64_t plane = 0; plane < n * c; ++plane)
                                    for (int i = 0; i < k; ++i)
                                      for (int j = 0; j < k; ++j) {
                                        const auto cnt = (rows[i].second - rows[i].first) *
                                                         (cols[j].second - cols[j].first);
                                        const T go = o.grad[(plane * k + i) * k + j] / static_cast<T>(cnt);
                                        for (auto y = rows[i].first; y < rows[i].second; ++y)
                                          for (auto xx = cols[j].first; xx < cols[j].second; ++xx)
                                            g[(plane * h + y) * w + xx] += go;
                                      }
                                });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_dims(x.rank() == 4, "global_avg_pool expects NCHW input, got " + to_string(x.shape()));
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(n * c));
  const auto d = x.data();
  for (std::int64_t plane = 0; plane < n * c; ++plane) {
    T acc{0};
    for (std::int64_t i = 0; i < hw; ++i) acc += d[plane * hw + i];
    out[plane] = acc / static_cast<T>(hw);
  }
  auto src = x.impl();
  return detail::make_result<T>(Shape{n, c}, std::move(out), "global_avg_pool", {x},
                                [src, n, c, hw](const detail::TensorImpl<T>& o) {
                                  auto& g = src->grad_buffer();
                                  for (std::int64_t plane = 0; plane < n * c; ++plane) {
                                    const T go = o.grad[plane] / static_cast<T>(hw);
                                    for (std::int64_t i = 0; i < hw; ++i) g[plane * hw + i] += go;
                                  }
                                });
}

#define EPCA_INSTANTIATE(T)                                                                                     \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>*, const Tensor<T>*, BatchNormState<T>&, bool, \
                                double, double);                                                                \
  template Tensor<T> adaptive_avg_pool(const Tensor<T>&, int);                                                  \
  template Tensor<T> global_avg_pool(const Tensor<T>&);

EPCA_INSTANTIATE(float)
EPCA_INSTANTIATE(double)
#undef EPCA_INSTANTIATE

}  // namespace epca
