#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "epca/ops.hpp"

namespace epca {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeom {
  std::int64_t cin, h, w, cout, kh, kw, stride, pad, oh, ow;
  std::int64_t k() const { return cin * kh * kw; }
  std::int64_t p() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// Output columns [lo, hi) whose input column ox*stride - pad + kj is inside [0, w).
inline std::pair<std::int64_t, std::int64_t> valid_cols(const ConvGeom& g, std::int64_t kj) {
  auto ceil_div = [](std::int64_t a, std::int64_t b) { return a <= 0 ? -((-a) / b) : (a + b - 1) / b; };
  const std::int64_t lo = std::max<std::int64_t>(0, ceil_div(g.pad - kj, g.stride));
  const std::int64_t hi = std::min<std::int64_t>(g.ow, ceil_div(g.w + g.pad - kj, g.stride));
  return {lo, std::max(lo, hi)};
}

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  for (std::int64_t c = 0; c < g.cin; ++c)
    for (std::int64_t ki = 0; ki < g.kh; ++ki)
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * g.p();
        const auto [lo, hi] = valid_cols(g, kj);
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(dst, g.ow, T{0});
            continue;
          }
          const T* src = x + (c * g.h + iy) * g.w;
          const std::int64_t shift = kj - g.pad;
          std::fill(dst, dst + lo, T{0});
          if (g.stride == 1) {
            std::copy(src + lo + shift, src + hi + shift, dst + lo);
          } else {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + shift];
          }
          std::fill(dst + hi, dst + g.ow, T{0});
        }
      }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* dx) {
  for (std::int64_t c = 0; c < g.cin; ++c)
    for (std::int64_t ki = 0; ki < g.kh; ++ki)
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * g.p();
        const auto [lo, hi] = valid_cols(g, kj);
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          T* __restrict dst = dx + (c * g.h + iy) * g.w;
          const T* __restrict src = row + oy * g.ow;
          const std::int64_t shift = kj - g.pad;
          if (g.stride == 1) {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
          } else {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox * g.stride + shift] += src[ox];
          }
        }
      }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias, int stride, int padding) {
  require_dims(x.rank() == 4, "conv2d expects NCHW input, got " + to_string(x.shape()));
  require_dims(weight.rank() == 4, "conv2d expects [Cout, Cin, kh, kw] weight, got " + to_string(weight.shape()));
  require(stride >= 1, "conv2d stride must be >= 1");
  require(padding >= 0, "conv2d padding must be >= 0");
  require_dims(x.dim(1) == weight.dim(1), "conv2d: input has " + std::to_string(x.dim(1)) +
                                              " channels but weight expects " + std::to_string(weight.dim(1)));
  ConvGeom g{x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3), stride, padding, 0, 0};
  require(g.kh <= g.h + 2 * g.pad && g.kw <= g.w + 2 * g.pad, "conv2d kernel larger than padded input");
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  if (bias) require_dims(bias->rank() == 1 && bias->dim(0) == g.cout, "conv2d bias must be [Cout]");

  const std::int64_t n = x.dim(0);
  const std::int64_t in_stride = g.cin * g.h * g.w, out_stride = g.cout * g.p();
  std::vector<T> out(static_cast<std::size_t>(n * out_stride));
  std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(g.k() * g.p()));
  Eigen::Map<const RowMat<T>> wm(weight.ptr(), g.cout, g.k());
  for (std::int64_t i = 0; i < n; ++i) {
    const T* xi = x.ptr() + i * in_stride;
    const T* cp = xi;
    if (!g.pointwise()) {
      im2col(xi, g, col.data());
      cp = col.data();
    }
    Eigen::Map<const RowMat<T>> cm(cp, g.k(), g.p());
    Eigen::Map<RowMat<T>> om(out.data() + i * out_stride, g.cout, g.p());
    om.noalias() = wm * cm;
    if (bias) {
      const auto bd = bias->data();
      for (std::int64_t oc = 0; oc < g.cout; ++oc) om.row(oc).array() += bd[oc];
    }
  }

  auto px = x.impl();
  auto pw = weight.impl();
  std::shared_ptr<detail::TensorImpl<T>> pb = bias ? bias->impl() : nullptr;
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return detail::make_result<T>(
      Shape{n, g.cout, g.oh, g.ow}, std::move(out), "conv2d", inputs,
      [px, pw, pb, g, n, in_stride, out_stride](const detail::TensorImpl<T>& o) {
        Eigen::Map<const RowMat<T>> wm(pw->data.data(), g.cout, g.k());
        std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(g.k() * g.p()));
        std::vector<T> dcol(static_cast<std::size_t>(g.k() * g.p()));
        RowMat<T> dw_acc;
        if (pw->requires_grad) dw_acc = RowMat<T>::Zero(g.cout, g.k());
        for (std::int64_t i = 0; i < n; ++i) {
          Eigen::Map<const RowMat<T>> gm(o.grad.data() + i * out_stride, g.cout, g.p());
          if (pw->requires_grad) {
            const T* xi = px->data.data() + i * in_stride;
            const T* cp = xi;
            if (!g.pointwise()) {
              im2col(xi, g, col.data());
              cp = col.data();
            }
            Eigen::Map<const RowMat<T>> cm(cp, g.k(), g.p());
            dw_acc.noalias() += gm * cm.transpose();
          }
          if (px->requires_grad) {
            auto& gx = px->grad_buffer();
            T* dxi = gx.data() + i * in_stride;
            if (g.pointwise()) {
              Eigen::Map<RowMat<T>> dxm(dxi, g.k(), g.p());
              dxm.noalias() += wm.transpose() * gm;
            } else {
              Eigen::Map<RowMat<T>> dcm(dcol.data(), g.k(), g.p());
              dcm.noalias() = wm.transpose() * gm;
              col2im(dcol.data(), g, dxi);
            }
          }
          if (pb && pb->requires_grad) {
            auto& gb = pb->grad_buffer();
            for (std::int64_t oc = 0; oc < g.cout; ++oc) gb[oc] += gm.row(oc).sum();
          }
        }
        if (pw->requires_grad) {
          auto& gw = pw->grad_buffer();
          Eigen::Map<RowMat<T>> gwm(gw.data(), g.cout, g.k());
          gwm += dw_acc;
        }
      });
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int kernel, int stride, int padding) {
  require_dims(x.rank() == 4, "max_pool2d expects NCHW input");
  require(kernel >= 1 && stride >= 1 && padding >= 0 && padding * 2 <= kernel, "max_pool2d: invalid geometry");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(kernel <= h + 2 * padding && kernel <= w + 2 * padding, "max_pool2d kernel larger than padded input");
  const std::int64_t oh = (h + 2 * padding - kernel) / stride + 1;
  const std::int64_t ow = (w + 2 * padding - kernel) / stride + 1;
  std::vector<T> out(static_cast<std::size_t>(n * c * oh * ow));
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
  const auto d = x.data();
  for (std::int64_t plane = 0; plane < n * c; ++plane)
    for (std::int64_t oy = 0; oy < oh; ++oy)
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        T second = best;
        std::int64_t best_idx = -1;
        for (int ki = 0; ki < kernel; ++ki)
          for (int kj = 0; kj < kernel; ++kj) {
            const auto iy = oy * stride - padding + ki, ix = ox * stride - padding + kj;
            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
            const auto idx = (plane * h + iy) * w + ix;
            if (d[idx] > best) {
              second = best;
              best = d[idx];
              best_idx = idx;
            } else if (d[idx] > second) {
              second = d[idx];
            }
          }
        if (std::isfinite(static_cast<double>(second)))
          KinkMonitor::observe(std::abs(static_cast<double>(best - second)));
        const auto o = (plane * oh + oy) * ow + ox;
        out[o] = best;
        (*argmax)[o] = best_idx;
      }
  auto src = x.impl();
  return detail::make_result<T>(Shape{n, c, oh, ow}, std::move(out), "max_pool2d", {x},
                                [src, argmax](const detail::TensorImpl<T>& o) {
                                  auto& g = src->grad_buffer();
                                  for (std::size_t i = 0; i < argmax->size(); ++i) g[(*argmax)[i]] += o.grad[i];
                                });
}

template Tensor<float> conv2d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>*, int, int);
template Tensor<double> conv2d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>*, int, int);
template Tensor<float> max_pool2d(const Tensor<float>&, int, int, int);
template Tensor<double> max_pool2d(const Tensor<double>&, int, int, int);

}  // namespace epca
