#include <algorithm>
#include <cmath>

#include "epca/ops.hpp"

namespace epca {

namespace {
thread_local KinkMonitor* active_monitor = nullptr;
}

KinkMonitor::KinkMonitor(double threshold) : threshold_(threshold), prev_(active_monitor) { active_monitor = this; }
KinkMonitor::~KinkMonitor() { active_monitor = prev_; }
bool KinkMonitor::tripped() const { return tripped_; }
void KinkMonitor::reset() { tripped_ = false; }
void KinkMonitor::observe(double distance_to_kink) {
  if (active_monitor && distance_to_kink < active_monitor->threshold_) active_monitor->tripped_ = true;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  if (active_monitor)
    for (auto v : out) KinkMonitor::observe(std::abs(static_cast<double>(v)));
  for (auto& v : out) v = v > T{0} ? v : T{0};
  auto src = x.impl();
  return detail::make_result<T>(x.shape(), std::move(out), "relu", {x}, [src](const detail::TensorImpl<T>& o) {
    auto& g = src->grad_buffer();
    T* __restrict gp = g.data();
    const T* __restrict xp = src->data.data();
    const T* __restrict op = o.grad.data();
    const std::size_t n = g.size();
    for (std::size_t i = 0; i < n; ++i) gp[i] += xp[i] > T{0} ? op[i] : T{0};
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.data().size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = in[i];
    if (v >= T{0}) {
      out[i] = T{1} / (T{1} + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T{1} + e);
    }
  }
  auto src = x.impl();
  return detail::make_result<T>(x.shape(), std::move(out), "sigmoid", {x}, [src](const detail::TensorImpl<T>& o) {
    auto& g = src->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * o.data[i] * (T{1} - o.data[i]);
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng& rng) {
  require(rate >= 0.0 && rate < 1.0, "dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(x.data().size());
  std::vector<T> out(x.data().size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.bernoulli(rate) ? T{0} : keep_scale;
    out[i] = in[i] * (*mask)[i];
  }
  auto src = x.impl();
  return detail::make_result<T>(x.shape(), std::move(out), "dropout", {x},
                                [src, mask](const detail::TensorImpl<T>& o) {
                                  auto& g = src->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * (*mask)[i];
                                });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_dims(a.shape() == b.shape(), "add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  auto pa = a.impl();
  auto pb = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "add", {a, b}, [pa, pb](const detail::TensorImpl<T>& o) {
    for (const auto& p : {pa, pb}) {
      if (!p->requires_grad) continue;
      T* __restrict g = p->grad_buffer().data();
      const T* __restrict go = o.grad.data();
      const std::size_t n = o.grad.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += go[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_dims(a.shape() == b.shape(), "mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  auto pa = a.impl();
  auto pb = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {a, b}, [pa, pb](const detail::TensorImpl<T>& o) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa->data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  const T f = static_cast<T>(factor);
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= f;
  auto src = x.impl();
  return detail::make_result<T>(x.shape(), std::move(out), "scale", {x}, [src, f](const detail::TensorImpl<T>& o) {
    auto& g = src->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * f;
  });
}

template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& gate) {
  require_dims(x.rank() == 4, "channel_scale expects NCHW input, got " + to_string(x.shape()));
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require_dims(gate.numel() == n * c && gate.dim(0) == n && gate.dim(1) == c,
               "channel_scale: gate " + to_string(gate.shape()) + " does not match input " + to_string(x.shape()));
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto gd = gate.data();
  for (std::int64_t nc = 0; nc < n * c; ++nc) {
    const T gv = gd[nc];
    T* row = out.data() + nc * hw;
    for (std::int64_t i = 0; i < hw; ++i) row[i] *= gv;
  }
  auto px = x.impl();
  auto pg = gate.impl();
  return detail::make_result<T>(x.shape(), std::move(out), "channel_scale", {x, gate},
                                [px, pg, n, c, hw](const detail::TensorImpl<T>& o) {
                                  const T* __restrict go = o.grad.data();
                                  if (px->requires_grad) {
                                    T* __restrict g = px->grad_buffer().data();
                                    for (std::int64_t nc = 0; nc < n * c; ++nc) {
                                      const T gv = pg->data[nc];
                                      for (std::int64_t i = 0; i < hw; ++i) g[nc * hw + i] += go[nc * hw + i] * gv;
                                    }
                                  }
                                  if (pg->requires_grad) {
                                    auto& g = pg->grad_buffer();
                                    const T* __restrict xd = px->data.data();
                                    for (std::int64_t nc = 0; nc < n * c; ++nc) {
                                      T acc{0};
                                      for (std::int64_t i = 0; i < hw; ++i) acc += go[nc * hw + i] * xd[nc * hw + i];
                                      g[nc] += acc;
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc{0};
  for (auto v : x.data()) acc += v;
  auto src = x.impl();
  return detail::make_result<T>(Shape{}, std::vector<T>{acc}, "sum", {x}, [src](const detail::TensorImpl<T>& o) {
    auto& g = src->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  require(x.numel() > 0, "mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

template <typename T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), "concat_last needs at least one tensor");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::int64_t> widths;
  std::int64_t total = 0;
  for (const auto& p : parts) {
    require_dims(p.rank() == lead.size() + 1 && std::equal(lead.begin(), lead.end(), p.shape().begin()),
                 "concat_last: leading dims disagree: " + to_string(p.shape()));
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const std::int64_t rows = numel_of(lead);
  std::vector<T> out(static_cast<std::size_t>(rows * total));
  std::int64_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto d = parts[k].data();
    for (std::int64_t r = 0; r < rows; ++r)
      std::copy_n(d.begin() + r * widths[k], widths[k], out.begin() + r * total + off);
    off += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  std::vector<std::shared_ptr<detail::TensorImpl<T>>> srcs;
  for (const auto& p : parts) srcs.push_back(p.impl());
  return detail::make_result<T>(std::move(shape), std::move(out), "concat_last", parts,
                                [srcs, widths, rows, total](const detail::TensorImpl<T>& o) {
                                  std::int64_t off = 0;
                                  for (std::size_t k = 0; k < srcs.size(); ++k) {
                                    if (srcs[k]->requires_grad) {
                                      auto& g = srcs[k]->grad_buffer();
                                      for (std::int64_t r = 0; r < rows; ++r)
                                        for (std::int64_t j = 0; j < widths[k]; ++j)
                                          g[r * widths[k] + j] += o.grad[r * total + off + j];
                                    }
                                    off += widths[k];
                                  }
                                });
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::int64_t offset, std::int64_t length) {
  require_dims(x.rank() >= 1, "slice_last on a rank-0 tensor");
  const auto width = x.shape().back();
  require(offset >= 0 && length >= 1 && offset + length <= width, "slice_last: range out of bounds");
  const std::int64_t rows = x.numel() / width;
  std::vector<T> out(static_cast<std::size_t>(rows * length));
  const auto d = x.data();
  for (std::int64_t r = 0; r < rows; ++r)
    std::copy_n(d.begin() + r * width + offset, length, out.begin() + r * length);
  Shape shape = x.shape();
  shape.back() = length;
  auto src = x.impl();
  return detail::make_result<T>(std::move(shape), std::move(out), "slice_last", {x},
                                [src, rows, width, offset, length](const detail::TensorImpl<T>& o) {
                                  auto& g = src->grad_buffer();
                                  for (std::int64_t r = 0; r < rows; ++r)
                                    for (std::int64_t j = 0; j < length; ++j)
                                      g[r * width + offset + j] += o.grad[r * length + j];
                                });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t c0, std::int64_t count) {
  require_dims(x.rank() >= 2, "slice_channels needs rank >= 2");
  const auto n = x.dim(0), c = x.dim(1);
  require(c0 >= 0 && count >= 1 && c0 + count <= c, "slice_channels: range out of bounds");
  const std::int64_t inner = x.numel() / (n * c);
  std::vector<T> out(static_cast<std::size_t>(n * count * inner));
  const auto d = x.data();
  for (std::int64_t i = 0; i < n; ++i)
    std::copy_n(d.begin() + (i * c + c0) * inner, count * inner, out.begin() + i * count * inner);
  Shape shape = x.shape();
  shape[1] = count;
  auto src = x.impl();
  return detail::make_result<T>(std::move(shape), std::move(out), "slice_channels", {x},
                                [src, n, c, c0, count, inner](const detail::TensorImpl<T>& o) {
                                  auto& g = src->grad_buffer();
                                  for (std::int64_t i = 0; i < n; ++i)
                                    for (std::int64_t j = 0; j < count * inner; ++j)
                                      g[(i * c + c0) * inner + j] += o.grad[i * count * inner + j];
                                });
}

template <typename T>
Tensor<T> contract_last(const Tensor<T>& t, const Tensor<T>& w) {
  require_dims(t.rank() == 3, "contract_last expects [N, C, F], got " + to_string(t.shape()));
  const auto n = t.dim(0), c = t.dim(1), f = t.dim(2);
  const bool per_channel = w.rank() == 2;
  if (per_channel) {
    require(w.dim(0) == c && w.dim(1) == f,
            "contract_last: weight " + to_string(w.shape()) + " does not match [C, F] = [" + std::to_string(c) +
                ", " + std::to_string(f) + "]");
  } else {
    require(w.rank() == 1 && w.dim(0) == f, "contract_last: weight length " + std::to_string(w.numel()) +
                                                " does not match feature count " + std::to_string(f));
  }
  std::vector<T> out(static_cast<std::size_t>(n * c));
  const auto td = t.data();
  const auto wd = w.data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T* row = td.data() + (i * c + ch) * f;
      const T* wr = wd.data() + (per_channel ? ch * f : 0);
      T acc{0};
      for (std::int64_t k = 0; k < f; ++k) acc += wr[k] * row[k];
      out[i * c + ch] = acc;
    }
  auto pt = t.impl();
  auto pw = w.impl();
  return detail::make_result<T>(Shape{n, c, 1}, std::move(out), "contract_last", {t, w},
                                [pt, pw, n, c, f, per_channel](const detail::TensorImpl<T>& o) {
                                  for (std::int64_t i = 0; i < n; ++i)
                                    for (std::int64_t ch = 0; ch < c; ++ch) {
                                      const T go = o.grad[i * c + ch];
                                      const std::int64_t wo = per_channel ? ch * f : 0;
                                      const std::int64_t to = (i * c + ch) * f;
                                      if (pt->requires_grad) {
                                        auto& g = pt->grad_buffer();
                                        for (std::int64_t k = 0; k < f; ++k) g[to + k] += go * pw->data[wo + k];
                                      }
                                      if (pw->requires_grad) {
                                        auto& g = pw->grad_buffer();
                                        for (std::int64_t k = 0; k < f; ++k) g[wo + k] += go * pt->data[to + k];
                                      }
                                    }
                                });
}

template <typename T>
Tensor<T> channel_conv1d(const Tensor<T>& x, const Tensor<T>& kernel) {
  require_dims(x.rank() == 3 && x.dim(2) == 1, "channel_conv1d expects [N, C, 1], got " + to_string(x.shape()));
  require(kernel.rank() == 1 && kernel.dim(0) % 2 == 1, "channel_conv1d needs an odd 1-D kernel");
  const auto n = x.dim(0), c = x.dim(1), k = kernel.dim(0), half = k / 2;
  std::vector<T> out(static_cast<std::size_t>(n * c), T{0});
  const auto xd = x.data();
  const auto kd = kernel.data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T acc{0};
      for (std::int64_t j = 0; j < k; ++j) {
        const auto src = ch + j - half;
        if (src >= 0 && src < c) acc += kd[j] * xd[i * c + src];
      }
      out[i * c + ch] = acc;
    }
  auto px = x.impl();
  auto pk = kernel.impl();
  return detail::make_result<T>(Shape{n, c, 1}, std::move(out), "channel_conv1d", {x, kernel},
                                [px, pk, n, c, k, half](const detail::TensorImpl<T>& o) {
                                  for (std::int64_t i = 0; i < n; ++i)
                                    for (std::int64_t ch = 0; ch < c; ++ch) {
                                      const T go = o.grad[i * c + ch];
                                      for (std::int64_t j = 0; j < k; ++j) {
                                        const auto src = ch + j - half;
                                        if (src < 0 || src >= c) continue;
                                        if (px->requires_grad) px->grad_buffer()[i * c + src] += go * pk->data[j];
                                        if (pk->requires_grad) pk->grad_buffer()[j] += go * px->data[i * c + src];
                                      }
                                    }
                                });
}

#define EPCA_INSTANTIATE(T)                                                                   \
  template Tensor<T> relu(const Tensor<T>&);                                                  \
  template Tensor<T> sigmoid(const Tensor<T>&);                                               \
  template Tensor<T> dropout(const Tensor<T>&, double, bool, Rng&);                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale(const Tensor<T>&, double);                                         \
  template Tensor<T> channel_scale(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> sum(const Tensor<T>&);                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                  \
  template Tensor<T> concat_last(const std::vector<Tensor<T>>&);                              \
  template Tensor<T> slice_last(const Tensor<T>&, std::int64_t, std::int64_t);                \
  template Tensor<T> slice_channels(const Tensor<T>&, std::int64_t, std::int64_t);            \
  template Tensor<T> contract_last(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> channel_conv1d(const Tensor<T>&, const Tensor<T>&);

EPCA_INSTANTIATE(float)
EPCA_INSTANTIATE(double)
#undef EPCA_INSTANTIATE

}  // namespace epca
