#pragma once

// Independent reference implementations used only by tests.

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "epca/tensor.hpp"

namespace oracle {

inline epca::TensorD conv2d(const epca::TensorD& x, const epca::TensorD& w, const epca::TensorD* b, int stride,
                            int pad) {
  const auto n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const auto oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  epca::TensorD y({n, cout, oh, ow});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t o = 0; o < cout; ++o)
      for (std::int64_t r = 0; r < oh; ++r)
        for (std::int64_t c = 0; c < ow; ++c) {
          double acc = b ? b->data()[o] : 0.0;
          for (std::int64_t ci = 0; ci < cin; ++ci)
            for (std::int64_t a = 0; a < kh; ++a)
              for (std::int64_t bb = 0; bb < kw; ++bb) {
                const auto yy = r * stride - pad + a, xx = c * stride - pad + bb;
                if (yy < 0 || yy >= h || xx < 0 || xx >= wd) continue;
                acc += x.at({i, ci, yy, xx}) * w.at({o, ci, a, bb});
              }
          y.at({i, o, r, c}) = acc;
        }
  return y;
}

/// Double-loop adaptive average pooling with floor/ceil bin edges computed
/// in floating point.
inline epca::TensorD adaptive_pool(const epca::TensorD& x, int k) {
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  epca::TensorD y({n, c, k, k});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (int r = 0; r < k; ++r)
        for (int s = 0; s < k; ++s) {
          const auto y0 = static_cast<std::int64_t>(std::floor(double(r) * h / k));
          const auto y1 = static_cast<std::int64_t>(std::ceil(double(r + 1) * h / k));
          const auto x0 = static_cast<std::int64_t>(std::floor(double(s) * w / k));
          const auto x1 = static_cast<std::int64_t>(std::ceil(double(s + 1) * w / k));
          double acc = 0.0;
          for (auto yy = y0; yy < y1; ++yy)
            for (auto xx = x0; xx < x1; ++xx) acc += x.at({i, ch, yy, xx});
          y.at({i, ch, r, s}) = acc / double((y1 - y0) * (x1 - x0));
        }
  return y;
}

struct MetricValues {
  double acc, sen, f1, kappa;
};

/// Straight from the label lists: per-class counts, precision/recall F1 and
/// marginal-product chance agreement.
inline MetricValues metrics(const std::vector<int>& t, const std::vector<int>& p, int k) {
  const double n = static_cast<double>(t.size());
  double hits = 0;
  for (std::size_t i = 0; i < t.size(); ++i) hits += t[i] == p[i];
  double sen = 0, f1 = 0, pe = 0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    double tp = 0, actual = 0, predicted = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      tp += (t[i] == c && p[i] == c);
      actual += t[i] == c;
      predicted += p[i] == c;
    }
    pe += (actual / n) * (predicted / n);
    if (actual == 0) continue;
    ++present;
    const double recall = tp / actual;
    const double precision = predicted > 0 ? tp / predicted : 0.0;
    sen += recall;
    f1 += (precision + recall) > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  }
  const double po = hits / n;
  return {po, sen / present, f1 / present, pe == 1.0 ? 0.0 : (po - pe) / (1 - pe)};
}

/// Mann-Whitney pairwise statistic: P(score_pos > score_neg) + 1/2 P(tie).
inline double pairwise_auc(const std::vector<int>& pos, const std::vector<double>& s) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!pos[i] || pos[j]) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  return wins / pairs;
}

}  // namespace oracle
