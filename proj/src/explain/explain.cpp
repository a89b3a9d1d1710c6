#include "epca/explain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "epca/ops.hpp"

namespace epca {

namespace {

Shape chw_of(const TensorD& t) {
  if (t.rank() == 4) {
    require(t.dim(0) == 1, "grad_cam: expected a single image activation");
    return {t.dim(1), t.dim(2), t.dim(3)};
  }
  require(t.rank() == 3, "grad_cam: activation must be rank 3 or 4, got " + to_string(t.shape()));
  return t.shape();
}

// Linear-interpolated quantile of sorted values.
double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArgumentError("cannot write " + path);
  out << text;
}

}  // namespace

TensorF Heatmap::to_image() const {
  std::vector<float> v(values.begin(), values.end());
  return TensorF({1, height, width}, std::move(v));
}

std::string Heatmap::csv() const {
  std::ostringstream os;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) os << (x ? "," : "") << fmt(at(y, x));
    os << "\n";
  }
  return os.str();
}

std::vector<double> normalize_heatmap(std::vector<double> values) {
  if (values.empty()) return values;
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const double lo = *mn, hi = *mx;
  if (hi == lo) {
    std::fill(values.begin(), values.end(), hi == 0.0 ? 0.0 : 1.0);
    return values;
  }
  for (double& v : values) v = (v - lo) / (hi - lo);
  return values;
}

std::vector<double> grad_cam_raw(const TensorD& activation, const TensorD& grad) {
  const Shape s = chw_of(activation);
  require(chw_of(grad) == s, "grad_cam: gradient shape " + to_string(grad.shape()) + " does not match activation " +
                                 to_string(activation.shape()));
  const auto k = s[0], hw = s[1] * s[2];
  const double* a = activation.ptr();
  const double* g = grad.ptr();
  std::vector<double> map(hw, 0.0);
  for (std::int64_t c = 0; c < k; ++c) {
    double alpha = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) alpha += g[c * hw + i];
    alpha /= static_cast<double>(hw);
    if (alpha == 0.0) continue;
    for (std::int64_t i = 0; i < hw; ++i) map[i] += alpha * a[c * hw + i];
  }
  for (double& v : map) v = std::max(v, 0.0);
  return map;
}

Heatmap grad_cam_from(const TensorD& activation, const TensorD& grad, int out_h, int out_w) {
  const Shape s = chw_of(activation);
  auto raw = grad_cam_raw(activation, grad);
  Heatmap h;
  h.height = out_h;
  h.width = out_w;
  if (s[1] == out_h && s[2] == out_w) {
    h.values = normalize_heatmap(std::move(raw));
    return h;
  }
  std::vector<float> rf(raw.begin(), raw.end());
  TensorF up = resize_bilinear(TensorF({1, s[1], s[2]}, std::move(rf)), out_h, out_w);
  std::vector<double> vals(up.ptr(), up.ptr() + up.numel());
  for (double& v : vals) v = std::max(v, 0.0);
  h.values = normalize_heatmap(std::move(vals));
  return h;
}

Heatmap grad_cam_fn(const TensorD& activation, const std::function<TensorD(const TensorD&)>& score, int out_h,
                    int out_w) {
  TensorD a = activation.detach();
  a.set_requires_grad(true);
  TensorD s = score(a);
  require(s.numel() == 1, "grad_cam: score must be a scalar");
  s.backward();
  TensorD g(a.shape(), a.grad());
  return grad_cam_from(a.detach(), g, out_h, out_w);
}

Heatmap grad_cam(Network<float>& net, const TensorF& image, int target_class, const std::string& layer) {
  require(image.rank() == 3, "grad_cam expects a [C, H, W] image");
  const int k = net.spec().num_classes;
  require(target_class >= 0 && target_class < k,
          "grad_cam: target class " + std::to_string(target_class) + " outside [0, " + std::to_string(k) + ")");
  net.layer_index(layer);  // validates the name
  const bool was_training = net.training();
  net.set_training(false);

  Shape xs{1};
  xs.insert(xs.end(), image.shape().begin(), image.shape().end());
  TensorF x = image.reshape(xs);
  TensorF act;
  {
    NoGradGuard guard;
    act = net.forward_until(x, layer);
  }
  require(act.rank() == 4, "grad_cam: layer '" + layer + "' does not produce a rank-4 activation");
  TensorF a = act.detach();
  a.set_requires_grad(true);
  TensorF logits = net.forward_after(a, layer);
  TensorF onehot({1, k}, 0.0f);
  onehot.data()[target_class] = 1.0f;
  TensorF score = sum(mul(logits, onehot));
  score.backward();
  const auto g = a.grad();
  TensorD ad = a.detach().cast<double>();
  TensorD gd(a.shape(), std::vector<double>(g.begin(), g.end()));
  net.set_training(was_training);

  Heatmap h = grad_cam_from(ad, gd, static_cast<int>(image.dim(1)), static_cast<int>(image.dim(2)));
  h.layer = layer;
  h.target_class = target_class;
  return h;
}

void write_heatmap_pgm(const std::string& path, const Heatmap& map) { write_pnm(path, map.to_image()); }

std::vector<std::string> designated_blocks(const ArchSpec& spec) {
  const auto n = spec.stages.size();
  require(n >= 1, "designated_blocks: architecture has no stages");
  auto name = [](std::size_t s, int b) { return "stage" + std::to_string(s + 1) + ".block" + std::to_string(b); };
  std::vector<std::string> out{name(0, 0)};
  const std::size_t mid = (n - 1) / 2;
  const std::string m = name(mid, (spec.stages[mid].blocks - 1) / 2);
  if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
  const std::string h = name(n - 1, spec.stages[n - 1].blocks - 1);
  if (std::find(out.begin(), out.end(), h) == out.end()) out.push_back(h);
  return out;
}

StageWeightStats contribution_stats(const std::string& stage, const std::vector<TensorF>& contexts,
                                    const TensorF& weights) {
  require(!contexts.empty(), "contribution_stats: no contexts");
  const auto f = contexts.front().dim(2);
  const bool per_channel = weights.rank() == 2;
  require(weights.shape().back() == f, "contribution_stats: weights " + to_string(weights.shape()) +
                                           " do not match " + std::to_string(f) + " features");
  std::vector<std::vector<double>> samples(f);
  const float* wp = weights.ptr();
  for (const auto& t : contexts) {
    require(t.rank() == 3 && t.dim(2) == f, "contribution_stats: context must be [N, C, F]");
    const auto n = t.dim(0), c = t.dim(1);
    require(!per_channel || weights.dim(0) == c, "contribution_stats: channel count mismatch");
    const float* tp = t.ptr();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t j = 0; j < f; ++j) {
          const double w = per_channel ? wp[ch * f + j] : wp[j];
          samples[j].push_back(std::abs(w * static_cast<double>(tp[(i * c + ch) * f + j])));
        }
  }

  StageWeightStats st;
  st.stage = stage;
  double total = 0.0;
  for (auto& v : samples) {
    FeatureStats fs;
    const double cnt = static_cast<double>(v.size());
    fs.mean = std::accumulate(v.begin(), v.end(), 0.0) / cnt;
    double ss = 0.0;
    for (double x : v) ss += (x - fs.mean) * (x - fs.mean);
    fs.std = std::sqrt(ss / cnt);
    std::sort(v.begin(), v.end());
    fs.q25 = quantile(v, 0.25);
    fs.q50 = quantile(v, 0.50);
    fs.q75 = quantile(v, 0.75);
    total += fs.mean;
    st.features.push_back(fs);
  }
  for (auto& fs : st.features) fs.normalized_mean = total > 0.0 ? fs.mean / total : 0.0;

  const auto rows = weights.numel() / f;
  st.mean_abs_weight.assign(f, 0.0);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < f; ++j) st.mean_abs_weight[j] += std::abs(wp[r * f + j]) / static_cast<double>(rows);
  return st;
}

ScaleWeightStats scale_weight_stats(Network<float>& net, const Dataset& d, int batch_size) {
  auto modules = net.epca_modules();
  if (modules.empty()) throw ArgumentError("model has no EPCA modules; nothing to export");
  require(d.size() > 0, "scale_weight_stats: empty dataset");

  std::vector<std::pair<std::string, EpcaModule<float>*>> chosen;
  for (const auto& name : designated_blocks(net.spec()))
    for (auto& [bn, m] : modules)
      if (bn == name) chosen.emplace_back(bn, m);
  if (chosen.empty()) throw ArgumentError("model has no EPCA modules at the designated blocks");

  std::vector<std::vector<TensorF>> contexts(chosen.size());
  for (auto& [bn, m] : chosen) m->set_capture(true);
  const bool was_training = net.training();
  net.set_training(false);
  {
    NoGradGuard guard;
    for (std::size_t start = 0; start < d.size(); start += batch_size) {
      const std::size_t end = std::min(d.size(), start + static_cast<std::size_t>(batch_size));
      std::vector<std::size_t> idx(end - start);
      std::iota(idx.begin(), idx.end(), start);
      net.forward(stack_batch(d, idx));
      for (std::size_t s = 0; s < chosen.size(); ++s) {
        const auto& ctx = chosen[s].second->captured();
        require(ctx.has_value(), "scale_weight_stats: context was not captured");
        contexts[s].push_back(ctx->values);
      }
    }
  }
  for (auto& [bn, m] : chosen) m->set_capture(false);
  net.set_training(was_training);

  ScaleWeightStats out;
  for (std::size_t s = 0; s < chosen.size(); ++s)
    out.stages.push_back(contribution_stats(chosen[s].first, contexts[s], chosen[s].second->effective_weights()));
  return out;
}

std::string ScaleWeightStats::csv(std::size_t stage) const {
  const auto& st = stages.at(stage);
  std::ostringstream os;
  os << kHeader << "\n";
  for (std::size_t j = 0; j < st.features.size(); ++j) {
    const auto& f = st.features[j];
    os << st.stage << "," << j << "," << fmt(f.mean) << "," << fmt(f.std) << "," << fmt(f.q25) << "," << fmt(f.q50)
       << "," << fmt(f.q75) << "," << fmt(f.normalized_mean) << "\n";
  }
  return os.str();
}

std::string ScaleWeightStats::weights_csv() const {
  std::ostringstream os;
  os << "stage,feature_index,mean_abs_weight\n";
  for (const auto& st : stages)
    for (std::size_t j = 0; j < st.mean_abs_weight.size(); ++j)
      os << st.stage << "," << j << "," << fmt(st.mean_abs_weight[j]) << "\n";
  return os.str();
}

std::vector<std::string> export_scale_weight_stats(Network<float>& net, const Dataset& d, const std::string& out_dir) {
  const ScaleWeightStats stats = scale_weight_stats(net, d);
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> paths;
  for (std::size_t s = 0; s < stats.stages.size(); ++s) {
    const auto p = (std::filesystem::path(out_dir) / ("scale_weights_" + stats.stages[s].stage + ".csv")).string();
    write_text(p, stats.csv(s));
    paths.push_back(p);
  }
  const auto raw = (std::filesystem::path(out_dir) / "scale_weights_raw.csv").string();
  write_text(raw, stats.weights_csv());
  paths.push_back(raw);
  return paths;
}

}  // namespace epca
