#include "epca/attention.hpp"

#include <algorithm>
#include <sstream>

namespace epca {

const char* variant_name(FusionVariant v) {
  switch (v) {
    case FusionVariant::linear:
      return "linear";
    case FusionVariant::dropout:
      return "dropout";
    case FusionVariant::hierarchical:
      return "hierarchical";
    case FusionVariant::parallel:
      return "parallel";
  }
  return "?";
}

FusionVariant parse_variant(const std::string& s) {
  if (s == "linear") return FusionVariant::linear;
  if (s == "dropout") return FusionVariant::dropout;
  if (s == "hierarchical") return FusionVariant::hierarchical;
  if (s == "parallel") return FusionVariant::parallel;
  throw ArgumentError("unknown fusion variant '" + s + "' (linear|dropout|hierarchical|parallel)");
}

const char* head_name(PyramidHead h) {
  switch (h) {
    case PyramidHead::mlp:
      return "mlp";
    case PyramidHead::shared_mlp:
      return "shared_mlp";
    case PyramidHead::cic:
      return "cic";
  }
  return "?";
}

PyramidHead parse_head(const std::string& s) {
  if (s == "mlp") return PyramidHead::mlp;
  if (s == "shared_mlp") return PyramidHead::shared_mlp;
  if (s == "cic") return PyramidHead::cic;
  throw ArgumentError("unknown pyramid head '" + s + "' (mlp|shared_mlp|cic)");
}

int EpcaConfig::feature_count() const {
  int f = 0;
  for (int k : sizes) f += k * k;
  return f;
}

std::vector<int> EpcaConfig::offsets() const {
  std::vector<int> off;
  int acc = 0;
  for (int k : sizes) {
    off.push_back(acc);
    acc += k * k;
  }
  return off;
}

void EpcaConfig::validate() const {
  require(!sizes.empty(), "EPCA grid sizes must be non-empty");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    require(sizes[i] >= 1, "EPCA grid sizes must be >= 1");
    require(i == 0 || sizes[i] > sizes[i - 1], "EPCA grid sizes must be strictly increasing");
  }
  require(dropout_rate >= 0.0 && dropout_rate < 1.0, "EPCA dropout rate must lie in [0, 1)");
  require(bn_eps > 0.0, "EPCA bn_eps must be positive");
}

std::vector<int> parse_sizes(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    require(!item.empty(), "empty entry in size list '" + s + "'");
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      throw ArgumentError("invalid size '" + item + "' in '" + s + "'");
    }
    require(used == item.size(), "invalid size '" + item + "' in '" + s + "'");
    out.push_back(v);
  }
  require(!out.empty(), "empty size list");
  return out;
}

std::string format_sizes(const std::vector<int>& sizes) {
  std::string s;
  for (std::size_t i = 0; i < sizes.size(); ++i) s += (i ? "," : "") + std::to_string(sizes[i]);
  return s;
}

int reduced_width(int channels, int reduction) {
  require(reduction >= 1, "reduction must be >= 1");
  return std::max(1, (channels + reduction - 1) / reduction);
}

template <typename T>
Tensor<T> PyramidContext<T>::scale_slice(std::size_t index) const {
  require(index < sizes.size(), "scale index out of range");
  int off = 0;
  for (std::size_t i = 0; i < index; ++i) off += sizes[i] * sizes[i];
  return slice_last(values, off, sizes[index] * sizes[index]);
}

template <typename T>
std::int64_t FusionParams<T>::scalar_count() const {
  std::int64_t n = w.defined() ? w.numel() : 0;
  for (const auto& t : u) n += t.numel();
  if (v.defined()) n += v.numel();
  return n;
}

template <typename T>
GateNorm<T>::GateNorm(int channels, bool affine, double eps_, double momentum_)
    : state(static_cast<std::size_t>(channels)), eps(eps_), momentum(momentum_) {
  if (affine) {
    gamma = Tensor<T>::ones({channels});
    beta = Tensor<T>::zeros({channels});
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }
}

template <typename T>
PyramidContext<T> pyramid_pool(const Tensor<T>& x, const EpcaConfig& cfg) {
  cfg.validate();
  require_dims(x.rank() == 4, "pyramid_pool expects NCHW input, got " + to_string(x.shape()));
  const auto n = x.dim(0), c = x.dim(1);
  require(cfg.sizes.back() <= std::min(x.dim(2), x.dim(3)),
          "pyramid grid size " + std::to_string(cfg.sizes.back()) + " exceeds spatial extent " +
              std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)));
  std::vector<Tensor<T>> grids;
  for (int k : cfg.sizes) grids.push_back(adaptive_avg_pool(x, k).reshape({n, c, k * k}));
  return {grids.size() == 1 ? grids[0] : concat_last(grids), cfg.sizes};
}

template <typename T>
Tensor<T> scfm_linear(const PyramidContext<T>& t, const Tensor<T>& w) {
  return contract_last(t.values, w);
}

template <typename T>
Tensor<T> scfm_dropout(const PyramidContext<T>& t, const Tensor<T>& w, double rate, bool training, Rng& rng) {
  return contract_last(dropout(t.values, rate, training, rng), w);
}

template <typename T>
Tensor<T> scfm_hierarchical(const PyramidContext<T>& t, const FusionParams<T>& params) {
  require(params.u.size() == t.sizes.size(), "hierarchical fusion needs one encoder per grid size (got " +
                                                 std::to_string(params.u.size()) + " for " +
                                                 std::to_string(t.sizes.size()) + " sizes)");
  require(params.v.defined() && params.v.numel() == static_cast<std::int64_t>(t.sizes.size()),
          "hierarchical fusion needs a combiner with one weight per grid size");
  std::vector<Tensor<T>> encoded;
  for (std::size_t k = 0; k < t.sizes.size(); ++k) encoded.push_back(contract_last(t.scale_slice(k), params.u[k]));
  const auto stacked = encoded.size() == 1 ? encoded[0] : concat_last(encoded);
  return contract_last(stacked, params.v);
}

template <typename T>
AttentionGate<T> mcf(const Tensor<T>& z, GateNorm<T>& norm, bool training) {
  require_dims(z.rank() == 3 && z.dim(2) == 1, "mcf expects [N, C, 1], got " + to_string(z.shape()));
  const Tensor<T>* g = norm.gamma.defined() ? &norm.gamma : nullptr;
  const Tensor<T>* b = norm.beta.defined() ? &norm.beta : nullptr;
  return {sigmoid(batch_norm(z, g, b, norm.state, training, norm.eps, norm.momentum))};
}

template <typename T>
AttentionGate<T> scfm_parallel(const PyramidContext<T>& t, const FusionParams<T>& params,
                               std::vector<GateNorm<T>>& norms, bool training, ParallelCombine combine) {
  const auto n = t.sizes.size();
  require(params.u.size() == n, "parallel fusion needs one encoder per grid size");
  require(norms.size() == n, "parallel fusion needs one BN state per grid size");
  Tensor<T> combined;
  for (std::size_t k = 0; k < n; ++k) {
    auto g = mcf(contract_last(t.scale_slice(k), params.u[k]), norms[k], training).values;
    if (k == 0)
      combined = g;
    else
      combined = combine == ParallelCombine::mean ? add(combined, g) : mul(combined, g);
  }
  if (combine == ParallelCombine::mean && n > 1) combined = scale(combined, 1.0 / static_cast<double>(n));
  return {combined};
}

template <typename T>
Tensor<T> epca_apply(const Tensor<T>& x, const AttentionGate<T>& gate) {
  return channel_scale(x, gate.values);
}

template <typename T>
Tensor<T> table2_variant(const PyramidContext<T>& t, PyramidHead head, const PyramidHeadParams<T>& p) {
  const auto n = t.values.dim(0), c = t.values.dim(1), f = t.values.dim(2);
  auto mlp = [&p](const Tensor<T>& in) {
    return linear(relu(linear(in, p.fc1_w, &p.fc1_b)), p.fc2_w, &p.fc2_b);
  };
  switch (head) {
    case PyramidHead::mlp:
      return mlp(t.values.reshape({n, c * f})).reshape({n, c, 1});
    case PyramidHead::shared_mlp: {
      Tensor<T> acc;
      for (std::int64_t j = 0; j < f; ++j) {
        auto out = mlp(slice_last(t.values, j, 1).reshape({n, c}));
        acc = j == 0 ? out : add(acc, out);
      }
      return acc.reshape({n, c, 1});
    }
    case PyramidHead::cic:
      require(t.sizes.front() == 1, "channel-interaction head needs the 1x1 grid in the pyramid");
      return channel_conv1d(slice_last(t.values, 0, 1), p.kernel);
  }
  throw ArgumentError("unknown pyramid head");
}

template <typename T>
Tensor<T> AttentionModule<T>::forward(const Tensor<T>& x) {
  if (bypass_) return x;
  return epca_apply(x, gate(x));
}

// ---------------------------------------------------------------------------

template <typename T>
EpcaModule<T>::EpcaModule(int channels, EpcaConfig cfg, Rng& rng)
    : channels_(channels), cfg_(std::move(cfg)), rng_(&rng) {
  cfg_.validate();
  require(channels > 0, "EPCA channel count must be positive");
  const int f = cfg_.feature_count();
  const auto n = static_cast<int>(cfg_.sizes.size());
  auto make = [](Shape s, double v) {
    auto t = Tensor<T>::full(std::move(s), static_cast<T>(v));
    t.set_requires_grad(true);
    return t;
  };
  switch (cfg_.variant) {
    case FusionVariant::linear:
    case FusionVariant::dropout:
      params_.w = make(cfg_.per_channel_weights ? Shape{channels, f} : Shape{f}, 1.0 / f);
      norms_.emplace_back(channels, cfg_.bn_affine, cfg_.bn_eps, cfg_.bn_momentum);
      break;
    case FusionVariant::hierarchical:
      for (int k : cfg_.sizes) params_.u.push_back(make({k * k}, 1.0 / (k * k)));
      params_.v = make({n}, 1.0 / n);
      norms_.emplace_back(channels, cfg_.bn_affine, cfg_.bn_eps, cfg_.bn_momentum);
      break;
    case FusionVariant::parallel:
      for (int k : cfg_.sizes) {
        params_.u.push_back(make({k * k}, 1.0 / (k * k)));
        norms_.emplace_back(channels, cfg_.bn_affine, cfg_.bn_eps, cfg_.bn_momentum);
      }
      break;
  }
}

template <typename T>
AttentionGate<T> EpcaModule<T>::gate(const Tensor<T>& x) {
  require_dims(x.rank() == 4 && x.dim(1) == channels_,
               "EPCA expects " + std::to_string(channels_) + " channels, got " + to_string(x.shape()));
  auto ctx = pyramid_pool(x, cfg_);
  if (capture_) captured_ = PyramidContext<T>{ctx.values.detach(), ctx.sizes};
  const bool training = this->training_;
  switch (cfg_.variant) {
    case FusionVariant::linear:
      return mcf(scfm_linear(ctx, params_.w), norms_[0], training);
    case FusionVariant::dropout:
      return mcf(scfm_dropout(ctx, params_.w, cfg_.dropout_rate, training, *rng_), norms_[0], training);
    case FusionVariant::hierarchical:
      return mcf(scfm_hierarchical(ctx, params_), norms_[0], training);
    case FusionVariant::parallel:
      return scfm_parallel(ctx, params_, norms_, training, cfg_.combine);
  }
  throw ArgumentError("unknown fusion variant");
}

template <typename T>
std::string EpcaModule<T>::describe() const {
  return std::string("EPCA(sizes=") + format_sizes(cfg_.sizes) + ", variant=" + variant_name(cfg_.variant) + ")";
}

template <typename T>
Tensor<T> EpcaModule<T>::effective_weights() const {
  switch (cfg_.variant) {
    case FusionVariant::linear:
    case FusionVariant::dropout:
      return params_.w.detach();
    case FusionVariant::hierarchical:
    case FusionVariant::parallel: {
      std::vector<T> out;
      for (std::size_t k = 0; k < params_.u.size(); ++k) {
        const T scale_k = cfg_.variant == FusionVariant::hierarchical ? params_.v.data()[k] : T{1};
        for (T uj : params_.u[k].data()) out.push_back(scale_k * uj);
      }
      const auto f = static_cast<std::int64_t>(out.size());
      return Tensor<T>({f}, std::move(out));
    }
  }
  throw ArgumentError("unknown fusion variant");
}

template <typename T>
void EpcaModule<T>::collect(const std::string& prefix, ParamRole role, Registry<T>& reg) {
  if (params_.w.defined()) reg.params.push_back({prefix + ".w", params_.w, role, false});
  for (std::size_t k = 0; k < params_.u.size(); ++k)
    reg.params.push_back({prefix + ".u" + std::to_string(cfg_.sizes[k]), params_.u[k], role, false});
  if (params_.v.defined()) reg.params.push_back({prefix + ".v", params_.v, role, false});
  for (std::size_t k = 0; k < norms_.size(); ++k) {
    const std::string bn = prefix + (norms_.size() == 1 ? ".bn" : ".bn" + std::to_string(cfg_.sizes[k]));
    if (norms_[k].gamma.defined()) {
      reg.params.push_back({bn + ".weight", norms_[k].gamma, role, false});
      reg.params.push_back({bn + ".bias", norms_[k].beta, role, false});
    }
    reg.buffers.push_back({bn + ".running_mean", &norms_[k].state.running_mean, role});
    reg.buffers.push_back({bn + ".running_var", &norms_[k].state.running_var, role});
  }
}

template <typename T>
Shape EpcaModule<T>::audit(const Shape& in, const std::string& prefix, std::vector<LayerAudit>& rows) const {
  const std::int64_t c = in.at(0), hw = in.at(1) * in.at(2), f = cfg_.feature_count();
  const auto n = static_cast<std::int64_t>(cfg_.sizes.size());
  const auto branches = static_cast<std::int64_t>(norms_.size());
  std::int64_t fusion = 2 * c * f;
  if (cfg_.variant == FusionVariant::hierarchical) fusion += 2 * c * n;
  const std::int64_t bn_params = cfg_.bn_affine ? 2 * c * branches : 0;
  rows.push_back({prefix + ".pool", "pyramid_pool", 0, n * c * hw, {c, f}, true});
  rows.push_back({prefix + ".fusion", "fusion", params_.scalar_count(), fusion, {c, 1}, true});
  rows.push_back({prefix + ".bn", "bn", bn_params, c * branches, {c, 1}, true});
  rows.push_back({prefix + ".sigmoid", "sigmoid", 0, c * branches, {c, 1}, true});
  if (cfg_.variant == FusionVariant::parallel && n > 1)
    rows.push_back({prefix + ".combine", "combine", 0, cfg_.combine == ParallelCombine::mean ? c * n : c * (n - 1),
                    {c, 1}, true});
  rows.push_back({prefix + ".gate", "gate", 0, c * hw, in, true});
  return in;
}

// ---------------------------------------------------------------------------

template <typename T>
SqueezeExcite<T>::SqueezeExcite(int channels, int reduction, Rng& rng)
    : channels_(channels),
      hidden_(reduced_width(channels, reduction)),
      fc1_(channels, hidden_, true, rng),
      fc2_(hidden_, channels, true, rng) {}

template <typename T>
AttentionGate<T> SqueezeExcite<T>::gate(const Tensor<T>& x) {
  require_dims(x.rank() == 4 && x.dim(1) == channels_,
               "SE expects " + std::to_string(channels_) + " channels, got " + to_string(x.shape()));
  auto s = global_avg_pool(x);
  auto e = sigmoid(fc2_.forward(relu(fc1_.forward(s))));
  return {e.reshape({x.dim(0), channels_, 1})};
}

template <typename T>
std::string SqueezeExcite<T>::describe() const {
  return "SE(hidden=" + std::to_string(hidden_) + ")";
}

template <typename T>
void SqueezeExcite<T>::collect(const std::string& prefix, ParamRole role, Registry<T>& reg) {
  fc1_.collect(prefix + ".fc1", role, reg);
  fc2_.collect(prefix + ".fc2", role, reg);
}

template <typename T>
Shape SqueezeExcite<T>::audit(const Shape& in, const std::string& prefix, std::vector<LayerAudit>& rows) const {
  const std::int64_t c = in.at(0), hw = in.at(1) * in.at(2), h = hidden_;
  rows.push_back({prefix + ".squeeze", "global_avg_pool", 0, c * hw, {c}, true});
  rows.push_back({prefix + ".fc1", "linear", c * h + h, 2 * c * h, {h}, true});
  rows.push_back({prefix + ".relu", "relu", 0, h, {h}, true});
  rows.push_back({prefix + ".fc2", "linear", h * c + c, 2 * h * c, {c}, true});
  rows.push_back({prefix + ".sigmoid", "sigmoid", 0, c, {c}, true});
  rows.push_back({prefix + ".gate", "gate", 0, c * hw, in, true});
  return in;
}

// ---------------------------------------------------------------------------

template <typename T>
PyramidHeadModule<T>::PyramidHeadModule(int channels, EpcaConfig cfg, PyramidHead head, int reduction, Rng& rng)
    : channels_(channels),
      hidden_(reduced_width(channels, reduction)),
      cfg_(std::move(cfg)),
      head_(head),
      norm_(channels, cfg_.bn_affine, cfg_.bn_eps, cfg_.bn_momentum) {
  cfg_.validate();
  const int f = cfg_.feature_count();
  auto uniform = [&rng](Shape s, int fan_in) {
    const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
    auto t = Tensor<T>::uniform(std::move(s), -b, b, rng);
    t.set_requires_grad(true);
    return t;
  };
  switch (head_) {
    case PyramidHead::mlp:
    case PyramidHead::shared_mlp: {
      const int in = head_ == PyramidHead::mlp ? channels * f : channels;
      params_.fc1_w = uniform({hidden_, in}, in);
      params_.fc1_b = uniform({hidden_}, in);
      params_.fc2_w = uniform({channels, hidden_}, hidden_);
      params_.fc2_b = uniform({channels}, hidden_);
      break;
    }
    case PyramidHead::cic:
      require(cfg_.sizes.front() == 1, "channel-interaction head needs grid size 1 in the pyramid");
      params_.kernel = uniform({3}, 3);
      break;
  }
}

template <typename T>
AttentionGate<T> PyramidHeadModule<T>::gate(const Tensor<T>& x) {
  require_dims(x.rank() == 4 && x.dim(1) == channels_,
               "pyramid head expects " + std::to_string(channels_) + " channels, got " + to_string(x.shape()));
  return mcf(table2_variant(pyramid_pool(x, cfg_), head_, params_), norm_, this->training_);
}

template <typename T>
std::string PyramidHeadModule<T>::describe() const {
  return std::string("PP+") + head_name(head_) + "(sizes=" + format_sizes(cfg_.sizes) + ")";
}

template <typename T>
void PyramidHeadModule<T>::collect(const std::string& prefix, ParamRole role, Registry<T>& reg) {
  if (head_ == PyramidHead::cic) {
    reg.params.push_back({prefix + ".kernel", params_.kernel, role, true});
  } else {
    reg.params.push_back({prefix + ".fc1.weight", params_.fc1_w, role, true});
    reg.params.push_back({prefix + ".fc1.bias", params_.fc1_b, role, true});
    reg.params.push_back({prefix + ".fc2.weight", params_.fc2_w, role, true});
    reg.params.push_back({prefix + ".fc2.bias", params_.fc2_b, role, true});
  }
  if (norm_.gamma.defined()) {
    reg.params.push_back({prefix + ".bn.weight", norm_.gamma, role, false});
    reg.params.push_back({prefix + ".bn.bias", norm_.beta, role, false});
  }
  reg.buffers.push_back({prefix + ".bn.running_mean", &norm_.state.running_mean, role});
  reg.buffers.push_back({prefix + ".bn.running_var", &norm_.state.running_var, role});
}

template <typename T>
Shape PyramidHeadModule<T>::audit(const Shape& in, const std::string& prefix, std::vector<LayerAudit>& rows) const {
  const std::int64_t c = in.at(0), hw = in.at(1) * in.at(2), f = cfg_.feature_count(), h = hidden_;
  const auto n = static_cast<std::int64_t>(cfg_.sizes.size());
  rows.push_back({prefix + ".pool", "pyramid_pool", 0, n * c * hw, {c, f}, true});
  switch (head_) {
    case PyramidHead::mlp:
      rows.push_back({prefix + ".mlp", "linear", c * f * h + h + h * c + c, 2 * c * f * h + h + 2 * h * c, {c}, true});
      break;
    case PyramidHead::shared_mlp:
      rows.push_back({prefix + ".shared_mlp", "linear", c * h + h + h * c + c, f * (2 * c * h + h + 2 * h * c) + (f - 1) * c,
                      {c}, true});
      break;
    case PyramidHead::cic:
      rows.push_back({prefix + ".cic", "conv1d", 3, 2 * 3 * c, {c}, true});
      break;
  }
  rows.push_back({prefix + ".bn", "bn", cfg_.bn_affine ? 2 * c : 0, c, {c, 1}, true});
  rows.push_back({prefix + ".sigmoid", "sigmoid", 0, c, {c, 1}, true});
  rows.push_back({prefix + ".gate", "gate", 0, c * hw, in, true});
  return in;
}

#define EPCA_INSTANTIATE(T)                                                                                     \
  template struct PyramidContext<T>;                                                                            \
  template struct FusionParams<T>;                                                                              \
  template struct GateNorm<T>;                                                                                  \
  template PyramidContext<T> pyramid_pool(const Tensor<T>&, const EpcaConfig&);                                 \
  template Tensor<T> scfm_linear(const PyramidContext<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scfm_dropout(const PyramidContext<T>&, const Tensor<T>&, double, bool, Rng&);              \
  template Tensor<T> scfm_hierarchical(const PyramidContext<T>&, const FusionParams<T>&);                       \
  template AttentionGate<T> scfm_parallel(const PyramidContext<T>&, const FusionParams<T>&,                     \
                                          std::vector<GateNorm<T>>&, bool, ParallelCombine);                    \
  template AttentionGate<T> mcf(const Tensor<T>&, GateNorm<T>&, bool);                                          \
  template Tensor<T> epca_apply(const Tensor<T>&, const AttentionGate<T>&);                                     \
  template Tensor<T> table2_variant(const PyramidContext<T>&, PyramidHead, const PyramidHeadParams<T>&);        \
  template class AttentionModule<T>;                                                                            \
  template class EpcaModule<T>;                                                                                 \
  template class SqueezeExcite<T>;                                                                              \
  template class PyramidHeadModule<T>;

EPCA_INSTANTIATE(float)
EPCA_INSTANTIATE(double)
#undef EPCA_INSTANTIATE

}  // namespace epca
