#include "epca/network.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

namespace epca {

AttentionKind parse_attention_kind(const std::string& s) {
  if (s == "none") return AttentionKind::none;
  if (s == "epca") return AttentionKind::epca;
  if (s == "se") return AttentionKind::se;
  if (s == "pyramid_head") return AttentionKind::pyramid_head;
  throw ArgumentError("unknown attention kind '" + s + "' (none|epca|se|pyramid_head)");
}

const char* attention_kind_name(AttentionKind k) {
  switch (k) {
    case AttentionKind::none:
      return "none";
    case AttentionKind::epca:
      return "epca";
    case AttentionKind::se:
      return "se";
    case AttentionKind::pyramid_head:
      return "pyramid_head";
  }
  return "?";
}

std::string AttentionSpec::describe() const {
  switch (kind) {
    case AttentionKind::none:
      return "none";
    case AttentionKind::epca:
      return std::string("epca[") + format_sizes(epca.sizes) + "," + variant_name(epca.variant) + "]";
    case AttentionKind::se:
      return "se[r=" + std::to_string(reduction) + "]";
    case AttentionKind::pyramid_head:
      return std::string("pp+") + head_name(head) + "[" + format_sizes(epca.sizes) + "]";
  }
  return "?";
}

void ArchSpec::validate() const {
  require(!stages.empty(), "architecture needs at least one stage");
  require(stem_channels > 0 && stem_kernel > 0 && stem_stride > 0, "invalid stem");
  int prev = 0;
  for (const auto& s : stages) {
    require(s.channels > 0 && s.blocks > 0 && s.stride > 0, "stage channels, blocks and stride must be positive");
    require(s.channels >= prev, "stage channel counts must be non-decreasing");
    prev = s.channels;
  }
  require(num_classes >= 2, "num_classes must be >= 2");
  require(input.size() == 3 && input[0] > 0 && input[1] > 0 && input[2] > 0, "input size must be C,H,W > 0");
  if (attention.kind != AttentionKind::none) attention.epca.validate();
}

ArchSpec preset(const std::string& name) {
  ArchSpec s;
  s.name = name;
  if (name == "mini-resnet20") {
    s.stages = {{16, 3, 1}, {32, 3, 2}, {64, 3, 2}};
    return s;
  }
  if (name == "resnet50-shape") {
    s.stem_channels = 64;
    s.stem_kernel = 7;
    s.stem_stride = 2;
    s.stem_pool = true;
    s.block = BlockKind::bottleneck;
    s.stages = {{64, 3, 1}, {128, 4, 2}, {256, 6, 2}, {512, 3, 2}};
    s.input = {3, 224, 224};
    return s;
  }
  throw ArgumentError("unknown architecture preset '" + name + "' (mini-resnet20|resnet50-shape)");
}

namespace {

template <typename T>
std::unique_ptr<AttentionModule<T>> make_attention(const AttentionSpec& a, int channels, Rng& rng) {
  switch (a.kind) {
    case AttentionKind::none:
      return nullptr;
    case AttentionKind::epca:
      return std::make_unique<EpcaModule<T>>(channels, a.epca, rng);
    case AttentionKind::se:
      return std::make_unique<SqueezeExcite<T>>(channels, a.reduction, rng);
    case AttentionKind::pyramid_head:
      return std::make_unique<PyramidHeadModule<T>>(channels, a.epca, a.head, a.reduction, rng);
  }
  return nullptr;
}

}  // namespace

template <typename T>
ResidualBlock<T>::ResidualBlock(BlockKind kind, int in_channels, int width, int stride, const AttentionSpec& attention,
                                Rng& rng)
    : kind_(kind) {
  const int out = kind == BlockKind::bottleneck ? 4 * width : width;
  if (kind == BlockKind::basic) {
    convs_.push_back(std::make_unique<Conv2d<T>>(in_channels, width, 3, stride, 1, false, rng));
    convs_.push_back(std::make_unique<Conv2d<T>>(width, width, 3, 1, 1, false, rng));
  } else {
    convs_.push_back(std::make_unique<Conv2d<T>>(in_channels, width, 1, 1, 0, false, rng));
    convs_.push_back(std::make_unique<Conv2d<T>>(width, width, 3, stride, 1, false, rng));
    convs_.push_back(std::make_unique<Conv2d<T>>(width, out, 1, 1, 0, false, rng));
  }
  for (std::size_t i = 0; i < convs_.size(); ++i)
    bns_.push_back(std::make_unique<BatchNorm<T>>(i + 1 == convs_.size() ? out : width));
  if (stride != 1 || in_channels != out) {
    down_conv_ = std::make_unique<Conv2d<T>>(in_channels, out, 1, stride, 0, false, rng);
    down_bn_ = std::make_unique<BatchNorm<T>>(out);
  }
  attention_ = make_attention<T>(attention, out, rng);
}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x) {
  Tensor<T> h = x;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    h = bns_[i]->forward(convs_[i]->forward(h));
    if (i + 1 < convs_.size()) h = relu(h);
  }
  if (attention_) h = attention_->forward(h);
  const auto skip = down_conv_ ? down_bn_->forward(down_conv_->forward(x)) : x;
  return relu(add(h, skip));
}

template <typename T>
void ResidualBlock<T>::collect(const std::string& prefix, ParamRole role, Registry<T>& reg) {
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    convs_[i]->collect(prefix + ".conv" + std::to_string(i + 1), role, reg);
    bns_[i]->collect(prefix + ".bn" + std::to_string(i + 1), role, reg);
  }
  if (down_conv_) {
    down_conv_->collect(prefix + ".down.conv", role, reg);
    down_bn_->collect(prefix + ".down.bn", role, reg);
  }
  if (attention_) attention_->collect(prefix + ".attn", ParamRole::adapter, reg);
}

template <typename T>
Shape ResidualBlock<T>::audit(const Shape& in, const std::string& prefix, std::vector<LayerAudit>& rows) const {
  Shape h = in;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    h = convs_[i]->audit(h, prefix + ".conv" + std::to_string(i + 1), rows);
    h = bns_[i]->audit(h, prefix + ".bn" + std::to_string(i + 1), rows);
    if (i + 1 < convs_.size()) rows.push_back({prefix + ".relu" + std::to_string(i + 1), "relu", 0, numel_of(h), h, false});
  }
  if (attention_) h = attention_->audit(h, prefix + ".attn", rows);
  if (down_conv_) {
    auto s = down_conv_->audit(in, prefix + ".down.conv", rows);
    down_bn_->audit(s, prefix + ".down.bn", rows);
  }
  rows.push_back({prefix + ".add", "add", 0, numel_of(h), h, false});
  rows.push_back({prefix + ".relu", "relu", 0, numel_of(h), h, false});
  return h;
}

template <typename T>
void ResidualBlock<T>::set_training(bool on) {
  Module<T>::set_training(on);
  for (auto& b : bns_) b->set_training(on);
  if (down_bn_) down_bn_->set_training(on);
  if (attention_) attention_->set_training(on);
}

template <typename T>
std::vector<BatchNorm<T>*> ResidualBlock<T>::batch_norms() {
  std::vector<BatchNorm<T>*> out;
  for (auto& b : bns_) out.push_back(b.get());
  if (down_bn_) out.push_back(down_bn_.get());
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
Network<T>::Network(ArchSpec spec, std::uint64_t seed) : spec_(std::move(spec)), rng_(seed) {
  spec_.validate();
  const int cin = static_cast<int>(spec_.input[0]);
  stem_conv_ = std::make_unique<Conv2d<T>>(cin, spec_.stem_channels, spec_.stem_kernel, spec_.stem_stride,
                                           spec_.stem_kernel / 2, false, rng_);
  stem_bn_ = std::make_unique<BatchNorm<T>>(spec_.stem_channels);
  int channels = spec_.stem_channels;
  for (std::size_t s = 0; s < spec_.stages.size(); ++s) {
    const auto& st = spec_.stages[s];
    for (int b = 0; b < st.blocks; ++b) {
      blocks_.push_back(std::make_unique<ResidualBlock<T>>(spec_.block, channels, st.channels, b == 0 ? st.stride : 1,
                                                           spec_.attention, rng_));
      block_names_.push_back("stage" + std::to_string(s + 1) + ".block" + std::to_string(b));
      channels = st.channels * spec_.expansion();
    }
  }
  fc_ = std::make_unique<Linear<T>>(channels, spec_.num_classes, true, rng_);
}

template <typename T>
Tensor<T> Network<T>::run_stem(const Tensor<T>& x) {
  require_dims(x.rank() == 4 && x.dim(1) == spec_.input[0],
               "network expects [N, " + std::to_string(spec_.input[0]) + ", H, W] input, got " + to_string(x.shape()));
  auto h = relu(stem_bn_->forward(stem_conv_->forward(x)));
  if (spec_.stem_pool) h = max_pool2d(h, 3, 2, 1);
  return h;
}

template <typename T>
Tensor<T> Network<T>::run_head(const Tensor<T>& x) {
  return fc_->forward(global_avg_pool(x));
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& x) {
  auto h = run_stem(x);
  for (auto& b : blocks_) h = b->forward(h);
  return run_head(h);
}

template <typename T>
std::vector<std::string> Network<T>::layer_names() const {
  std::vector<std::string> names{"stem"};
  names.insert(names.end(), block_names_.begin(), block_names_.end());
  return names;
}

template <typename T>
std::size_t Network<T>::layer_index(const std::string& name) const {
  if (name == "stem") return 0;
  for (std::size_t i = 0; i < block_names_.size(); ++i)
    if (block_names_[i] == name) return i + 1;
  // "stage<s>" is its last block
  std::size_t found = 0;
  for (std::size_t i = 0; i < block_names_.size(); ++i)
    if (block_names_[i].rfind(name + ".", 0) == 0) found = i + 1;
  if (found) return found;
  std::string known;
  for (const auto& n : layer_names()) known += (known.empty() ? "" : ", ") + n;
  throw ArgumentError("unknown layer '" + name + "' (known: " + known + ")");
}

template <typename T>
Tensor<T> Network<T>::forward_until(const Tensor<T>& x, const std::string& layer) {
  const auto idx = layer_index(layer);
  auto h = run_stem(x);
  for (std::size_t i = 0; i < idx; ++i) h = blocks_[i]->forward(h);
  return h;
}

template <typename T>
Tensor<T> Network<T>::forward_after(const Tensor<T>& activation, const std::string& layer) {
  const auto idx = layer_index(layer);
  auto h = activation;
  for (std::size_t i = idx; i < blocks_.size(); ++i) h = blocks_[i]->forward(h);
  return run_head(h);
}

template <typename T>
Registry<T> Network<T>::registry() {
  Registry<T> reg;
  stem_conv_->collect("stem.conv", ParamRole::backbone, reg);
  stem_bn_->collect("stem.bn", ParamRole::backbone, reg);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i]->collect(block_names_[i], ParamRole::backbone, reg);
  fc_->collect("fc", ParamRole::head, reg);
  return reg;
}

template <typename T>
std::int64_t count_params(const Registry<T>& reg) {
  std::int64_t n = 0;
  for (const auto& p : reg.params) n += p.tensor.numel();
  return n;
}

template <typename T>
std::int64_t Network<T>::count_params() {
  return epca::count_params(registry());
}

template <typename T>
ModelSummary Network<T>::summary() const {
  ModelSummary s;
  Shape h = stem_conv_->audit(spec_.input, "stem.conv", s.layers);
  h = stem_bn_->audit(h, "stem.bn", s.layers);
  s.layers.push_back({"stem.relu", "relu", 0, numel_of(h), h, false});
  if (spec_.stem_pool) {
    h = {h[0], (h[1] + 2 - 3) / 2 + 1, (h[2] + 2 - 3) / 2 + 1};
    s.layers.push_back({"stem.pool", "max_pool", 0, numel_of(h), h, false});
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i) h = blocks_[i]->audit(h, block_names_[i], s.layers);
  s.layers.push_back({"gap", "global_avg_pool", 0, h[0], {h[0]}, false});
  fc_->audit({h[0]}, "fc", s.layers);
  for (const auto& r : s.layers) {
    s.param_count += r.params;
    s.flops += r.flops;
    if (r.attention) {
      s.attention_params += r.params;
      s.attention_flops += r.flops;
    }
  }
  return s;
}

template <typename T>
ModelSummary count_flops(const Network<T>& net) {
  return net.summary();
}

std::string ModelSummary::table() const {
  std::ostringstream os;
  os << std::left << std::setw(34) << "layer" << std::setw(16) << "kind" << std::right << std::setw(12) << "params"
     << std::setw(16) << "flops" << "  output\n";
  for (const auto& r : layers)
    os << std::left << std::setw(34) << r.name << std::setw(16) << r.kind << std::right << std::setw(12) << r.params
       << std::setw(16) << r.flops << "  " << to_string(r.output) << (r.attention ? "  *" : "") << "\n";
  const double pct_p = backbone_params() ? 100.0 * attention_params / backbone_params() : 0.0;
  const double pct_f = backbone_flops() ? 100.0 * attention_flops / backbone_flops() : 0.0;
  os << "total params      " << param_count << "\n"
     << "total FLOPs       " << flops << "  (1 MAC = 2 FLOPs)\n"
     << "attention params  " << attention_params << "  (" << std::setprecision(4) << pct_p << "% of backbone)\n"
     << "attention FLOPs   " << attention_flops << "  (" << std::setprecision(4) << pct_f << "% of backbone)\n";
  return os.str();
}

template <typename T>
void Network<T>::set_training(bool on) {
  training_ = on;
  stem_bn_->set_training(on);
  for (auto& b : blocks_) b->set_training(on);
}

template <typename T>
void Network<T>::freeze_backbone_stats(bool on) {
  stem_bn_->freeze_stats(on);
  for (auto& b : blocks_)
    for (auto* bn : b->batch_norms()) bn->freeze_stats(on);
}

template <typename T>
void Network<T>::set_attention_bypass(bool on) {
  for (auto& b : blocks_)
    if (b->attention()) b->attention()->set_bypass(on);
}

template <typename T>
void Network<T>::zero_head() {
  for (auto& v : fc_->weight().data()) v = T{0};
  for (auto& v : fc_->bias().data()) v = T{0};
}

template <typename T>
std::vector<std::pair<std::string, EpcaModule<T>*>> Network<T>::epca_modules() {
  std::vector<std::pair<std::string, EpcaModule<T>*>> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    if (auto* m = dynamic_cast<EpcaModule<T>*>(blocks_[i]->attention())) out.emplace_back(block_names_[i], m);
  return out;
}

template class ResidualBlock<float>;
template class ResidualBlock<double>;
template class Network<float>;
template class Network<double>;
template std::int64_t count_params(const Registry<float>&);
template std::int64_t count_params(const Registry<double>&);
template ModelSummary count_flops(const Network<float>&);
template ModelSummary count_flops(const Network<double>&);

}  // namespace epca
