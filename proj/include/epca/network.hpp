#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "epca/attention.hpp"
#include "epca/module.hpp"

namespace epca {

enum class BlockKind { basic, bottleneck };

struct StageSpec {
  int channels;  // bottleneck: inner width, output is 4x
  int blocks;
  int stride;
};

struct AttentionSpec {
  AttentionKind kind = AttentionKind::none;
  EpcaConfig epca;
  int reduction = 16;
  PyramidHead head = PyramidHead::mlp;

  std::string describe() const;
};

AttentionKind parse_attention_kind(const std::string& s);
const char* attention_kind_name(AttentionKind k);

struct ArchSpec {
  std::string name = "mini-resnet20";
  int stem_channels = 16;
  int stem_kernel = 3;
  int stem_stride = 1;
  bool stem_pool = false;
  std::vector<StageSpec> stages;
  BlockKind block = BlockKind::basic;
  AttentionSpec attention;
  int num_classes = 3;
  Shape input{3, 32, 32};  // C, H, W

  void validate() const;
  int expansion() const { return block == BlockKind::bottleneck ? 4 : 1; }
};

/// Named presets: "mini-resnet20" and "resnet50-shape".
ArchSpec preset(const std::string& name);

/// conv-BN-relu -> conv-BN -> attention -> + skip -> relu (basic), or the
/// three-conv bottleneck with stride on the 3x3 conv.
template <typename T>
class ResidualBlock : public Module<T> {
 public:
  ResidualBlock(BlockKind kind, int in_channels, int width, int stride, const AttentionSpec& attention, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) override;
  void collect(const std::string& prefix, ParamRole role, Registry<T>& reg) override;
  Shape audit(const Shape& in, const std::string& prefix, std::vector<LayerAudit>& rows) const override;
  void set_training(bool on) override;

  AttentionModule<T>* attention() { return attention_.get(); }
  std::vector<BatchNorm<T>*> batch_norms();

 private:
  BlockKind kind_;
  std::vector<std::unique_ptr<Conv2d<T>>> convs_;
  std::vector<std::unique_ptr<BatchNorm<T>>> bns_;
  std::unique_ptr<Conv2d<T>> down_conv_;
  std::unique_ptr<BatchNorm<T>> down_bn_;
  std::unique_ptr<AttentionModule<T>> attention_;
};

struct ModelSummary {
  std::int64_t param_count = 0;
  std::int64_t flops = 0;
  std::int64_t attention_params = 0;
  std::int64_t attention_flops = 0;
  std::vector<LayerAudit> layers;

  std::int64_t backbone_params() const { return param_count - attention_params; }
  std::int64_t backbone_flops() const { return flops - attention_flops; }
  std::string table() const;
};

/// Stem -> residual stages -> global average pool -> linear. Logits only;
/// softmax lives in the loss and in evaluation.
template <typename T>
class Network {
 public:
  Network(ArchSpec spec, std::uint64_t seed);

  Tensor<T> forward(const Tensor<T>& x);

  /// Layer names in forward order: "stem", "stage<s>.block<b>". A stage name
  /// "stage<s>" aliases its last block.
  std::vector<std::string> layer_names() const;
  std::size_t layer_index(const std::string& name) const;
  /// Activation after the named layer.
  Tensor<T> forward_until(const Tensor<T>& x, const std::string& layer);
  /// Logits from an activation produced by the named layer.
  Tensor<T> forward_after(const Tensor<T>& activation, const std::string& layer);

  Registry<T> registry();
  std::int64_t count_params();
  ModelSummary summary() const;

  void set_training(bool on);
  bool training() const { return training_; }
  /// Backbone BN layers normalize with running statistics.
  void freeze_backbone_stats(bool on);
  void set_attention_bypass(bool on);
  void zero_head();

  /// EPCA modules keyed by block name.
  std::vector<std::pair<std::string, EpcaModule<T>*>> epca_modules();
  const ArchSpec& spec() const { return spec_; }
  Rng& rng() { return rng_; }

 private:
  Tensor<T> run_stem(const Tensor<T>& x);
  Tensor<T> run_head(const Tensor<T>& x);

  ArchSpec spec_;
  Rng rng_;
  bool training_ = true;
  std::unique_ptr<Conv2d<T>> stem_conv_;
  std::unique_ptr<BatchNorm<T>> stem_bn_;
  std::vector<std::string> block_names_;
  std::vector<std::unique_ptr<ResidualBlock<T>>> blocks_;
  std::unique_ptr<Linear<T>> fc_;
};

/// Parameter count of a single tensor list (BN running stats excluded).
template <typename T>
std::int64_t count_params(const Registry<T>& reg);

/// Totals at the architecture's input size; 1 MAC = 2 FLOPs.
template <typename T>
ModelSummary count_flops(const Network<T>& net);

enum class LoadMode { full, backbone_only };

struct LoadReport {
  std::size_t restored = 0;
  std::vector<std::string> skipped;
};

/// EPCK: "EPCK", u32 version, u32 count, then per entry: u32 name length,
/// name bytes, u8 dtype, u32 rank, i64 dims, little-endian payload.
template <typename T>
void save_checkpoint(Network<T>& net, const std::string& path);

template <typename T>
LoadReport load_checkpoint(Network<T>& net, const std::string& path, LoadMode mode = LoadMode::full);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace epca
