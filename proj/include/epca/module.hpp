#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "epca/ops.hpp"
#include "epca/tensor.hpp"

namespace epca {

/// Which part of a network a tensor belongs to. Under frozen-backbone
/// finetuning only adapter and head tensors are trained.
enum class ParamRole { backbone, adapter, head };

const char* role_name(ParamRole role);

template <typename T>
struct ParamEntry {
  std::string name;
  Tensor<T> tensor;
  ParamRole role;
  bool decay;  // weight decay applies unless exempted (BN affine, fusion weights)
};

template <typename T>
struct BufferEntry {
  std::string name;
  std::vector<T>* values;
  ParamRole role;
};

template <typename T>
struct Registry {
  std::vector<ParamEntry<T>> params;
  std::vector<BufferEntry<T>> buffers;
};

/// One row of a parameter/FLOP audit. FLOPs are for a single image with
/// 1 multiply-accumulate = 2 FLOPs.
struct LayerAudit {
  std::string name;
  std::string kind;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  Shape output;
  bool attention = false;
};

template <typename T>
class Module {
 public:
  virtual ~Module() = default;

  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
  virtual void collect(const std::string& prefix, ParamRole role, Registry<T>& reg) = 0;
  /// Propagates a per-image [C, H, W] shape and appends audit rows.
  virtual Shape audit(const Shape& in, const std::string& prefix, std::vector<LayerAudit>& rows) const = 0;

  virtual void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

 protected:
  bool training_ = true;
};

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, bool bias, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) override;
  void collect(const std::string& prefix, ParamRole role, Registry<T>& reg) override;
  Shape audit(const Shape& in, const std::string& prefix, std::vector<LayerAudit>& rows) const override;

  Tensor<T>& weight() { return weight_; }

 private:
  int stride_, padding_;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <typename T>
class BatchNorm : public Module<T> {
 public:
  explicit BatchNorm(int channels, bool affine = true, double eps = 1e-5, double momentum = 0.1);

  Tensor<T> forward(const Tensor<T>& x) override;
  void collect(const std::string& prefix, ParamRole role, Registry<T>& reg) override;
  Shape audit(const Shape& in, const std::string& prefix, std::vector<LayerAudit>& rows) const override;

  /// Frozen layers normalize with running statistics even in training mode.
  void freeze_stats(bool on) { frozen_ = on; }
  BatchNormState<T>& state() { return state_; }
  Tensor<T>& gamma() { return gamma_; }

 private:
  bool affine_;
  double eps_, momentum_;
  bool frozen_ = false;
  Tensor<T> gamma_, beta_;
  BatchNormState<T> state_;
};

template <typename T>
class Linear : public Module<T> {
 public:
  Linear(int in_features, int out_features, bool bias, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) override;
  void collect(const std::string& prefix, ParamRole role, Registry<T>& reg) override;
  Shape audit(const Shape& in, const std::string& prefix, std::vector<LayerAudit>& rows) const override;

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
};

}  // namespace epca
