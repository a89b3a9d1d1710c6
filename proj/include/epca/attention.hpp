#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "epca/module.hpp"

namespace epca {

enum class FusionVariant { linear, dropout, hierarchical, parallel };
enum class ParallelCombine { mean, product };

/// Channel-dependency heads compared against linear fusion on top of the
/// same pyramid features.
enum class PyramidHead { mlp, shared_mlp, cic };

const char* variant_name(FusionVariant v);
FusionVariant parse_variant(const std::string& s);
const char* head_name(PyramidHead h);
PyramidHead parse_head(const std::string& s);

struct EpcaConfig {
  std::vector<int> sizes{1, 3};
  FusionVariant variant = FusionVariant::linear;
  double dropout_rate = 0.5;
  bool bn_affine = false;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  ParallelCombine combine = ParallelCombine::mean;
  /// Fusion weights of shape [C, F] instead of the shared [F].
  bool per_channel_weights = false;

  /// F = sum of k^2 over the grid sizes.
  int feature_count() const;
  /// Start of each grid's slice on the feature axis.
  std::vector<int> offsets() const;
  void validate() const;
};

std::vector<int> parse_sizes(const std::string& s);
std::string format_sizes(const std::vector<int>& sizes);

/// values: [N, C, F], ascending grid size, row-major within a grid.
template <typename T>
struct PyramidContext {
  Tensor<T> values;
  std::vector<int> sizes;

  Tensor<T> scale_slice(std::size_t index) const;
};

/// values: [N, C, 1], every element in (0, 1).
template <typename T>
struct AttentionGate {
  Tensor<T> values;
};

template <typename T>
struct FusionParams {
  Tensor<T> w;               // linear / dropout: [F] or [C, F]
  std::vector<Tensor<T>> u;  // hierarchical / parallel: one [k^2] encoder per grid size
  Tensor<T> v;               // hierarchical combiner: [n]

  std::int64_t scalar_count() const;
};

/// Per-channel BN state plus optional affine parameters used by the gate.
template <typename T>
struct GateNorm {
  BatchNormState<T> state;
  Tensor<T> gamma;
  Tensor<T> beta;
  double eps = 1e-5;
  double momentum = 0.1;

  GateNorm() = default;
  GateNorm(int channels, bool affine, double eps, double momentum);
};

template <typename T>
PyramidContext<T> pyramid_pool(const Tensor<T>& x, const EpcaConfig& cfg);

template <typename T>
Tensor<T> scfm_linear(const PyramidContext<T>& t, const Tensor<T>& w);

template <typename T>
Tensor<T> scfm_dropout(const PyramidContext<T>& t, const Tensor<T>& w, double rate, bool training, Rng& rng);

/// e_k = sum_j u_k[j] * S_k[.., j], then z = sum_k v[k] * e_k.
template <typename T>
Tensor<T> scfm_hierarchical(const PyramidContext<T>& t, const FusionParams<T>& params);

/// Per branch g_k = sigmoid(BN_k(sum_j u_k[j] * S_k[.., j])), combined by
/// mean (or product). Emits the gate directly.
template <typename T>
AttentionGate<T> scfm_parallel(const PyramidContext<T>& t, const FusionParams<T>& params,
                               std::vector<GateNorm<T>>& norms, bool training,
                               ParallelCombine combine = ParallelCombine::mean);

/// G = sigmoid(BN(z)), BN per channel over the batch axis.
template <typename T>
AttentionGate<T> mcf(const Tensor<T>& z, GateNorm<T>& norm, bool training);

/// Y = X * G broadcast over H, W.
template <typename T>
Tensor<T> epca_apply(const Tensor<T>& x, const AttentionGate<T>& gate);

/// Heads applied to pyramid features in place of fusion. Returns z [N, C, 1].
template <typename T>
struct PyramidHeadParams {
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;  // mlp / shared_mlp
  Tensor<T> kernel;                      // cic
};

template <typename T>
Tensor<T> table2_variant(const PyramidContext<T>& t, PyramidHead head, const PyramidHeadParams<T>& params);

enum class AttentionKind { none, epca, se, pyramid_head };

/// Channel attention inserted into a residual block. A bypassed module is
/// the identity.
template <typename T>
class AttentionModule : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) final;

  /// Gate for x (updates BN running stats in training mode).
  virtual AttentionGate<T> gate(const Tensor<T>& x) = 0;
  virtual AttentionKind kind() const = 0;
  virtual std::string describe() const = 0;

  void set_bypass(bool on) { bypass_ = on; }
  bool bypass() const { return bypass_; }

 private:
  bool bypass_ = false;
};

template <typename T>
class EpcaModule : public AttentionModule<T> {
 public:
  EpcaModule(int channels, EpcaConfig cfg, Rng& rng);

  AttentionGate<T> gate(const Tensor<T>& x) override;
  AttentionKind kind() const override { return AttentionKind::epca; }
  std::string describe() const override;
  void collect(const std::string& prefix, ParamRole role, Registry<T>& reg) override;
  Shape audit(const Shape& in, const std::string& prefix, std::vector<LayerAudit>& rows) const override;

  const EpcaConfig& config() const { return cfg_; }
  FusionParams<T>& params() { return params_; }
  const FusionParams<T>& params() const { return params_; }
  std::vector<GateNorm<T>>& norms() { return norms_; }

  /// Per-feature weights after folding the fusion structure: w for
  /// linear/dropout ([F] or [C, F]), v_k * u_k for hierarchical, u_k for
  /// parallel. Shape [F] or [C, F].
  Tensor<T> effective_weights() const;

  /// When enabled, the pyramid context of the latest forward is retained.
  void set_capture(bool on) { capture_ = on; }
  const std::optional<PyramidContext<T>>& captured() const { return captured_; }

 private:
  int channels_;
  EpcaConfig cfg_;
  Rng* rng_;
  FusionParams<T> params_;
  std::vector<GateNorm<T>> norms_;
  bool capture_ = false;
  std::optional<PyramidContext<T>> captured_;
};

/// Squeeze-and-excitation: GAP -> FC(C -> ceil(C/r)) -> relu -> FC -> sigmoid.
template <typename T>
class SqueezeExcite : public AttentionModule<T> {
 public:
  SqueezeExcite(int channels, int reduction, Rng& rng);

  AttentionGate<T> gate(const Tensor<T>& x) override;
  AttentionKind kind() const override { return AttentionKind::se; }
  std::string describe() const override;
  void collect(const std::string& prefix, ParamRole role, Registry<T>& reg) override;
  Shape audit(const Shape& in, const std::string& prefix, std::vector<LayerAudit>& rows) const override;

  Linear<T>& fc1() { return fc1_; }
  Linear<T>& fc2() { return fc2_; }

 private:
  int channels_, hidden_;
  Linear<T> fc1_, fc2_;
};

/// Pyramid pooling followed by an MLP, shared MLP or channel-interaction
/// head, then BN + sigmoid.
template <typename T>
class PyramidHeadModule : public AttentionModule<T> {
 public:
  PyramidHeadModule(int channels, EpcaConfig cfg, PyramidHead head, int reduction, Rng& rng);

  AttentionGate<T> gate(const Tensor<T>& x) override;
  AttentionKind kind() const override { return AttentionKind::pyramid_head; }
  std::string describe() const override;
  void collect(const std::string& prefix, ParamRole role, Registry<T>& reg) override;
  Shape audit(const Shape& in, const std::string& prefix, std::vector<LayerAudit>& rows) const override;

  PyramidHead head() const { return head_; }
  PyramidHeadParams<T>& params() { return params_; }

 private:
  int channels_, hidden_;
  EpcaConfig cfg_;
  PyramidHead head_;
  PyramidHeadParams<T> params_;
  GateNorm<T> norm_;
};

/// Hidden width of the reduction MLPs: ceil(C / r), at least 1.
int reduced_width(int channels, int reduction);

}  // namespace epca
