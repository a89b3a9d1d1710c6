#pragma once

#include <functional>
#include <string>
#include <vector>

#include "epca/data.hpp"
#include "epca/network.hpp"

namespace epca {

/// Row-major [height, width] map with values in [0, 1].
struct Heatmap {
  std::vector<double> values;
  int height = 0;
  int width = 0;
  std::string layer;
  int target_class = 0;

  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  TensorF to_image() const;  // [1, H, W]
  std::string csv() const;
};

/// Min-max normalization; an all-zero map stays zero and a constant
/// positive map becomes all ones.
std::vector<double> normalize_heatmap(std::vector<double> values);

/// relu(sum_k alpha_k A_k) with alpha_k the spatial mean of grad_k, at the
/// activation's resolution (unnormalized). activation and grad: [K, h, w]
/// or [1, K, h, w].
std::vector<double> grad_cam_raw(const TensorD& activation, const TensorD& grad);

/// Raw map upsampled bilinearly to out_h x out_w, then normalized.
Heatmap grad_cam_from(const TensorD& activation, const TensorD& grad, int out_h, int out_w);

/// Gradients of score(activation) with respect to the activation feed the
/// map. score must return a scalar.
Heatmap grad_cam_fn(const TensorD& activation, const std::function<TensorD(const TensorD&)>& score, int out_h,
                    int out_w);

/// Grad-CAM for one [C, H, W] image at the named layer, in eval mode.
Heatmap grad_cam(Network<float>& net, const TensorF& image, int target_class, const std::string& layer);

/// 8-bit binary PGM.
void write_heatmap_pgm(const std::string& path, const Heatmap& map);

struct FeatureStats {
  double mean = 0, std = 0, q25 = 0, q50 = 0, q75 = 0, normalized_mean = 0;
};

/// Per-feature distribution of |w_f * T_f| over every (sample, channel)
/// pair, with w the effective fusion weight of the module.
struct StageWeightStats {
  std::string stage;
  std::vector<FeatureStats> features;
  std::vector<double> mean_abs_weight;  // |w_f| averaged over channels
};

struct ScaleWeightStats {
  std::vector<StageWeightStats> stages;

  inline static const char* kHeader = "stage,feature_index,mean,std,q25,q50,q75,normalized_mean";
  std::string csv(std::size_t stage) const;
  std::string weights_csv() const;
};

/// Low / middle / high blocks: first block of the first stage, middle block
/// of the middle stage, last block of the last stage.
std::vector<std::string> designated_blocks(const ArchSpec& spec);

/// Statistics over contexts [N, C, F] weighted by [F] or [C, F] weights.
StageWeightStats contribution_stats(const std::string& stage, const std::vector<TensorF>& contexts,
                                    const TensorF& weights);

ScaleWeightStats scale_weight_stats(Network<float>& net, const Dataset& d, int batch_size = 64);

/// Writes scale_weights_<stage>.csv per stage and scale_weights_raw.csv;
/// returns the paths written.
std::vector<std::string> export_scale_weight_stats(Network<float>& net, const Dataset& d, const std::string& out_dir);

}  // namespace epca
