#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "epca/data.hpp"
#include "epca/network.hpp"

namespace epca {

enum class Paradigm { traditional_finetune, pretrain_freeze };

Paradigm parse_paradigm(const std::string& s);
const char* paradigm_name(Paradigm p);

struct SchedulerConfig {
  int t0 = 10;
  int t_mult = 2;
  double eta_min = 0.0;
};

struct AugmentConfig {
  bool enabled = true;
  bool hflip = true;
  double rotation_deg = 10.0;
};

struct TrainConfig {
  double lr_max = 0.0015;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  /// BN parameters and fusion weights skip weight decay.
  bool decay_exempt = true;
  int batch_size = 32;
  int epochs = 100;
  SchedulerConfig scheduler;
  Paradigm paradigm = Paradigm::traditional_finetune;
  AugmentConfig augment;
  std::uint64_t seed = 0;
  /// Held-out share when no validation set is given.
  double val_fraction = 0.2;
  /// Stop once the epoch's training accuracy reaches this value.
  std::optional<double> stop_at_train_acc;
  /// history.csv and last.epck go here when non-empty.
  std::string out_dir;

  void validate() const;
};

/// eta_min + (lr_max - eta_min) * (1 + cos(pi * T_cur / T_i)) / 2 with
/// periods T0, T0*Tmult, ...
double cosine_warm_restart_lr(double epoch, double lr_max, const SchedulerConfig& s);
inline double cosine_warm_restart_lr(double epoch, const TrainConfig& cfg) {
  return cosine_warm_restart_lr(epoch, cfg.lr_max, cfg.scheduler);
}

template <typename T>
struct SgdState {
  std::vector<std::vector<T>> velocity;
};

/// v <- momentum * v + (g + wd * p); p <- p - lr * v. Parameters without a
/// gradient or with requires_grad off are skipped. A non-finite gradient
/// aborts the whole step before anything is modified.
template <typename T>
void sgd_step(std::vector<ParamEntry<T>>& params, SgdState<T>& state, double lr, double momentum,
              double weight_decay, bool decay_exempt = true);

/// Horizontal flip with probability 1/2, then rotation by an angle uniform
/// in [-deg, deg] (bilinear, zero fill).
TensorF augment(const TensorF& image, Rng& rng, const AugmentConfig& cfg);
TensorF hflip(const TensorF& image);
/// Counter-clockwise rotation about the image center.
TensorF rotate(const TensorF& image, double degrees);

struct Predictions {
  std::vector<int> labels;
  std::vector<double> probs;  // N x K row-major
  int num_classes = 0;
};

/// Eval-mode forward without gradient recording.
Predictions predict(Network<float>& net, const Dataset& d, int batch_size = 64);

struct EpochRecord {
  int epoch;
  double lr, train_loss, train_acc, val_acc, val_f1, val_kappa;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  bool stopped_early = false;
};

inline constexpr const char* kHistoryHeader = "epoch,lr,train_loss,train_acc,val_acc,val_f1,val_kappa";
std::string format_history_row(const EpochRecord& r);

/// Sets the trainable subset for the paradigm: everything, or only
/// adapter + head with backbone BN statistics frozen.
void apply_paradigm(Network<float>& net, Paradigm p);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Without `val`, a seeded val_fraction split of `train` is held out.
TrainResult train(Network<float>& net, const Dataset& train, const Dataset* val, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

}  // namespace epca
