#include "epca/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>

#include "epca/metrics.hpp"
#include "epca/ops.hpp"

namespace epca {

Paradigm parse_paradigm(const std::string& s) {
  if (s == "traditional_finetune" || s == "finetune") return Paradigm::traditional_finetune;
  if (s == "pretrain_freeze" || s == "freeze") return Paradigm::pretrain_freeze;
  throw ArgumentError("unknown paradigm '" + s + "' (expected traditional_finetune|pretrain_freeze)");
}

const char* paradigm_name(Paradigm p) {
  return p == Paradigm::pretrain_freeze ? "pretrain_freeze" : "traditional_finetune";
}

void TrainConfig::validate() const {
  // lr_max = eta_min = 0 is allowed as a null run
  require(scheduler.eta_min >= 0.0 && (lr_max > scheduler.eta_min || lr_max == 0.0), "train: need lr_max > eta_min >= 0");
  require(scheduler.t0 >= 1, "train: T0 must be >= 1");
  require(scheduler.t_mult >= 1, "train: Tmult must be >= 1");
  require(momentum >= 0.0 && momentum < 1.0, "train: momentum must be in [0, 1)");
  require(weight_decay >= 0.0, "train: weight_decay must be >= 0");
  require(batch_size >= 1, "train: batch_size must be >= 1");
  require(epochs >= 1, "train: epochs must be >= 1");
  require(val_fraction >= 0.0 && val_fraction < 1.0, "train: val_fraction must be in [0, 1)");
  require(augment.rotation_deg >= 0.0, "train: rotation_deg must be >= 0");
}

double cosine_warm_restart_lr(double epoch, double lr_max, const SchedulerConfig& s) {
  require(epoch >= 0.0, "cosine_warm_restart_lr: epoch must be >= 0");
  double t_cur = epoch;
  double t_i = s.t0;
  if (s.t_mult == 1) {
    t_cur = std::fmod(epoch, t_i);
  } else {
    while (t_cur >= t_i) {
      t_cur -= t_i;
      t_i *= s.t_mult;
    }
  }
  return s.eta_min + 0.5 * (lr_max - s.eta_min) * (1.0 + std::cos(std::numbers::pi * t_cur / t_i));
}

template <typename T>
void sgd_step(std::vector<ParamEntry<T>>& params, SgdState<T>& state, double lr, double momentum,
              double weight_decay, bool decay_exempt) {
  if (state.velocity.size() != params.size()) state.velocity.assign(params.size(), {});
  for (const auto& p : params) {
    if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
    const auto& g = p.tensor.impl()->grad;
    for (T v : g)
      if (!std::isfinite(v)) throw TrainingError("non-finite gradient in '" + p.name + "'; step aborted");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
    const auto& g = p.tensor.impl()->grad;
    auto data = p.tensor.data();
    auto& v = state.velocity[i];
    if (v.size() != data.size()) v.assign(data.size(), T{0});
    const double wd = (decay_exempt && !p.decay) ? 0.0 : weight_decay;
    for (std::size_t j = 0; j < data.size(); ++j) {
      v[j] = static_cast<T>(momentum * v[j] + (g[j] + wd * data[j]));
      data[j] = static_cast<T>(data[j] - lr * v[j]);
    }
  }
}

TensorF hflip(const TensorF& image) {
  require(image.rank() == 3, "hflip expects [C, H, W]");
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<float> out(image.numel());
  const float* src = image.ptr();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < h; ++y) {
      const float* row = src + (ch * h + y) * w;
      float* dst = out.data() + (ch * h + y) * w;
      for (std::int64_t x = 0; x < w; ++x) dst[x] = row[w - 1 - x];
    }
  return TensorF(image.shape(), std::move(out));
}

TensorF rotate(const TensorF& image, double degrees) {
  require(image.rank() == 3, "rotate expects [C, H, W]");
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double th = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double cx = 0.5 * static_cast<double>(w - 1), cy = 0.5 * static_cast<double>(h - 1);
  std::vector<float> out(image.numel(), 0.0f);
  const float* src = image.ptr();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      // Inverse map; y grows downward, so a counter-clockwise turn on screen
      // uses the transposed rotation here.
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double sx = cs * dx - sn * dy + cx;
      const double sy = sn * dx + cs * dy + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const auto x0 = static_cast<std::int64_t>(fx), y0 = static_cast<std::int64_t>(fy);
      const double ax = sx - fx, ay = sy - fy;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const float* plane = src + ch * h * w;
        auto px = [&](std::int64_t yy, std::int64_t xx) -> double {
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
          return plane[yy * w + xx];
        };
        const double v = (1 - ay) * ((1 - ax) * px(y0, x0) + ax * px(y0, x0 + 1)) +
                         ay * ((1 - ax) * px(y0 + 1, x0) + ax * px(y0 + 1, x0 + 1));
        out[(ch * h + y) * w + x] = static_cast<float>(v);
      }
    }
  return TensorF(image.shape(), std::move(out));
}

TensorF augment(const TensorF& image, Rng& rng, const AugmentConfig& cfg) {
  const bool flip = rng.bernoulli(0.5);
  const double angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg);
  if (!cfg.enabled) return image;
  TensorF out = (cfg.hflip && flip) ? hflip(image) : image;
  if (cfg.rotation_deg > 0.0) out = rotate(out, angle);
  return out;
}

Predictions predict(Network<float>& net, const Dataset& d, int batch_size) {
  require(batch_size >= 1, "predict: batch_size must be >= 1");
  const bool was_training = net.training();
  net.set_training(false);
  NoGradGuard guard;
  Predictions p;
  p.num_classes = net.spec().num_classes;
  p.labels.reserve(d.size());
  p.probs.reserve(d.size() * p.num_classes);
  for (std::size_t start = 0; start < d.size(); start += batch_size) {
    const std::size_t end = std::min(d.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    TensorF logits = net.forward(stack_batch(d, idx));
    TensorF probs = softmax(logits);
    const float* pp = probs.ptr();
    const int k = p.num_classes;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      int best = 0;
      for (int j = 0; j < k; ++j) {
        p.probs.push_back(pp[i * k + j]);
        if (pp[i * k + j] > pp[i * k + best]) best = j;
      }
      p.labels.push_back(best);
    }
  }
  net.set_training(was_training);
  return p;
}

std::string format_history_row(const EpochRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", r.epoch, r.lr, r.train_loss, r.train_acc,
                r.val_acc, r.val_f1, r.val_kappa);
  return buf;
}

void apply_paradigm(Network<float>& net, Paradigm p) {
  const bool freeze = p == Paradigm::pretrain_freeze;
  auto reg = net.registry();
  for (auto& e : reg.params) e.tensor.set_requires_grad(!(freeze && e.role == ParamRole::backbone));
  net.freeze_backbone_stats(freeze);
}

namespace {

// Batches of the shuffled order; a trailing batch of one sample joins the
// previous batch so batch statistics stay defined.
std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t b) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t s = 0; s < n; s += b) out.emplace_back(s, std::min(n, s + b));
  if (out.size() > 1 && out.back().second - out.back().first == 1) {
    out[out.size() - 2].second = out.back().second;
    out.pop_back();
  }
  return out;
}

}  // namespace

TrainResult train(Network<float>& net, const Dataset& train_set, const Dataset* val, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.size() == 0) throw TrainingError("empty dataset: nothing to train on");
  train_set.validate();

  Dataset fit_set, held_out;
  const Dataset* fit = &train_set;
  const Dataset* eval = val;
  if (!val && cfg.val_fraction > 0.0 && train_set.size() >= 2) {
    std::tie(fit_set, held_out) = split_dataset(train_set, cfg.val_fraction, cfg.seed);
    fit = &fit_set;
    if (held_out.size() > 0) eval = &held_out;
  }
  if (fit->size() == 0) throw TrainingError("empty dataset: the training split holds no samples");

  Rng rng(cfg.seed);
  apply_paradigm(net, cfg.paradigm);
  auto reg = net.registry();
  std::vector<ParamEntry<float>> params;
  for (auto& e : reg.params)
    if (e.tensor.requires_grad()) params.push_back(e);
  SgdState<float> state;

  std::ofstream history;
  std::string ckpt;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    const auto hpath = (std::filesystem::path(cfg.out_dir) / "history.csv").string();
    history.open(hpath, std::ios::binary | std::ios::trunc);
    if (!history) throw TrainingError("cannot write " + hpath);
    history << kHistoryHeader << "\n";
    ckpt = (std::filesystem::path(cfg.out_dir) / "last.epck").string();
  }

  TrainResult result;
  std::vector<std::size_t> order(fit->size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_warm_restart_lr(epoch, cfg);
    net.set_training(true);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0;
    std::int64_t correct = 0, seen = 0;
    for (auto [s, e] : batch_ranges(order.size(), cfg.batch_size)) {
      std::vector<std::size_t> idx(order.begin() + s, order.begin() + e);
      TensorF x = stack_batch(*fit, idx);
      if (cfg.augment.enabled) {
        const auto per = x.numel() / static_cast<std::int64_t>(idx.size());
        Shape img_shape(x.shape().begin() + 1, x.shape().end());
        auto xd = x.data();
        for (std::size_t i = 0; i < idx.size(); ++i) {
          TensorF a = augment(fit->images[idx[i]], rng, cfg.augment);
          std::copy(a.ptr(), a.ptr() + per, xd.begin() + i * per);
        }
      }
      std::vector<int> y(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) y[i] = fit->labels[idx[i]];

      TensorF logits = net.forward(x);
      TensorF loss = softmax_cross_entropy(logits, std::span<const int>(y));
      const double lv = loss.item();
      if (!std::isfinite(lv))
        throw TrainingError("loss is " + std::to_string(lv) + " at epoch " + std::to_string(epoch) + "; aborting");
      for (auto& p : params) p.tensor.zero_grad();
      loss.backward();
      sgd_step(params, state, lr, cfg.momentum, cfg.weight_decay, cfg.decay_exempt);

      const auto k = logits.dim(1);
      const float* lp = logits.ptr();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const float* row = lp + i * k;
        const auto best = std::max_element(row, row + k) - row;
        correct += best == y[i];
      }
      loss_sum += lv * static_cast<double>(idx.size());
      seen += static_cast<std::int64_t>(idx.size());
    }

    EpochRecord rec{epoch, lr, loss_sum / seen, static_cast<double>(correct) / seen, NAN, NAN, NAN};
    if (eval) {
      const Predictions pr = predict(net, *eval);
      const EvalReport rep = evaluate(eval->labels, pr.labels, std::nullopt, net.spec().num_classes);
      rec.val_acc = rep.acc;
      rec.val_f1 = rep.f1;
      rec.val_kappa = rep.kappa;
    }
    result.history.push_back(rec);
    if (history.is_open()) {
      history << format_history_row(rec) << "\n";
      history.flush();
    }
    if (!ckpt.empty()) save_checkpoint(net, ckpt);
    if (on_epoch) on_epoch(rec);
    if (cfg.stop_at_train_acc && rec.train_acc >= *cfg.stop_at_train_acc) {
      result.stopped_early = true;
      break;
    }
  }
  net.set_training(false);
  return result;
}

template void sgd_step<float>(std::vector<ParamEntry<float>>&, SgdState<float>&, double, double, double, bool);
template void sgd_step<double>(std::vector<ParamEntry<double>>&, SgdState<double>&, double, double, double, bool);

}  // namespace epca
