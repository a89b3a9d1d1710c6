// One line per acceptance criterion; exit status 1 when any fails.
// Usage: acceptance [out_dir] [criterion numbers...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>

#include "epca/app.hpp"
#include "epca/explain.hpp"
#include "epca/ops.hpp"
#include "epca/verify.hpp"
#include "oracles.hpp"

using namespace epca;
namespace fs = std::filesystem;

namespace {

fs::path g_out = "acceptance_out";

struct Outcome {
  bool pass;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ArchSpec mini_epca(FusionVariant v = FusionVariant::linear) {
  ArchSpec a = preset("mini-resnet20");
  a.input = {1, 32, 32};
  a.num_classes = 3;
  a.attention.kind = AttentionKind::epca;
  a.attention.epca.variant = v;
  return a;
}

Outcome gradient_suite() {
  const SuiteResult r = run_gradcheck_suite(0, "", 1e-4);
  const std::string text = r.table();
  fs::create_directories(g_out);
  std::ofstream(g_out / "gradcheck.txt") << text;
  std::set<std::string> names;
  for (const auto& c : r.cases) names.insert(c.name);
  bool covered = true;
  for (const char* need : {"module_epca_linear", "module_epca_dropout_eval", "module_epca_hierarchical",
                           "module_epca_parallel", "module_se", "module_pyramid_mlp", "module_pyramid_shared_mlp",
                           "module_pyramid_cic"})
    covered &= names.count(need) > 0;
  const bool ok = r.pass && covered && r.max_rel_err < 1e-4 && r.seconds < 120.0;
  return {ok, std::to_string(r.cases.size()) + " cases, max rel err " + fmt("%.2e", r.max_rel_err) + ", " +
                  fmt("%.2f", r.seconds) + " s" + (covered ? "" : ", missing attention variants")};
}

Outcome pooling_oracle() {
  Rng rng(2);
  int combos = 0, mismatches = 0;
  for (int h = 1; h <= 8; ++h)
    for (int w = 1; w <= 8; ++w)
      for (int k = 1; k <= std::min(h, w); ++k) {
        auto x = TensorD::uniform({2, 3, h, w}, -1, 1, rng);
        ++combos;
        if (adaptive_avg_pool(x, k).to_vector() != oracle::adaptive_pool(x, k).to_vector()) ++mismatches;
      }
  return {mismatches == 0, std::to_string(combos) + " (H,W,k) combinations, " + std::to_string(mismatches) +
                               " inexact"};
}

Outcome channel_independence() {
  struct Variant {
    const char* name;
    EpcaConfig cfg;
    bool training;
  };
  std::vector<Variant> variants;
  for (auto v : {FusionVariant::linear, FusionVariant::dropout, FusionVariant::hierarchical, FusionVariant::parallel}) {
    EpcaConfig c;
    c.variant = v;
    variants.push_back({variant_name(v), c, v != FusionVariant::dropout});
  }
  EpcaConfig pc;
  pc.per_channel_weights = true;
  variants.push_back({"linear/per-channel", pc, true});
  EpcaConfig prod;
  prod.variant = FusionVariant::parallel;
  prod.combine = ParallelCombine::product;
  variants.push_back({"parallel/product", prod, true});

  int violations = 0;
  for (const auto& v : variants) {
    Rng rng(31);
    EpcaModule<double> m(6, v.cfg, rng);
    Registry<double> reg;
    m.collect("m", ParamRole::adapter, reg);
    for (auto& p : reg.params)
      for (auto& x : p.tensor.data()) x = rng.uniform(-1.0, 1.0);
    m.set_training(v.training);
    for (int trial = 0; trial < 100; ++trial) {
      auto x = TensorD::uniform({4, 6, 7, 7}, -1, 1, rng);
      auto g0 = m.gate(x).values;
      const auto cp = static_cast<std::int64_t>(rng.index(6));
      auto xp = x.clone();
      for (std::int64_t n = 0; n < 4; ++n)
        for (std::int64_t r = 0; r < 7; ++r)
          for (std::int64_t s = 0; s < 7; ++s)
            if (rng.bernoulli(0.5)) xp.at({n, cp, r, s}) += rng.uniform(-5, 5);
      auto g1 = m.gate(xp).values;
      for (std::int64_t n = 0; n < 4; ++n)
        for (std::int64_t c = 0; c < 6; ++c)
          if (c != cp && g0.at({n, c, 0}) != g1.at({n, c, 0})) ++violations;
    }
  }
  return {violations == 0,
          std::to_string(variants.size()) + " variants x 100 trials, " + std::to_string(violations) + " changed entries"};
}

Outcome feature_count() {
  const auto cfg = parse_run_config("[attention]\nkind = epca\nsizes = 1,3\n");
  const int f = cfg.arch.attention.epca.feature_count();
  Rng rng(1);
  auto x = TensorD::uniform({2, 4, 9, 9}, 0, 1, rng);
  const auto t = pyramid_pool(x, cfg.arch.attention.epca);
  // The exported statistics index features 0..F-1.
  std::vector<TensorF> ctx{TensorF::uniform({2, 4, f}, 0, 1, rng)};
  const auto stats = contribution_stats("s", ctx, TensorF::ones({f}));
  const bool ok = f == 10 && t.values.dim(2) == 10 && stats.features.size() == 10;
  return {ok, "F = " + std::to_string(f) + ", pooled context width " + std::to_string(t.values.dim(2)) +
                  ", exported features " + std::to_string(stats.features.size())};
}

Outcome frugality() {
  Rng rng(0);
  EpcaModule<float> m(64, EpcaConfig{}, rng);
  Registry<float> reg;
  m.collect("a", ParamRole::adapter, reg);
  std::int64_t per_block = 0;
  for (auto& p : reg.params) per_block += p.tensor.numel();

  ArchSpec plain = mini_epca();
  plain.attention.kind = AttentionKind::none;
  const ModelSummary e = Network<float>(mini_epca(), 0).summary();
  const ModelSummary p = Network<float>(plain, 0).summary();
  const double param_ratio = double(e.attention_params) / double(e.backbone_params());
  const double flop_ratio = double(e.flops - p.flops) / double(p.flops);
  const bool ok = per_block == 10 && e.attention_params == 90 && e.param_count - p.param_count == 90 &&
                  e.backbone_params() == p.param_count && param_ratio < 0.0004 && flop_ratio < 0.01;
  return {ok, std::to_string(per_block) + " scalars/block, +" + std::to_string(e.attention_params) + " params (" +
                  fmt("%.4f", 100 * param_ratio) + "% of backbone), FLOPs +" + fmt("%.3f", 100 * flop_ratio) +
                  "% at 32x32"};
}

Outcome scheduler() {
  // Closed form with the cycle found from the geometric series.
  auto closed = [](double t, double lr_max, double eta_min, int t0, int tmult) {
    double ti = t0, tcur = t;
    if (tmult == 1) {
      tcur = std::fmod(t, t0);
    } else {
      const double i = std::floor(std::log(t / t0 * (tmult - 1) + 1) / std::log(double(tmult)));
      const double start = t0 * (std::pow(tmult, i) - 1) / (tmult - 1);
      ti = t0 * std::pow(tmult, i);
      tcur = t - start;
    }
    return eta_min + (lr_max - eta_min) * (1 + std::cos(std::numbers::pi * tcur / ti)) / 2;
  };
  TrainConfig cfg;
  double worst = 0;
  bool ok = cosine_warm_restart_lr(0.0, cfg) == 0.0015;
  for (auto [t0, tm, emin] : {std::tuple{10, 2, 0.0}, {10, 2, 1e-5}, {5, 1, 0.0}, {3, 3, 2e-4}}) {
    SchedulerConfig s{t0, tm, emin};
    for (double t = 0; t < 200; t += 0.25) {
      worst = std::max(worst, std::abs(cosine_warm_restart_lr(t, 0.0015, s) - closed(t, 0.0015, emin, t0, tm)));
    }
    double boundary = 0, period = t0;
    for (int c = 0; c < 4; ++c) {
      boundary += period;
      period *= tm;
      ok &= cosine_warm_restart_lr(boundary, 0.0015, s) == 0.0015;
      const double before = cosine_warm_restart_lr(boundary - 1e-6, 0.0015, s);
      ok &= before - emin < 1e-12 && before >= emin;
    }
  }
  ok &= worst <= 1e-12;
  return {ok, "lr(0) = " + fmt("%.4g", cosine_warm_restart_lr(0.0, cfg)) + ", max |lr - closed form| = " +
                  fmt("%.1e", worst) + ", restarts hit lr_max"};
}

std::string backbone_digest(Network<float>& net) {
  std::string bytes;
  auto reg = net.registry();
  for (auto& p : reg.params)
    if (p.role == ParamRole::backbone) {
      const auto d = p.tensor.data();
      bytes.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(float));
    }
  for (auto& b : reg.buffers)
    if (b.role == ParamRole::backbone)
      bytes.append(reinterpret_cast<const char*>(b.values->data()), b.values->size() * sizeof(float));
  return sha256_hex(bytes);
}

Outcome freeze_contract() {
  Network<float> net(mini_epca(), 5);
  auto d = synth_generate(8, 32, 4);
  const std::string before = backbone_digest(net);
  std::vector<std::vector<float>> rest;
  for (auto& p : net.registry().params)
    if (p.role != ParamRole::backbone) rest.push_back(p.tensor.to_vector());
  TrainConfig c;
  c.paradigm = Paradigm::pretrain_freeze;
  c.epochs = 20;
  c.batch_size = 8;
  c.lr_max = 0.02;
  c.val_fraction = 0;
  c.seed = 1;
  train(net, d, nullptr, c);
  const std::string after = backbone_digest(net);
  std::size_t changed = 0, i = 0;
  for (auto& p : net.registry().params)
    if (p.role != ParamRole::backbone) changed += p.tensor.to_vector() != rest[i++];
  const bool ok = before == after && changed == rest.size();
  return {ok, "backbone sha256 " + before.substr(0, 16) + (before == after ? " unchanged" : " -> " + after.substr(0, 16)) +
                  ", " + std::to_string(changed) + "/" + std::to_string(rest.size()) + " adapter+head tensors moved"};
}

Outcome overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  auto full = synth_generate(67, 32, 21);
  std::vector<std::size_t> first(200);
  for (std::size_t i = 0; i < 200; ++i) first[i] = i;
  const Dataset d = full.subset(first, "train");
  Network<float> net(mini_epca(), 8);
  TrainConfig c;
  c.epochs = 200;
  c.batch_size = 32;
  c.lr_max = 0.05;
  c.scheduler = {200, 1, 0.0};
  c.weight_decay = 0;
  c.augment.enabled = false;
  c.val_fraction = 0;
  c.seed = 8;
  c.stop_at_train_acc = 0.99;
  c.out_dir = (g_out / "overfit").string();
  const auto r = train(net, d, nullptr, c);
  double best = 0;
  for (const auto& e : r.history) best = std::max(best, e.train_acc);
  const double secs = seconds_since(t0);
  return {best >= 0.99 && secs < 600, "train acc " + fmt("%.4f", best) + " after " + std::to_string(r.history.size()) +
                                          " epochs, " + fmt("%.1f", secs) + " s"};
}

Outcome desk_scale() {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg = parse_run_config(
      "[data]\nn_per_class = 200\ntest_per_class = 100\nsize = 32\n"
      "[attention]\nkind = epca\nsizes = 1,3\n"
      "[train]\nepochs = 6\nbatch_size = 32\nlr_max = 0.05\nt0 = 6\nt_mult = 1\nval_fraction = 0\n",
      "<desk-scale>");
  const LoadedData data = load_data(cfg.data);
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  AblationTable t;
  t.title = "Desk-scale ordering: 600 train / 300 test, 3 seeds";
  for (auto kind : {AttentionKind::none, AttentionKind::epca}) {
    ArchSpec a = resolve_arch(cfg, data.train);
    a.attention.kind = kind;
    AblationRow row;
    row.label = kind == AttentionKind::none ? "plain" : "EPCA{1,3}";
    row.features = kind == AttentionKind::none ? 0 : 10;
    for (auto s : seeds) {
      auto r = run_experiment(cfg, data, a, s);
      row.params = r.params;
      row.attention_params = r.attention_params;
      row.flops = r.flops;
      row.runs.push_back(r.test);
    }
    t.rows.push_back(row);
  }
  fs::create_directories(g_out);
  std::ofstream(g_out / "desk_scale.txt") << t.table();
  std::ofstream(g_out / "desk_scale.csv") << t.csv();
  const double plain = t.rows[0].mean_acc(), epca = t.rows[1].mean_acc();

  // Grid-size ablation at reduced scale: completion and shape only.
  RunConfig small = parse_run_config(
      "[data]\nn_per_class = 30\ntest_per_class = 20\nsize = 32\n"
      "[attention]\nkind = epca\n"
      "[train]\nepochs = 3\nbatch_size = 16\nlr_max = 0.05\nt0 = 3\nt_mult = 1\nval_fraction = 0\n",
      "<grid>");
  const LoadedData sd = load_data(small.data);
  const auto grid = ablate_sizes(small, sd, "1|1,2|1,3|1,4|1,2,3|1,2,4", {0});
  std::ofstream(g_out / "ablate_sizes.txt") << grid.table();
  std::ofstream(g_out / "ablate_sizes.csv") << grid.csv();
  const std::vector<int> expect_f{1, 5, 10, 17, 14, 21};
  bool grid_ok = grid.rows.size() == expect_f.size();
  for (std::size_t i = 0; grid_ok && i < grid.rows.size(); ++i)
    grid_ok = grid.rows[i].features == expect_f[i] && grid.rows[i].runs.size() == 1;

  const bool ok = epca >= plain - 0.005 && grid_ok;
  return {ok, "test acc EPCA " + fmt("%.4f", epca) + " vs plain " + fmt("%.4f", plain) + ", size grid " +
                  (grid_ok ? "6 rows" : "incomplete") + ", " + fmt("%.0f", seconds_since(t0)) + " s"};
}

Outcome metrics_oracle() {
  Rng rng(99);
  int bad = 0;
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 2 + static_cast<int>(rng.index(4));
    const int n = 1 + static_cast<int>(rng.index(120));
    std::vector<int> t(n), p(n);
    for (int i = 0; i < n; ++i) {
      t[i] = static_cast<int>(rng.index(k));
      p[i] = rng.bernoulli(0.6) ? t[i] : static_cast<int>(rng.index(k));
    }
    const auto r = evaluate(t, p, std::nullopt, k);
    const auto o = oracle::metrics(t, p, k);
    for (double e : {r.acc - o.acc, r.sen - o.sen, r.f1 - o.f1, r.kappa - o.kappa}) worst = std::max(worst, std::abs(e));
  }
  if (worst > 1e-12) ++bad;
  int auc_bad = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const int n = 2 + static_cast<int>(rng.index(11));
    std::vector<int> pos(n);
    std::vector<double> s(n);
    for (int i = 0; i < n; ++i) {
      pos[i] = rng.bernoulli(0.5);
      s[i] = static_cast<double>(rng.index(5)) / 4.0;  // coarse scores force ties
    }
    pos[0] = 1;
    pos[1] = 0;
    if (roc_auc(pos, s) != oracle::pairwise_auc(pos, s)) ++auc_bad;
  }
  return {bad == 0 && auc_bad == 0, "1000 confusions, max |diff| " + fmt("%.1e", worst) + "; AUC N<=12: " +
                                        std::to_string(auc_bad) + "/2000 inexact"};
}

Outcome grad_cam_contract() {
  Rng rng(3);
  const int h = 6, w = 7;
  TensorD act = TensorD::uniform({1, 2, h, w}, 0.0, 2.0, rng);
  act.at({0, 0, 1, 1}) = 0.0;
  Heatmap m = grad_cam_fn(act, [](const TensorD& a) { return mean(slice_channels(a, 0, 1)); }, h, w);
  double mx = 0, closed = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) mx = std::max(mx, act.at({0, 0, y, x}));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) closed = std::max(closed, std::abs(m.at(y, x) - act.at({0, 0, y, x}) / mx));

  Heatmap z = grad_cam_fn(act, [](const TensorD& a) { return sum(scale(a, 0.0)); }, 12, 14);
  const bool zero = std::all_of(z.values.begin(), z.values.end(), [](double v) { return v == 0.0; });

  Network<float> net(mini_epca(), 2);
  auto d = synth_generate(2, 32, 6);
  bool in_range = true;
  for (std::size_t i = 0; i < d.size(); ++i)
    for (const char* layer : {"stage1", "stage2", "stage3"}) {
      const Heatmap g = grad_cam(net, d.images[i], d.labels[i], layer);
      for (double v : g.values) in_range &= v >= 0.0 && v <= 1.0;
    }
  const Heatmap g = grad_cam(net, d.images[2], 2, "stage3");
  fs::create_directories(g_out);
  const auto path = g_out / "gradcam.pgm";
  write_heatmap_pgm(path.string(), g);
  const TensorF back = read_pnm(path.string());
  bool round_trip = back.shape() == Shape{1, 32, 32};
  for (std::size_t i = 0; round_trip && i < g.values.size(); ++i)
    round_trip = back.data()[i] == static_cast<float>(std::lround(g.values[i] * 255.0)) / 255.0f;
  const bool ok = closed < 1e-6 && zero && in_range && round_trip;
  return {ok, "closed form err " + fmt("%.1e", closed) + (zero ? ", zero-grad map zero" : ", zero-grad map NONZERO") +
                  (in_range ? ", range [0,1]" : ", out of range") + (round_trip ? ", PGM round trip exact" : ", PGM mismatch")};
}

Outcome determinism() {
  auto d = synth_generate(10, 32, 12);
  auto run = [&](const std::string& tag) {
    Network<float> net(mini_epca(FusionVariant::dropout), 17);
    TrainConfig c;
    c.epochs = 3;
    c.batch_size = 8;
    c.lr_max = 0.02;
    c.seed = 17;
    c.val_fraction = 0.2;
    c.out_dir = (g_out / ("determinism_" + tag)).string();
    fs::remove_all(c.out_dir);
    train(net, d, nullptr, c);
    return std::make_pair(slurp(fs::path(c.out_dir) / "history.csv"), slurp(fs::path(c.out_dir) / "last.epck"));
  };
  const auto a = run("a"), b = run("b");
  const bool ok = !a.first.empty() && !a.second.empty() && a.first == b.first && a.second == b.second;
  return {ok, "history.csv " + std::string(a.first == b.first ? "identical" : "differs") + " (" +
                  std::to_string(a.first.size()) + " B), checkpoint " + (a.second == b.second ? "identical" : "differs") +
                  " (" + std::to_string(a.second.size()) + " B)"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (!a.empty() && std::all_of(a.begin(), a.end(), ::isdigit))
      only.insert(std::stoi(a));
    else
      g_out = a;
  }
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"pooling oracle", pooling_oracle},
      {"channel independence", channel_independence},
      {"feature-count parity", feature_count},
      {"parameter frugality", frugality},
      {"scheduler", scheduler},
      {"freeze contract", freeze_contract},
      {"overfit smoke test", overfit},
      {"desk-scale ordering", desk_scale},
      {"metrics oracle", metrics_oracle},
      {"grad-cam", grad_cam_contract},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o{false, ""};
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("[%s] %2d %-22s %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
