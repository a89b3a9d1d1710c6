#include "epca/verify.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <memory>
#include <sstream>

#include "epca/attention.hpp"
#include "epca/network.hpp"
#include "epca/ops.hpp"

namespace epca {

namespace {

using Inputs = std::vector<TensorD>;
using OpFn = std::function<TensorD(const Inputs&)>;
using CaseFn = std::function<GradcheckReport(std::uint64_t seed, double tol)>;

struct Case {
  std::string name;
  CaseFn run;
};

Case op_case(std::string name, std::vector<Shape> shapes, OpFn fn) {
  return {std::move(name), [shapes = std::move(shapes), fn = std::move(fn)](std::uint64_t seed, double tol) {
            return gradcheck(fn, shapes, tol, seed);
          }};
}

EpcaConfig epca_config(std::vector<int> sizes, FusionVariant v = FusionVariant::linear) {
  EpcaConfig c;
  c.sizes = std::move(sizes);
  c.variant = v;
  return c;
}

// Module output against its input and every parameter, parameters drawn
// uniformly so the check does not sit on the symmetric initialization.
Case module_case(std::string name, std::function<std::unique_ptr<Module<double>>(Rng&)> make, bool training,
                 Shape input) {
  return {std::move(name), [make = std::move(make), training, input = std::move(input)](std::uint64_t seed,
                                                                                        double tol) {
            Rng rng(1000 + seed);
            auto m = make(rng);
            Registry<double> reg;
            m->collect("m", ParamRole::adapter, reg);
            for (auto& p : reg.params)
              for (auto& v : p.tensor.data()) v = rng.uniform(-1.0, 1.0);
            m->set_training(training);
            auto x = TensorD::uniform(input, -1.0, 1.0, rng);
            x.set_requires_grad(true);
            std::vector<TensorD> wrt{x};
            for (auto& p : reg.params) wrt.push_back(p.tensor);
            GradcheckOptions o;
            o.tolerance = tol;
            o.seed = seed;
            return gradcheck([&] { return m->forward(x); }, wrt, o);
          }};
}

std::vector<Case> build_cases() {
  std::vector<Case> cs;
  // --- tensor ops --------------------------------------------------------
  cs.push_back(op_case("conv2d", {{2, 3, 6, 6}, {4, 3, 3, 3}, {4}},
                       [](const Inputs& in) { return conv2d(in[0], in[1], &in[2], 1, 1); }));
  cs.push_back(op_case("conv2d_stride2", {{1, 2, 7, 7}, {3, 2, 3, 3}},
                       [](const Inputs& in) { return conv2d(in[0], in[1], nullptr, 2, 1); }));
  cs.push_back(op_case("conv2d_1x1", {{2, 3, 4, 4}, {5, 3, 1, 1}},
                       [](const Inputs& in) { return conv2d(in[0], in[1], nullptr, 1, 0); }));
  cs.push_back(op_case("batch_norm_train", {{4, 3, 2, 2}, {3}, {3}}, [](const Inputs& in) {
    BatchNormState<double> st(3);
    return batch_norm(in[0], &in[1], &in[2], st, true, 1e-5, 0.1);
  }));
  cs.push_back(op_case("batch_norm_train_plain", {{3, 4, 1}}, [](const Inputs& in) {
    BatchNormState<double> st(4);
    return batch_norm(in[0], nullptr, nullptr, st, true, 1e-5, 0.1);
  }));
  cs.push_back(op_case("batch_norm_eval", {{2, 3, 2, 2}, {3}, {3}}, [](const Inputs& in) {
    BatchNormState<double> st(3);
    st.running_mean = {0.1, -0.2, 0.3};
    st.running_var = {0.5, 1.5, 2.0};
    return batch_norm(in[0], &in[1], &in[2], st, false, 1e-5, 0.1);
  }));
  cs.push_back(op_case("adaptive_avg_pool", {{2, 2, 7, 5}}, [](const Inputs& in) { return adaptive_avg_pool(in[0], 3); }));
  cs.push_back(op_case("global_avg_pool", {{2, 3, 4, 5}}, [](const Inputs& in) { return global_avg_pool(in[0]); }));
  cs.push_back(op_case("max_pool2d", {{2, 2, 6, 6}}, [](const Inputs& in) { return max_pool2d(in[0], 3, 2, 1); }));
  cs.push_back(op_case("relu", {{3, 8}}, [](const Inputs& in) { return relu(in[0]); }));
  cs.push_back(op_case("sigmoid", {{3, 8}}, [](const Inputs& in) { return sigmoid(in[0]); }));
  cs.push_back(op_case("dropout_train", {{4, 6}}, [](const Inputs& in) {
    Rng r(7);  // same mask on every call
    return dropout(in[0], 0.4, true, r);
  }));
  cs.push_back(op_case("dropout_eval", {{4, 6}}, [](const Inputs& in) {
    Rng r(7);
    return dropout(in[0], 0.4, false, r);
  }));
  cs.push_back(op_case("add", {{2, 5}, {2, 5}}, [](const Inputs& in) { return add(in[0], in[1]); }));
  cs.push_back(op_case("mul", {{2, 5}, {2, 5}}, [](const Inputs& in) { return mul(in[0], in[1]); }));
  cs.push_back(op_case("scale", {{2, 5}}, [](const Inputs& in) { return scale(in[0], -1.7); }));
  cs.push_back(op_case("channel_scale", {{2, 3, 4, 4}, {2, 3, 1}},
                       [](const Inputs& in) { return channel_scale(in[0], in[1]); }));
  cs.push_back(op_case("linear", {{3, 5}, {4, 5}, {4}}, [](const Inputs& in) { return linear(in[0], in[1], &in[2]); }));
  cs.push_back(op_case("linear_nobias", {{3, 5}, {2, 5}}, [](const Inputs& in) { return linear(in[0], in[1], nullptr); }));
  cs.push_back(op_case("softmax_cross_entropy", {{4, 3}}, [](const Inputs& in) {
    const std::vector<int> labels{0, 2, 1, 2};
    return softmax_cross_entropy(in[0], std::span<const int>(labels));
  }));
  cs.push_back(op_case("sum", {{3, 4}}, [](const Inputs& in) { return sum(in[0]); }));
  cs.push_back(op_case("mean", {{3, 4}}, [](const Inputs& in) { return mean(in[0]); }));
  cs.push_back(op_case("concat_last", {{2, 3, 1}, {2, 3, 4}},
                       [](const Inputs& in) { return concat_last(std::vector<TensorD>{in[0], in[1]}); }));
  cs.push_back(op_case("slice_last", {{2, 3, 6}}, [](const Inputs& in) { return slice_last(in[0], 2, 3); }));
  cs.push_back(op_case("slice_channels", {{2, 5, 2, 2}}, [](const Inputs& in) { return slice_channels(in[0], 1, 3); }));
  cs.push_back(op_case("contract_last", {{2, 3, 10}, {10}}, [](const Inputs& in) { return contract_last(in[0], in[1]); }));
  cs.push_back(op_case("contract_last_per_channel", {{2, 3, 10}, {3, 10}},
                       [](const Inputs& in) { return contract_last(in[0], in[1]); }));
  cs.push_back(op_case("channel_conv1d", {{2, 6, 1}, {3}}, [](const Inputs& in) { return channel_conv1d(in[0], in[1]); }));

  // --- attention building blocks -----------------------------------------
  cs.push_back(op_case("pyramid_pool", {{2, 3, 7, 6}},
                       [](const Inputs& in) { return pyramid_pool(in[0], epca_config({1, 2, 3})).values; }));
  cs.push_back(op_case("scfm_linear", {{2, 3, 6, 6}, {10}},
                       [](const Inputs& in) { return scfm_linear(pyramid_pool(in[0], epca_config({1, 3})), in[1]); }));
  cs.push_back(op_case("scfm_dropout_eval", {{2, 3, 6, 6}, {10}}, [](const Inputs& in) {
    Rng r(3);
    return scfm_dropout(pyramid_pool(in[0], epca_config({1, 3})), in[1], 0.5, false, r);
  }));
  cs.push_back(op_case("scfm_dropout_train", {{2, 3, 6, 6}, {10}}, [](const Inputs& in) {
    Rng r(3);
    return scfm_dropout(pyramid_pool(in[0], epca_config({1, 3})), in[1], 0.5, true, r);
  }));
  cs.push_back(op_case("scfm_hierarchical", {{2, 3, 6, 6}, {1}, {9}, {2}}, [](const Inputs& in) {
    FusionParams<double> p{TensorD(), {in[1], in[2]}, in[3]};
    return scfm_hierarchical(pyramid_pool(in[0], epca_config({1, 3})), p);
  }));
  cs.push_back(op_case("mcf", {{4, 3, 1}, {3}, {3}}, [](const Inputs& in) {
    GateNorm<double> n(3, false, 1e-5, 0.1);
    n.gamma = in[1];
    n.beta = in[2];
    return mcf(in[0], n, true).values;
  }));
  for (auto combine : {ParallelCombine::mean, ParallelCombine::product}) {
    const std::string name = combine == ParallelCombine::mean ? "scfm_parallel_mean" : "scfm_parallel_product";
    cs.push_back(op_case(name, {{3, 2, 6, 6}, {1}, {9}}, [combine](const Inputs& in) {
      FusionParams<double> p{TensorD(), {in[1], in[2]}, TensorD()};
      std::vector<GateNorm<double>> norms{GateNorm<double>(2, false, 1e-5, 0.1), GateNorm<double>(2, false, 1e-5, 0.1)};
      return scfm_parallel(pyramid_pool(in[0], epca_config({1, 3})), p, norms, true, combine).values;
    }));
  }
  cs.push_back(op_case("epca_apply", {{2, 3, 4, 4}, {2, 3, 1}},
                       [](const Inputs& in) { return epca_apply(in[0], AttentionGate<double>{in[1]}); }));
  cs.push_back(op_case("table2_mlp", {{2, 3, 6, 6}, {2, 30}, {2}, {3, 2}, {3}}, [](const Inputs& in) {
    PyramidHeadParams<double> p{in[1], in[2], in[3], in[4], TensorD()};
    return table2_variant(pyramid_pool(in[0], epca_config({1, 3})), PyramidHead::mlp, p);
  }));
  cs.push_back(op_case("table2_shared_mlp", {{2, 3, 6, 6}, {2, 3}, {2}, {3, 2}, {3}}, [](const Inputs& in) {
    PyramidHeadParams<double> p{in[1], in[2], in[3], in[4], TensorD()};
    return table2_variant(pyramid_pool(in[0], epca_config({1, 3})), PyramidHead::shared_mlp, p);
  }));
  cs.push_back(op_case("table2_cic", {{2, 5, 6, 6}, {3}}, [](const Inputs& in) {
    PyramidHeadParams<double> p{TensorD(), TensorD(), TensorD(), TensorD(), in[1]};
    return table2_variant(pyramid_pool(in[0], epca_config({1, 3})), PyramidHead::cic, p);
  }));

  // --- attention modules -------------------------------------------------
  const Shape xin{3, 4, 6, 6};
  auto epca = [](FusionVariant v) {
    return [v](Rng& rng) -> std::unique_ptr<Module<double>> {
      return std::make_unique<EpcaModule<double>>(4, epca_config({1, 3}, v), rng);
    };
  };
  cs.push_back(module_case("module_epca_linear", epca(FusionVariant::linear), true, xin));
  cs.push_back(module_case("module_epca_dropout_eval", epca(FusionVariant::dropout), false, xin));
  cs.push_back(module_case("module_epca_hierarchical", epca(FusionVariant::hierarchical), true, xin));
  cs.push_back(module_case("module_epca_parallel", epca(FusionVariant::parallel), true, xin));
  cs.push_back(module_case(
      "module_epca_affine",
      [](Rng& rng) -> std::unique_ptr<Module<double>> {
        auto c = epca_config({1, 2, 3});
        c.bn_affine = true;
        return std::make_unique<EpcaModule<double>>(4, c, rng);
      },
      true, xin));
  cs.push_back(module_case(
      "module_se",
      [](Rng& rng) -> std::unique_ptr<Module<double>> { return std::make_unique<SqueezeExcite<double>>(4, 2, rng); },
      true, xin));
  for (auto head : {PyramidHead::mlp, PyramidHead::shared_mlp, PyramidHead::cic})
    cs.push_back(module_case(
        std::string("module_pyramid_") + head_name(head),
        [head](Rng& rng) -> std::unique_ptr<Module<double>> {
          return std::make_unique<PyramidHeadModule<double>>(4, epca_config({1, 3}), head, 2, rng);
        },
        true, xin));

  // --- residual blocks with attention ------------------------------------
  cs.push_back(module_case(
      "block_basic_epca",
      [](Rng& rng) -> std::unique_ptr<Module<double>> {
        AttentionSpec a;
        a.kind = AttentionKind::epca;
        return std::make_unique<ResidualBlock<double>>(BlockKind::basic, 3, 4, 2, a, rng);
      },
      true, {2, 3, 6, 6}));
  cs.push_back(module_case(
      "block_bottleneck_se",
      [](Rng& rng) -> std::unique_ptr<Module<double>> {
        AttentionSpec a;
        a.kind = AttentionKind::se;
        a.reduction = 4;
        return std::make_unique<ResidualBlock<double>>(BlockKind::bottleneck, 4, 2, 1, a, rng);
      },
      true, {2, 4, 5, 5}));
  return cs;
}

}  // namespace

std::vector<std::string> gradcheck_case_names() {
  std::vector<std::string> out;
  for (const auto& c : build_cases()) out.push_back(c.name);
  return out;
}

SuiteResult run_gradcheck_suite(std::uint64_t seed, const std::string& filter, double tolerance) {
  using clock = std::chrono::steady_clock;
  SuiteResult r;
  r.pass = true;
  const auto t0 = clock::now();
  for (auto& c : build_cases()) {
    if (!filter.empty() && c.name.find(filter) == std::string::npos) continue;
    const auto s = clock::now();
    SuiteCase sc{c.name, c.run(seed, tolerance), 0.0};
    sc.seconds = std::chrono::duration<double>(clock::now() - s).count();
    r.max_rel_err = std::max(r.max_rel_err, sc.report.max_rel_err);
    r.pass = r.pass && sc.report.pass;
    r.cases.push_back(std::move(sc));
  }
  if (r.cases.empty()) throw ArgumentError("no gradcheck case matches '" + filter + "'");
  r.seconds = std::chrono::duration<double>(clock::now() - t0).count();
  return r;
}

std::string SuiteResult::table() const {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-30s %6s %12s %8s %9s\n", "case", "status", "max_rel_err", "checked", "seconds");
  os << buf;
  for (const auto& c : cases) {
    std::snprintf(buf, sizeof(buf), "%-30s %6s %12.3e %8zu %9.3f\n", c.name.c_str(), c.report.pass ? "ok" : "FAIL",
                  c.report.max_rel_err, c.report.checked, c.seconds);
    os << buf;
    if (!c.report.pass && !c.report.message.empty()) os << "  " << c.report.message << "\n";
  }
  std::snprintf(buf, sizeof(buf), "%zu cases, max relative error %.3e, %.2f s: %s\n", cases.size(), max_rel_err,
                seconds, pass ? "PASS" : "FAIL");
  os << buf;
  return os.str();
}

}  // namespace epca
