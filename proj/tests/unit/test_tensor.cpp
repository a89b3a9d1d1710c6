#include <doctest.h>

#include <cmath>
#include <numeric>

#include "epca/gradcheck.hpp"
#include "epca/ops.hpp"
#include "oracles.hpp"

using namespace epca;

TEST_CASE("conv2d of ones sums the window") {
  auto x = TensorF::ones({1, 1, 3, 3});
  auto w = TensorF::ones({1, 1, 3, 3});
  auto y = conv2d(x, w, nullptr, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 9.0f);
}

TEST_CASE("conv2d of zeros equals broadcast bias") {
  auto x = TensorD::zeros({2, 3, 5, 5});
  Rng rng(1);
  auto w = TensorD::uniform({4, 3, 3, 3}, -1, 1, rng);
  TensorD b({4}, {0.5, -1.0, 2.0, 0.0});
  auto y = conv2d(x, w, &b, 2, 1);
  CHECK(y.shape() == Shape{2, 4, 3, 3});
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 4; ++c)
      for (std::int64_t i = 0; i < 3; ++i)
        for (std::int64_t j = 0; j < 3; ++j) CHECK(y.at({n, c, i, j}) == b.data()[c]);
}

TEST_CASE("conv2d matches a direct-loop oracle over strides and paddings") {
  Rng rng(7);
  for (int stride : {1, 2, 3})
    for (int pad : {0, 1, 2}) {
      auto x = TensorD::uniform({2, 3, 7, 6}, -1, 1, rng);
      auto w = TensorD::uniform({4, 3, 3, 2}, -1, 1, rng);
      auto b = TensorD::uniform({4}, -1, 1, rng);
      auto y = conv2d(x, w, &b, stride, pad);
      auto ref = oracle::conv2d(x, w, &b, stride, pad);
      REQUIRE(y.shape() == ref.shape());
      for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("conv2d with a 1x1 unit kernel is the identity") {
  Rng rng(3);
  auto x = TensorF::uniform({2, 1, 5, 4}, -2, 2, rng);
  auto y = conv2d(x, TensorF::ones({1, 1, 1, 1}), nullptr, 1, 0);
  CHECK(y.to_vector() == x.to_vector());
}

TEST_CASE("conv2d rejects channel mismatch") {
  CHECK_THROWS_AS(conv2d(TensorF::ones({1, 2, 4, 4}), TensorF::ones({1, 3, 3, 3}), nullptr, 1, 0), DimensionError);
  CHECK_THROWS_AS(conv2d(TensorF::ones({1, 3, 4, 4}), TensorF::ones({1, 3, 3, 3}), nullptr, 0, 0), ArgumentError);
}

TEST_CASE("conv2d gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto r = gradcheck(
        [](const std::vector<TensorD>& in) { return conv2d(in[0], in[1], &in[2], 1, 1); },
        {{2, 3, 8, 8}, {4, 3, 3, 3}, {4}}, 1e-4, seed);
    CHECK_MESSAGE(r.pass, r.message);
    auto s = gradcheck([](const std::vector<TensorD>& in) { return conv2d(in[0], in[1], nullptr, 2, 0); },
                       {{1, 2, 7, 7}, {3, 2, 3, 3}}, 1e-4, seed);
    CHECK_MESSAGE(s.pass, s.message);
    auto p = gradcheck([](const std::vector<TensorD>& in) { return conv2d(in[0], in[1], nullptr, 1, 0); },
                       {{2, 3, 4, 4}, {5, 3, 1, 1}}, 1e-4, seed);
    CHECK_MESSAGE(p.pass, p.message);
  }
}

TEST_CASE("batch_norm training output has zero mean and unit variance") {
  TensorD y3({3, 2, 1}, {1, 10, 2, 20, 3, 30});
  BatchNormState<double> st(2);
  auto y = batch_norm(y3, nullptr, nullptr, st, true, 1e-5, 0.1);
  for (int c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (int n = 0; n < 3; ++n) m += y.at({n, c, 0});
    m /= 3;
    for (int n = 0; n < 3; ++n) v += std::pow(y.at({n, c, 0}) - m, 2);
    v /= 3;
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
  }
  // running stats: mean 0.9*0 + 0.1*2, unbiased var 1 -> 0.9 + 0.1*1
  CHECK(st.running_mean[0] == doctest::Approx(0.2));
  CHECK(st.running_var[0] == doctest::Approx(1.0));
  CHECK(st.running_mean[1] == doctest::Approx(2.0));
  CHECK(st.running_var[1] == doctest::Approx(0.9 + 0.1 * 100.0));
}

TEST_CASE("batch_norm identity affine equals affine-free output") {
  Rng rng(5);
  auto x = TensorD::uniform({4, 3, 2, 2}, -1, 1, rng);
  BatchNormState<double> s1(3), s2(3);
  auto gamma = TensorD::ones({3});
  auto beta = TensorD::zeros({3});
  auto a = batch_norm(x, nullptr, nullptr, s1, true, 1e-5, 0.1);
  auto b = batch_norm(x, &gamma, &beta, s2, true, 1e-5, 0.1);
  CHECK(a.to_vector() == b.to_vector());
}

TEST_CASE("batch_norm eval mode uses running statistics") {
  BatchNormState<double> st(1);
  st.running_mean = {2.0};
  st.running_var = {4.0};
  TensorD x({2, 1, 1}, {2.0, 6.0});
  auto y = batch_norm(x, nullptr, nullptr, st, false, 1e-5, 0.1);
  CHECK(y.at({0, 0, 0}) == 0.0);
  CHECK(y.at({1, 0, 0}) == doctest::Approx(4.0 / std::sqrt(4.0 + 1e-5)));
  CHECK(st.running_mean[0] == 2.0);
}

TEST_CASE("batch_norm single sample with zero variance stays finite") {
  BatchNormState<float> st(2);
  auto y = batch_norm(TensorF({1, 2, 1}, {3.0f, -1.0f}), nullptr, nullptr, st, true, 1e-5, 0.1);
  CHECK(y.to_vector() == std::vector<float>{0.0f, 0.0f});
  CHECK_THROWS_AS(batch_norm(TensorF({1, 2, 1}), nullptr, nullptr, st, true, -1.0, 0.1), ArgumentError);
}

TEST_CASE("batch_norm gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    BatchNormState<double> st(3);
    auto r = gradcheck(
        [&st](const std::vector<TensorD>& in) { return batch_norm(in[0], &in[1], &in[2], st, true, 1e-5, 0.1); },
        {{4, 3, 1}, {3}, {3}}, 1e-4, seed);
    CHECK_MESSAGE(r.pass, r.message);
    auto r4 = gradcheck(
        [&st](const std::vector<TensorD>& in) { return batch_norm(in[0], nullptr, nullptr, st, true, 1e-5, 0.1); },
        {{2, 3, 3, 2}}, 1e-4, seed);
    CHECK_MESSAGE(r4.pass, r4.message);
    auto re = gradcheck(
        [&st](const std::vector<TensorD>& in) { return batch_norm(in[0], &in[1], &in[2], st, false, 1e-5, 0.1); },
        {{2, 3, 2, 2}, {3}, {3}}, 1e-4, seed);
    CHECK_MESSAGE(re.pass, re.message);
  }
}

TEST_CASE("adaptive_avg_pool of a constant field is constant") {
  auto x = TensorD::full({2, 3, 7, 5}, 0.625);
  for (int k = 1; k <= 5; ++k) {
    const auto y = adaptive_avg_pool(x, k);
    for (double v : y.data()) CHECK(v == 0.625);
  }
}

TEST_CASE("adaptive_avg_pool 4x4 -> 2x2 block means") {
  std::vector<double> v(16);
  std::iota(v.begin(), v.end(), 1.0);
  auto y = adaptive_avg_pool(TensorD({1, 1, 4, 4}, v), 2);
  CHECK(y.to_vector() == std::vector<double>{3.5, 5.5, 11.5, 13.5});
}

TEST_CASE("adaptive_avg_pool matches the double-loop oracle") {
  Rng rng(11);
  auto x = TensorD::uniform({1, 1, 6, 6}, -1, 1, rng);
  CHECK(adaptive_avg_pool(x, 3).to_vector() == oracle::adaptive_pool(x, 3).to_vector());
  auto odd = TensorD::uniform({2, 2, 7, 5}, -1, 1, rng);
  for (int k = 1; k <= 5; ++k) CHECK(adaptive_avg_pool(odd, k).to_vector() == oracle::adaptive_pool(odd, k).to_vector());
}

TEST_CASE("adaptive_avg_pool k=1 is the spatial mean") {
  Rng rng(2);
  auto x = TensorD::uniform({2, 3, 5, 4}, -1, 1, rng);
  auto y = adaptive_avg_pool(x, 1);
  auto g = global_avg_pool(x);
  CHECK(y.to_vector() == g.to_vector());
  CHECK_THROWS_AS(adaptive_avg_pool(x, 5), ArgumentError);
  CHECK_THROWS_AS(adaptive_avg_pool(x, 0), ArgumentError);
}

TEST_CASE("elementwise definitions") {
  CHECK(sigmoid(TensorD::scalar(0.0)).item() == 0.5);
  CHECK(relu(TensorD::scalar(-1.0)).item() == 0.0);
  CHECK(relu(TensorD::scalar(2.5)).item() == 2.5);
  Rng rng(0);
  auto x = TensorD::uniform({3, 4}, -1, 1, rng);
  CHECK(dropout(x, 0.0, true, rng).to_vector() == x.to_vector());
  CHECK(dropout(x, 0.5, false, rng).to_vector() == x.to_vector());
  CHECK_THROWS_AS(dropout(x, 1.0, true, rng), ArgumentError);
  CHECK_THROWS_AS(dropout(x, -0.1, true, rng), ArgumentError);
}

TEST_CASE("softmax cross entropy of uniform logits is ln K") {
  TensorD logits({2, 3}, {0, 0, 0, 1.5, 1.5, 1.5});
  std::vector<int> labels{0, 2};
  CHECK(softmax_cross_entropy(logits, labels).item() == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  std::vector<int> bad{0, 3};
  CHECK_THROWS_AS(softmax_cross_entropy(logits, bad), ArgumentError);
  auto p = softmax(TensorD({1, 3}, {1.0, 2.0, 3.0}));
  double s = 0;
  for (double v : p.data()) s += v;
  CHECK(s == doctest::Approx(1.0));
}

TEST_CASE("dropout preserves the expectation") {
  Rng rng(123);
  const int trials = 20000;
  const double rate = 0.5;
  auto x = TensorD::full({1}, 0.8);
  double s = 0, s2 = 0;
  for (int t = 0; t < trials; ++t) {
    const double v = dropout(x, rate, true, rng).item();
    s += v;
    s2 += v * v;
  }
  const double m = s / trials;
  const double var = s2 / trials - m * m;
  const double se = std::sqrt(var / trials);
  CHECK(std::abs(m - 0.8) < 3 * se);
}

TEST_CASE("backward: linear and quadratic losses") {
  auto x = TensorD({2, 3}, {1, -2, 3, 0.5, 0, -1}).set_requires_grad(true);
  sum(x).backward();
  CHECK(x.grad() == std::vector<double>(6, 1.0));
  x.zero_grad();
  sum(mul(x, x)).backward();
  for (std::size_t i = 0; i < 6; ++i) CHECK(x.grad()[i] == 2 * x.data()[i]);
}

TEST_CASE("backward accumulates across calls and rejects non-scalars") {
  auto x = TensorD({3}, {1, 2, 3}).set_requires_grad(true);
  auto loss = sum(scale(x, 2.0));
  loss.backward();
  loss.backward();
  CHECK(x.grad() == std::vector<double>(3, 4.0));
  CHECK_THROWS_AS(scale(x, 1.0).backward(), ArgumentError);
}

TEST_CASE("backward visits a shared subgraph once per use") {
  auto x = TensorD({2}, {1.0, 3.0}).set_requires_grad(true);
  auto y = mul(x, x);
  auto z = add(y, y);  // z = 2x^2
  auto graph = GradGraph<double>::build(sum(z));
  CHECK(graph.size() == 3);
  sum(z).backward();
  CHECK(x.grad() == std::vector<double>{4.0, 12.0});
}

TEST_CASE("frozen tensors never receive gradient buffers") {
  auto w = TensorD({2}, {1.0, 2.0});
  auto x = TensorD({2}, {3.0, 4.0}).set_requires_grad(true);
  sum(mul(w, x)).backward();
  CHECK_FALSE(w.has_grad());
  CHECK(x.grad() == std::vector<double>{1.0, 2.0});
}

TEST_CASE("composite conv-BN-relu-pool-linear graph passes gradcheck over seeds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    BatchNormState<double> st(3);
    auto r = gradcheck(
        [&st](const std::vector<TensorD>& in) {
          auto h = conv2d(in[0], in[1], nullptr, 1, 1);
          h = relu(batch_norm(h, &in[2], &in[3], st, true, 1e-5, 0.1));
          auto p = global_avg_pool(h);
          return linear(p, in[4], &in[5]);
        },
        {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}, {3}, {4, 3}, {4}}, 1e-4, seed);
    CHECK_MESSAGE(r.pass, r.message);
  }
}

TEST_CASE("every elementwise op passes gradcheck over ten seeds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto check = [&](const char* name, auto op, std::vector<Shape> shapes) {
      auto r = gradcheck(op, shapes, 1e-4, seed);
      CHECK_MESSAGE(r.pass, name << ": " << r.message);
    };
    check("relu", [](const std::vector<TensorD>& in) { return relu(in[0]); }, {{3, 4}});
    check("sigmoid", [](const std::vector<TensorD>& in) { return sigmoid(in[0]); }, {{3, 4}});
    check("add", [](const std::vector<TensorD>& in) { return add(in[0], in[1]); }, {{2, 3}, {2, 3}});
    check("mul", [](const std::vector<TensorD>& in) { return mul(in[0], in[1]); }, {{2, 3}, {2, 3}});
    check("channel_scale", [](const std::vector<TensorD>& in) { return channel_scale(in[0], in[1]); },
          {{2, 3, 2, 2}, {2, 3, 1}});
    check("linear", [](const std::vector<TensorD>& in) { return linear(in[0], in[1], &in[2]); },
          {{3, 4}, {2, 4}, {2}});
    check("global_avg_pool", [](const std::vector<TensorD>& in) { return global_avg_pool(in[0]); }, {{2, 2, 3, 3}});
    check("adaptive_avg_pool", [](const std::vector<TensorD>& in) { return adaptive_avg_pool(in[0], 3); },
          {{1, 2, 5, 7}});
    check("max_pool2d", [](const std::vector<TensorD>& in) { return max_pool2d(in[0], 3, 2, 1); }, {{1, 2, 6, 6}});
    check("contract_last", [](const std::vector<TensorD>& in) { return contract_last(in[0], in[1]); },
          {{2, 3, 5}, {5}});
    check("contract_last per channel", [](const std::vector<TensorD>& in) { return contract_last(in[0], in[1]); },
          {{2, 3, 5}, {3, 5}});
    check("channel_conv1d", [](const std::vector<TensorD>& in) { return channel_conv1d(in[0], in[1]); },
          {{2, 6, 1}, {3}});
    check("concat/slice",
          [](const std::vector<TensorD>& in) { return slice_last(concat_last<double>({in[0], in[1]}), 1, 4); },
          {{2, 3}, {2, 4}});
    check("slice_channels", [](const std::vector<TensorD>& in) { return slice_channels(in[0], 1, 2); },
          {{2, 4, 2, 2}});
    check("reshape", [](const std::vector<TensorD>& in) { return in[0].reshape({6, 2}); }, {{3, 4}});
    check("dropout", [](const std::vector<TensorD>& in) {
      Rng r(99);
      return dropout(in[0], 0.3, true, r);
    }, {{4, 5}});
    auto labels = std::vector<int>{0, 2, 1};
    check("softmax_cross_entropy",
          [&labels](const std::vector<TensorD>& in) { return softmax_cross_entropy(in[0], labels); }, {{3, 4}});
  }
}

TEST_CASE("gradcheck reports") {
  auto id = gradcheck([](const std::vector<TensorD>& in) { return in[0]; }, {{4}}, 1e-4);
  CHECK(id.pass);
  CHECK(id.max_rel_err < 1e-9);
  auto sg = gradcheck([](const std::vector<TensorD>& in) { return sigmoid(in[0]); }, {{16}}, 1e-6, 4);
  CHECK_MESSAGE(sg.pass, sg.message);
  auto nan = gradcheck(
      [](const std::vector<TensorD>& in) { return mul(in[0], TensorD::full({2}, std::nan(""))); }, {{2}}, 1e-4);
  CHECK_FALSE(nan.pass);
  CHECK(nan.message.find("non-finite") != std::string::npos);
}

TEST_CASE("gradcheck resamples inputs near relu kinks") {
  auto x = TensorD({2}, {1e-4, 0.5}).set_requires_grad(true);
  GradcheckOptions opts;
  auto r = gradcheck([&x] { return relu(x); }, {x}, opts);
  CHECK(r.resamples >= 1);
  CHECK(r.pass);
}
