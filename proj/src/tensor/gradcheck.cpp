#include "epca/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "epca/ops.hpp"

namespace epca {

namespace {

double projected(const TensorD& out, const TensorD& proj) {
  double acc = 0.0;
  const auto od = out.data();
  const auto pd = proj.data();
  for (std::size_t i = 0; i < od.size(); ++i) acc += od[i] * pd[i];
  return acc;
}

}  // namespace

GradcheckReport gradcheck(const std::function<TensorD()>& fn, std::vector<TensorD> wrt,
                          const GradcheckOptions& options) {
  GradcheckReport report;
  Rng rng(options.seed);

  TensorD out;
  for (;;) {
    KinkMonitor monitor(options.kink_threshold);
    out = fn();
    if (!monitor.tripped() || report.resamples >= options.max_resamples) break;
    ++report.resamples;
    for (auto& t : wrt)
      for (auto& v : t.data()) v = rng.uniform(options.sample_lo, options.sample_hi);
  }

  const TensorD proj = TensorD::uniform(out.shape(), -1.0, 1.0, rng);
  for (auto& t : wrt) {
    require(t.requires_grad(), "gradcheck: every checked tensor must require grad");
    t.zero_grad();
  }
  sum(mul(out, proj)).backward();

  std::vector<std::vector<double>> analytic;
  for (const auto& t : wrt) {
    analytic.push_back(t.grad());
    for (double g : analytic.back()) {
      if (!std::isfinite(g)) {
        report.message = "non-finite analytic gradient";
        report.max_rel_err = std::numeric_limits<double>::infinity();
        return report;
      }
    }
  }

  NoGradGuard no_grad;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    auto data = wrt[ti].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + options.eps;
      const double up = projected(fn(), proj);
      data[i] = saved - options.eps;
      const double down = projected(fn(), proj);
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double a = analytic[ti][i];
      if (!std::isfinite(numeric)) {
        report.message = "non-finite numeric gradient";
        report.max_rel_err = std::numeric_limits<double>::infinity();
        return report;
      }
      const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
      const double err = std::abs(a - numeric) / denom;
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        std::ostringstream os;
        os << "worst at input " << ti << " element " << i << ": analytic " << a << " numeric " << numeric;
        report.message = os.str();
      }
      ++report.checked;
    }
  }
  report.pass = report.max_rel_err < options.tolerance;
  return report;
}

GradcheckReport gradcheck(const std::function<TensorD(const std::vector<TensorD>&)>& op,
                          const std::vector<Shape>& input_shapes, double tolerance, std::uint64_t seed) {
  GradcheckOptions options;
  options.tolerance = tolerance;
  options.seed = seed;
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<TensorD> inputs;
  for (const auto& s : input_shapes) {
    inputs.push_back(TensorD::uniform(s, options.sample_lo, options.sample_hi, rng));
    inputs.back().set_requires_grad(true);
  }
  return gradcheck([&] { return op(inputs); }, inputs, options);
}

}  // namespace epca
