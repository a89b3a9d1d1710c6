#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "epca/tensor.hpp"

namespace epca {

struct GradcheckOptions {
  double tolerance = 1e-4;
  double eps = 1e-5;
  /// Inputs are resampled when any relu input (or max-pool runner-up gap)
  /// falls within this distance of a kink.
  double kink_threshold = 1e-3;
  int max_resamples = 50;
  /// Relative error is |a - n| / max(|a|, |n|, floor); below the floor the
  /// comparison is absolute.
  double denominator_floor = 1e-3;
  double sample_lo = -1.0;
  double sample_hi = 1.0;
  std::uint64_t seed = 0;
};

struct GradcheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::size_t checked = 0;
  int resamples = 0;
  std::string message;
};

/// Compares reverse-mode gradients of a random projection of fn() with
/// central finite differences over every element of `wrt`. fn must be
/// deterministic (reseed any RNG it uses on each call).
GradcheckReport gradcheck(const std::function<TensorD()>& fn, std::vector<TensorD> wrt,
                          const GradcheckOptions& options = {});

/// Samples inputs of the given shapes uniformly and checks op(inputs).
GradcheckReport gradcheck(const std::function<TensorD(const std::vector<TensorD>&)>& op,
                          const std::vector<Shape>& input_shapes, double tolerance, std::uint64_t seed = 0);

}  // namespace epca
