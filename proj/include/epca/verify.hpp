#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "epca/gradcheck.hpp"

namespace epca {

struct SuiteCase {
  std::string name;
  GradcheckReport report;
  double seconds = 0.0;
};

struct SuiteResult {
  std::vector<SuiteCase> cases;
  double max_rel_err = 0.0;
  double seconds = 0.0;
  bool pass = false;

  std::string table() const;
};

/// Every differentiable op, attention building block and attention module,
/// in f64.
std::vector<std::string> gradcheck_case_names();

/// Runs the cases whose name contains `filter` (all when empty).
SuiteResult run_gradcheck_suite(std::uint64_t seed = 0, const std::string& filter = "", double tolerance = 1e-4);

}  // namespace epca
