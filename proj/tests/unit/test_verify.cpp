#include <doctest.h>

#include <set>

#include "epca/verify.hpp"

using namespace epca;

TEST_CASE("gradcheck suite covers the op list and passes") {
  auto names = gradcheck_case_names();
  std::set<std::string> unique(names.begin(), names.end());
  CHECK(unique.size() == names.size());
  for (const char* must : {"conv2d", "batch_norm_train", "adaptive_avg_pool", "max_pool2d", "dropout_train",
                           "softmax_cross_entropy", "scfm_hierarchical", "module_epca_parallel", "module_se",
                           "module_pyramid_cic", "table2_shared_mlp"})
    CHECK(unique.count(must) == 1);

  auto r = run_gradcheck_suite(0);
  INFO(r.table());
  CHECK(r.pass);
  CHECK(r.max_rel_err < 1e-4);
  CHECK(r.cases.size() == names.size());
}

TEST_CASE("suite filter") {
  auto r = run_gradcheck_suite(1, "relu");
  CHECK(r.cases.size() == 1);
  CHECK_THROWS_AS(run_gradcheck_suite(0, "no-such-case"), ArgumentError);
}
