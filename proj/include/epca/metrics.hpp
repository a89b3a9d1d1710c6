#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace epca {

/// Per-sample scores: one positive-class score per sample (columns = 1) or
/// a row-major N x K probability matrix (columns = K).
struct Scores {
  std::vector<double> values;
  int columns = 1;
};

struct EvalReport {
  int num_classes = 0;
  std::vector<std::vector<std::int64_t>> confusion;  // rows true, cols predicted
  std::int64_t total = 0;
  double acc = 0.0;
  double sen = 0.0;  // macro recall over classes present in y_true
  double f1 = 0.0;   // macro F1 over the same classes
  double kappa = 0.0;
  std::optional<double> auc;
  std::vector<std::string> warnings;

  std::string csv() const;
  std::string table() const;
};

/// num_classes = 0 infers max label + 1 (at least 2).
EvalReport evaluate(std::span<const int> y_true, std::span<const int> y_pred, const std::optional<Scores>& scores = {},
                    int num_classes = 0);

/// Area under the ROC curve of positive-class scores, ties credited 1/2.
double roc_auc(std::span<const int> is_positive, std::span<const double> scores);

}  // namespace epca
