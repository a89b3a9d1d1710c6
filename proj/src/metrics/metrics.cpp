#include "epca/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "epca/error.hpp"

namespace epca {

double roc_auc(std::span<const int> is_positive, std::span<const double> scores) {
  require(is_positive.size() == scores.size(), "roc_auc: label and score counts differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::int64_t pos = 0, neg = 0;
  for (int p : is_positive) (p ? pos : neg) += 1;
  require(pos > 0 && neg > 0, "roc_auc needs both positive and negative samples");
  // Sum over positives of (#negatives below + 1/2 #negatives tied), in
  // half-units to stay exact.
  std::int64_t twice = 0, neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::int64_t gp = 0, gn = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (is_positive[order[j]] ? gp : gn) += 1;
      ++j;
    }
    twice += gp * (2 * neg_below + gn);
    neg_below += gn;
    i = j;
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

EvalReport evaluate(std::span<const int> y_true, std::span<const int> y_pred, const std::optional<Scores>& scores,
                    int num_classes) {
  require(y_true.size() == y_pred.size(), "evaluate: y_true and y_pred lengths differ");
  require(!y_true.empty(), "evaluate: no samples");
  int k = num_classes;
  if (k <= 0) {
    int mx = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i) mx = std::max({mx, y_true[i], y_pred[i]});
    k = std::max(2, mx + 1);
  }
  EvalReport r;
  r.num_classes = k;
  r.confusion.assign(k, std::vector<std::int64_t>(k, 0));
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    require(y_true[i] >= 0 && y_true[i] < k && y_pred[i] >= 0 && y_pred[i] < k,
            "evaluate: label outside [0, " + std::to_string(k) + ")");
    r.confusion[y_true[i]][y_pred[i]] += 1;
  }
  const auto n = static_cast<std::int64_t>(y_true.size());
  r.total = n;
  std::vector<std::int64_t> row(k, 0), col(k, 0);
  std::int64_t diag = 0;
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < k; ++b) {
      row[a] += r.confusion[a][b];
      col[b] += r.confusion[a][b];
      if (a == b) diag += r.confusion[a][b];
    }
  r.acc = static_cast<double>(diag) / static_cast<double>(n);

  double sen_sum = 0.0, f1_sum = 0.0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    if (row[c] == 0) continue;
    ++present;
    const double tp = static_cast<double>(r.confusion[c][c]);
    sen_sum += tp / static_cast<double>(row[c]);
    const double denom = static_cast<double>(row[c] + col[c]);
    f1_sum += 2.0 * tp / denom;
  }
  if (present < k)
    r.warnings.push_back(std::to_string(k - present) +
                         " class(es) absent from y_true; excluded from macro sensitivity/F1");
  r.sen = sen_sum / present;
  r.f1 = f1_sum / present;

  const double po = r.acc;
  double pe = 0.0;
  for (int c = 0; c < k; ++c) pe += static_cast<double>(row[c]) * static_cast<double>(col[c]);
  pe /= static_cast<double>(n) * static_cast<double>(n);
  r.kappa = pe >= 1.0 ? 0.0 : (po - pe) / (1.0 - pe);

  if (scores) {
    const auto& s = *scores;
    if (k > 2) {
      r.warnings.push_back("AUC omitted: defined here for binary tasks only");
    } else if (s.columns != 1 && s.columns != k) {
      throw ArgumentError("evaluate: score matrix has " + std::to_string(s.columns) + " columns for " +
                          std::to_string(k) + " classes");
    } else {
      require(s.values.size() == static_cast<std::size_t>(n) * s.columns, "evaluate: score count does not match samples");
      std::vector<int> pos(n);
      std::vector<double> sc(n);
      for (std::int64_t i = 0; i < n; ++i) {
        pos[i] = y_true[i] == 1;
        sc[i] = s.columns == 1 ? s.values[i] : s.values[i * s.columns + 1];
      }
      if (row[0] == 0 || row[1] == 0)
        r.warnings.push_back("AUC omitted: y_true contains a single class");
      else
        r.auc = roc_auc(pos, sc);
    }
  }
  return r;
}

std::string EvalReport::csv() const {
  std::ostringstream os;
  char buf[64];
  auto num = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return std::string(buf);
  };
  os << "metric,value\n";
  os << "samples," << total << "\n";
  os << "acc," << num(acc) << "\n";
  os << "sen_macro," << num(sen) << "\n";
  os << "f1_macro," << num(f1) << "\n";
  os << "kappa," << num(kappa) << "\n";
  os << "auc," << (auc ? num(*auc) : "") << "\n";
  for (int a = 0; a < num_classes; ++a)
    for (int b = 0; b < num_classes; ++b)
      os << "confusion_" << a << "_" << b << "," << confusion[a][b] << "\n";
  return os.str();
}

std::string EvalReport::table() const {
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "ACC %.4f  Sen %.4f  F1 %.4f  kappa %.4f  AUC %s\n", acc, sen, f1, kappa,
                auc ? std::to_string(*auc).c_str() : "n/a");
  os << buf;
  os << "confusion (rows true, cols predicted)\n";
  for (int a = 0; a < num_classes; ++a) {
    for (int b = 0; b < num_classes; ++b) {
      std::snprintf(buf, sizeof(buf), "%8lld", static_cast<long long>(confusion[a][b]));
      os << buf;
    }
    os << "\n";
  }
  os << "Sen and F1 are macro averages over classes present in the ground truth.\n";
  for (const auto& w : warnings) os << "warning: " << w << "\n";
  return os.str();
}

}  // namespace epca
