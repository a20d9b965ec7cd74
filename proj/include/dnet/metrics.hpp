#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace dnet::metrics {

/// Label 1 is the positive (cancer) class.
struct ConfusionMatrix {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

/// (0,0) first, (1,1) last, fpr non-decreasing in between.
struct RocCurve {
  std::vector<RocPoint> points;
  /// Threshold of each point; +inf for the leading (0,0).
  std::vector<double> thresholds;
};

/// Predicts positive iff score >= threshold.
ConfusionMatrix confusion(std::span<const double> scores, std::span<const std::uint8_t> labels,
                          double threshold);

/// FPR = FP / (FP + TN), TPR = TP / (TP + FN). Both classes must be present.
std::pair<double, double> fpr_tpr(const ConfusionMatrix& cm);

/// (TP + TN) / total.
double accuracy(const ConfusionMatrix& cm);

/// One point per distinct score, swept from the highest score downward. Tied
/// scores share one point, which together with trapezoidal integration counts
/// a tied positive/negative pair as one half.
RocCurve roc_curve(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Trapezoidal area under the curve.
double auc(const RocCurve& curve);

/// Flat key/value evaluation record.
struct Report {
  std::string model;
  double auc_roc = 0.0;
  double accuracy = 0.0;
  ConfusionMatrix confusion;
  std::size_t samples = 0;

  /// `key=value` lines: model, auc_roc, accuracy, tp, fp, tn, fn, samples.
  std::string to_text() const;
  static Report from_text(const std::string& text);
};

}  // namespace dnet::metrics
