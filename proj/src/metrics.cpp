#include "dnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "dnet/error.hpp"
#include "dnet/text_config.hpp"

namespace dnet::metrics {

namespace {

void check_inputs(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size())
    throw ShapeError(fmt::format("metrics: {} scores for {} labels", scores.size(), labels.size()));
  if (scores.empty()) throw ShapeError("metrics: empty input");
  for (std::uint8_t y : labels)
    if (y > 1) throw ShapeError("metrics: labels must be 0 or 1");
  for (double v : scores)
    if (std::isnan(v)) throw NumericError("metrics: NaN score");
}

}  // namespace

ConfusionMatrix confusion(std::span<const double> scores, std::span<const std::uint8_t> labels,
                          double threshold) {
  check_inputs(scores, labels);
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (labels[i]) {
      predicted ? ++cm.tp : ++cm.fn;
    } else {
      predicted ? ++cm.fp : ++cm.tn;
    }
  }
  return cm;
}

std::pair<double, double> fpr_tpr(const ConfusionMatrix& cm) {
  if (cm.fp + cm.tn == 0) throw ShapeError("fpr_tpr: no negative samples");
  if (cm.tp + cm.fn == 0) throw ShapeError("fpr_tpr: no positive samples");
  const double fpr = static_cast<double>(cm.fp) / static_cast<double>(cm.fp + cm.tn);
  const double tpr = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fn);
  return {fpr, tpr};
}

double accuracy(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ShapeError("accuracy: empty confusion matrix");
  return static_cast<double>(cm.tp + cm.tn) / static_cast<double>(cm.total());
}

RocCurve roc_curve(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_inputs(scores, labels);
  const std::size_t positives = std::count(labels.begin(), labels.end(), std::uint8_t{1});
  if (positives == 0 || positives == labels.size())
    throw ShapeError("roc_curve: both classes must be present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve curve;
  // Lowering the threshold past each distinct score moves the whole tie group
  // to the positive side at once; the running counts are the confusion matrix
  // at that threshold.
  ConfusionMatrix cm;
  cm.fn = positives;
  cm.tn = labels.size() - positives;
  curve.points.push_back(RocPoint{0.0, 0.0});
  curve.thresholds.push_back(std::numeric_limits<double>::infinity());
  std::size_t i = 0;
  while (i < order.size()) {
    const double threshold = scores[order[i]];
    while (i < order.size() && scores[order[i]] == threshold) {
      if (labels[order[i]]) {
        ++cm.tp;
        --cm.fn;
      } else {
        ++cm.fp;
        --cm.tn;
      }
      ++i;
    }
    const auto [fpr, tpr] = fpr_tpr(cm);
    curve.points.push_back(RocPoint{fpr, tpr});
    curve.thresholds.push_back(threshold);
  }
  return curve;
}

double auc(const RocCurve& curve) {
  const auto& p = curve.points;
  if (p.size() < 2 || p.front() != RocPoint{0.0, 0.0} || p.back() != RocPoint{1.0, 1.0})
    throw ShapeError("auc: curve must run from (0,0) to (1,1)");
  double area = 0.0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i].fpr < p[i - 1].fpr) throw ShapeError("auc: fpr must be non-decreasing");
    area += (p[i].fpr - p[i - 1].fpr) * (p[i].tpr + p[i - 1].tpr) * 0.5;
  }
  return area;
}

std::string Report::to_text() const {
  std::string out;
  out += fmt::format("model={}\n", model);
  out += fmt::format("auc_roc={}\n", auc_roc);
  out += fmt::format("accuracy={}\n", accuracy);
  out += fmt::format("tp={}\nfp={}\ntn={}\nfn={}\n", confusion.tp, confusion.fp, confusion.tn,
                     confusion.fn);
  out += fmt::format("samples={}\n", samples);
  return out;
}

Report Report::from_text(const std::string& text) {
  Report r;
  for (const auto& [key, value] : text::parse_pairs(text)) {
    if (key == "model") r.model = value;
    else if (key == "auc_roc") r.auc_roc = text::parse_double(key, value);
    else if (key == "accuracy") r.accuracy = text::parse_double(key, value);
    else if (key == "tp") r.confusion.tp = text::parse_size(key, value);
    else if (key == "fp") r.confusion.fp = text::parse_size(key, value);
    else if (key == "tn") r.confusion.tn = text::parse_size(key, value);
    else if (key == "fn") r.confusion.fn = text::parse_size(key, value);
    else if (key == "samples") r.samples = text::parse_size(key, value);
    else throw FormatError("report: unknown key '" + key + "'");
  }
  return r;
}

}  // namespace dnet::metrics
