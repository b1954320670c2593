#include "sartm/metrics.hpp"

#include <string>

SARTM_NS_BEGIN

MetricsReport evaluate(const LabelMap& pred, const LabelMap& truth,
                       int num_classes, bool absent_scores_zero) {
  if (pred.height != truth.height || pred.width != truth.width) {
    throw ShapeError("evaluate: prediction " + std::to_string(pred.height) + "x" +
                     std::to_string(pred.width) + " vs truth " +
                     std::to_string(truth.height) + "x" +
                     std::to_string(truth.width));
  }
  MetricsReport r;
  r.num_classes = num_classes;
  r.confusion.assign(static_cast<size_t>(num_classes) * num_classes, 0);
  const int64_t t = truth.numel();
  for (int64_t p = 0; p < t; ++p) {
    const int32_t tv = truth.values[static_cast<size_t>(p)];
    if (tv == kIgnoreLabel) continue;
    const int32_t pv = pred.values[static_cast<size_t>(p)];
    if (tv < 0 || tv >= num_classes || pv < 0 || pv >= num_classes) {
      throw ContractError("evaluate: label outside [0, " +
                          std::to_string(num_classes) + ")");
    }
    ++r.confusion[static_cast<size_t>(tv * num_classes + pv)];
  }

  r.iou.assign(static_cast<size_t>(num_classes), -1.0);
  r.acc.assign(static_cast<size_t>(num_classes), -1.0);
  r.f1.assign(static_cast<size_t>(num_classes), -1.0);
  r.present.assign(static_cast<size_t>(num_classes), false);

  double sum_iou = 0, sum_acc = 0, sum_f1 = 0;
  int counted = 0;
  for (int k = 0; k < num_classes; ++k) {
    int64_t tp = r.count(k, k), fp = 0, fn = 0;
    for (int j = 0; j < num_classes; ++j) {
      if (j == k) continue;
      fp += r.count(j, k);
      fn += r.count(k, j);
    }
    const bool in_truth = (tp + fn) > 0;
    r.present[static_cast<size_t>(k)] = in_truth;
    if (!in_truth && !absent_scores_zero) continue;

    const double iou =
        in_truth || fp > 0
            ? static_cast<double>(tp) / static_cast<double>(tp + fp + fn)
            : 0.0;
    const double acc =
        in_truth ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    const double f1 =
        (2 * tp + fp + fn) > 0
            ? static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn)
            : 0.0;
    r.iou[static_cast<size_t>(k)] = in_truth ? iou : 0.0;
    r.acc[static_cast<size_t>(k)] = acc;
    r.f1[static_cast<size_t>(k)] = in_truth ? f1 : 0.0;
    sum_iou += r.iou[static_cast<size_t>(k)];
    sum_acc += acc;
    sum_f1 += r.f1[static_cast<size_t>(k)];
    ++counted;
  }
  if (counted > 0) {
    r.miou = sum_iou / counted;
    r.macc = sum_acc / counted;
    r.mf1 = sum_f1 / counted;
  }
  return r;
}

SARTM_NS_END
