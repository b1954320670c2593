#pragma once

#include <vector>

#include "sartm/labelmap.hpp"

SARTM_NS_BEGIN

struct MetricsReport {
  int num_classes = 0;
  std::vector<int64_t> confusion;  // [truth * num_classes + pred]
  std::vector<double> iou;         // per class; -1 when excluded
  std::vector<double> acc;
  std::vector<double> f1;
  std::vector<bool> present;       // class occurs in ground truth
  double miou = 0;
  double macc = 0;
  double mf1 = 0;

  int64_t count(int truth, int pred) const {
    return confusion[static_cast<size_t>(truth * num_classes + pred)];
  }
};

// Confusion-matrix metrics over valid (non-255) pixels. Classes absent from
// the ground truth are excluded from the means unless absent_scores_zero is
// set, in which case they contribute 0.
MetricsReport evaluate(const LabelMap& pred, const LabelMap& truth,
                       int num_classes, bool absent_scores_zero = false);

SARTM_NS_END
