#pragma once

#include <vector>

#include "sartm/labelmap.hpp"
#include "sartm/ops.hpp"

SARTM_NS_BEGIN

// Weights of the composite objective; defaults follow the reference training
// recipe (w1/w2/w3 tuned there for full-scale runs).
struct LossWeights {
  double w0 = 1.0;
  double w1 = 0.008;
  double w2 = 10000.0;
  double w3 = 100.0;
};

struct LossValue {
  Tensor loss;
  bool warning = false;  // degenerate input (e.g. all pixels ignored)
};

// Online hard example mining cross-entropy: per-pixel CE over valid pixels,
// averaged over the hardest set. Hard pixels are those whose predicted
// probability of the true class falls below `threshold`; the set is padded to
// at least n_valid/16 pixels by descending CE (ties broken by pixel index).
LossValue ohem_ce(const Tensor& logits, const LabelMap& labels,
                  double threshold = 0.7);

// Mean cross-entropy over valid rows of [rows, classes] logits.
LossValue masked_ce_mean(const Tensor& logits, const std::vector<int32_t>& labels);

struct ClassPrototypes {
  Tensor features;             // [num_classes, d] (zero rows for absent classes)
  std::vector<bool> present;   // class had at least one labeled pixel
  std::vector<int64_t> counts;
};

// Mask average pooling: per-class mean of feature vectors under the label
// mask. Labels are nearest-downsampled to the feature geometry.
ClassPrototypes mask_average_pool(const Tensor& features, const LabelMap& labels,
                                  int num_classes);

// Per-pixel CE of a linear classifier over the fused feature map (the
// KL(one-hot || prediction) reading of the consistency loss).
LossValue l_cr(const Tensor& features, const LabelMap& labels,
               const Tensor& classifier);

// Self-similarity distillation: KL between the row-softmaxed cosine matrices
// of student class prototypes and teacher embeddings, restricted to classes
// present in the batch. Gradients reach the student side only.
LossValue l_se(const ClassPrototypes& prototypes, const Tensor& teacher,
               double tau = 0.07);

struct LossBreakdown {
  Tensor total;
  double ce0 = 0, ce1 = 0, cr = 0, se = 0;
  bool warn_ce = false, warn_cr = false, warn_se = false;
};

// Composite objective. Both heads are bilinearly upsampled to the label
// resolution before the OHEM terms; the consistency/distillation terms use
// the fused semantic map.
LossBreakdown total_loss(const Tensor& s0, const Tensor& s1,
                         const LabelMap& labels, const Tensor& fused_sfm,
                         const Tensor& teacher, const Tensor& classifier,
                         const LossWeights& w, double ohem_threshold = 0.7,
                         double tau = 0.07);

SARTM_NS_END
