#pragma once

#include <map>
#include <string>
#include <vector>

#include "sartm/encoder.hpp"
#include "sartm/ops.hpp"
#include "sartm/params.hpp"

SARTM_NS_BEGIN

// Per-modality (or fused) multi-scale features: the coarse semantic map plus
// the intermediate and fine pyramids with reduced channel counts.
struct FeaturePyramid {
  Tensor sfm;  // [d,   H_n, W_n]
  Tensor ifp;  // [d/4, H_1, W_1]
  Tensor ffp;  // [d/8, H_0, W_0]
};

// Lateral 1x1 convolutions, top-down averaging fusion, and channel reduction
// of the two fine levels. Conv parameters are shared across modalities.
class PyramidNetwork {
 public:
  PyramidNetwork() = default;
  PyramidNetwork(const EncoderConfig& enc, std::vector<int> fuse_levels, Rng& rng);

  // 1x1 conv of a stage map to d channels.
  Tensor lateral(const Tensor& stage_map, int stage) const;
  // Eq-style top-down pass: deepest level passes through, fused levels are
  // the arithmetic mean of the lateral map and the upsampled deeper output.
  std::vector<Tensor> topdown_fuse(const std::vector<Tensor>& laterals) const;
  // Reduce level 0 to d/8 channels and level 1 to d/4.
  std::pair<Tensor, Tensor> reduce_channels(const Tensor& f0, const Tensor& f1) const;

  FeaturePyramid build(const StageOutput& stages) const;

  const std::vector<int>& fuse_levels() const { return fuse_levels_; }
  void collect_params(ParamRegistry& reg, const std::string& prefix);

 private:
  int num_stages_ = 0;
  int64_t dim_ = 0;
  std::vector<int> fuse_levels_;
  std::vector<Tensor> lateral_w_, lateral_b_;  // per stage, [d, C_i, 1, 1]
  Tensor reduce0_w_, reduce0_b_;               // d -> d/8
  Tensor reduce1_w_, reduce1_b_;               // d -> d/4
};

// Softmax-gated weighted average over modalities with a language-conditioned
// bias on the gate logits, followed by a 1x1 refinement per level.
class ModalityFusion {
 public:
  ModalityFusion() = default;
  ModalityFusion(int64_t dim, int64_t text_dim,
                 const std::vector<std::string>& modalities, Rng& rng);

  FeaturePyramid fuse(const std::map<std::string, FeaturePyramid>& pyramids,
                      const Tensor& teacher_embeddings) const;

  // Gate weights for one level (for tests); level in {0 = ffp, 1 = ifp, 2 = sfm}.
  Tensor gate_weights(int level,
                      const std::map<std::string, FeaturePyramid>& pyramids,
                      const Tensor& teacher_embeddings) const;

  void collect_params(ParamRegistry& reg, const std::string& prefix);

 private:
  Tensor fuse_level(int level, const std::vector<Tensor>& maps,
                    const Tensor& teacher_embeddings) const;

  int64_t dim_ = 0, text_dim_ = 0;
  std::vector<std::string> modalities_;
  // index 0 = ffp (d/8), 1 = ifp (d/4), 2 = sfm (d)
  Tensor gate_logits_[3];              // [M] each
  Tensor lang_proj_[3];                // [e, c_level]
  Tensor refine_w_[3], refine_b_[3];   // 1x1, channels preserved
};

SARTM_NS_END
