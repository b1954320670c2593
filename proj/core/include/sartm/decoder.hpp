#pragma once

#include <vector>

#include "sartm/ops.hpp"
#include "sartm/params.hpp"
#include "sartm/pyramid.hpp"

SARTM_NS_BEGIN

struct SegLogits {
  Tensor s0;  // main path,      [num_classes, H_0, W_0]
  Tensor s1;  // auxiliary path, [num_classes, H_0, W_0]
};

struct DecoderConfig {
  int num_classes = 4;  // one learned query per class
  int depth = 2;
  int heads = 2;
};

// Main path: learned class queries cross-attend the flattened semantic map,
// per-pixel logits are query-token dot products, then two upsample+skip
// refinement steps against the intermediate and fine pyramids.
class MainDecoder {
 public:
  MainDecoder() = default;
  MainDecoder(const DecoderConfig& cfg, int64_t dim, Rng& rng);

  Tensor decode(const FeaturePyramid& fp) const;

  void collect_params(ParamRegistry& reg, const std::string& prefix);

 private:
  struct Layer {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor norm1_g, norm1_b, norm2_g, norm2_b;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  };

  Tensor run_layer(const Layer& layer, const Tensor& queries,
                   const Tensor& tokens) const;

  DecoderConfig cfg_;
  int64_t dim_ = 0;
  Tensor queries_;  // [num_classes, dim]
  std::vector<Layer> layers_;
  Tensor final_norm_g_, final_norm_b_;
  Tensor skip_ifp_w_, skip_ifp_b_;  // 1x1: d/4 -> classes
  Tensor skip_ffp_w_, skip_ffp_b_;  // 1x1: d/8 -> classes
};

// Auxiliary path: channel-align the coarse levels to d/8, merge by pixel-wise
// sums across scales, and finish with a 3x3 convolution to class logits.
class AuxiliaryHead {
 public:
  AuxiliaryHead() = default;
  AuxiliaryHead(int num_classes, int64_t dim, Rng& rng);

  Tensor decode(const FeaturePyramid& fp) const;

  void collect_params(ParamRegistry& reg, const std::string& prefix);

 private:
  Tensor align_sfm_w_, align_sfm_b_;  // 1x1: d   -> d/8
  Tensor align_ifp_w_, align_ifp_b_;  // 1x1: d/4 -> d/8
  Tensor out_w_, out_b_;              // 3x3: d/8 -> classes
};

SARTM_NS_END
