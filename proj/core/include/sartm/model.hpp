#pragma once

#include <map>
#include <string>

#include "sartm/decoder.hpp"
#include "sartm/encoder.hpp"
#include "sartm/labelmap.hpp"
#include "sartm/params.hpp"
#include "sartm/pyramid.hpp"

SARTM_NS_BEGIN

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  int64_t text_dim = 64;
  std::vector<int> fusion_levels = {0, 1};
};

// Full segmentation network: shared frozen encoder with per-modality LoRA,
// per-modality pyramids, language-gated fusion, and the two decoding paths.
class SartmModel {
 public:
  SartmModel(const ModelConfig& cfg, int64_t height, int64_t width,
             uint64_t seed);

  struct Output {
    SegLogits logits;
    FeaturePyramid fused;
  };

  // rgb: [3,H,W]; thermal: [1,H,W] (replicated to the encoder's channels).
  Output forward(const Tensor& rgb, const Tensor& thermal,
                 const Tensor& teacher) const;

  // Argmax prediction at label resolution from the main head.
  LabelMap predict(const Tensor& rgb, const Tensor& thermal,
                   const Tensor& teacher, int64_t label_h, int64_t label_w) const;

  const ModelConfig& config() const { return cfg_; }
  const HierarchicalEncoder& encoder() const { return encoder_; }
  HierarchicalEncoder& encoder() { return encoder_; }
  const Tensor& classifier() const { return classifier_; }

  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }

  // FNV-1a checksum over the byte content of all frozen parameters.
  uint64_t frozen_checksum() const;

 private:
  ModelConfig cfg_;
  HierarchicalEncoder encoder_;
  PyramidNetwork pyramid_;
  ModalityFusion fusion_;
  MainDecoder main_decoder_;
  AuxiliaryHead aux_head_;
  Tensor classifier_;  // [d, num_classes] linear probe for the consistency loss
  ParamRegistry params_;
};

SARTM_NS_END
