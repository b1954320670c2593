#include "sartm/model.hpp"

#include <cmath>
#include <cstring>

#include "sartm/ops.hpp"

SARTM_NS_BEGIN

namespace {

Rng init_stream(uint64_t seed) { return Rng::stream(seed, "init"); }

}  // namespace

SartmModel::SartmModel(const ModelConfig& cfg, int64_t height, int64_t width,
                       uint64_t seed)
    : cfg_(cfg),
      encoder_([&] {
        Rng rng = init_stream(seed);
        return HierarchicalEncoder(cfg.encoder, height, width, rng);
      }()) {
  // Sub-module initializers draw from disjoint named streams so that e.g.
  // changing decoder depth does not shift the encoder's draws.
  Rng rng_pyr = Rng::stream(seed, "init.pyramid");
  pyramid_ = PyramidNetwork(cfg.encoder, cfg.fusion_levels, rng_pyr);
  Rng rng_fuse = Rng::stream(seed, "init.fusion");
  fusion_ = ModalityFusion(cfg.encoder.embed_dim, cfg.text_dim,
                           cfg.encoder.modalities, rng_fuse);
  Rng rng_dec = Rng::stream(seed, "init.decoder");
  main_decoder_ = MainDecoder(cfg.decoder, cfg.encoder.embed_dim, rng_dec);
  Rng rng_aux = Rng::stream(seed, "init.aux");
  aux_head_ = AuxiliaryHead(cfg.decoder.num_classes, cfg.encoder.embed_dim, rng_aux);
  Rng rng_cls = Rng::stream(seed, "init.classifier");
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.encoder.embed_dim));
  classifier_ = Tensor::uniform({cfg.encoder.embed_dim, cfg.decoder.num_classes},
                                rng_cls, -bound, bound)
                    .set_requires_grad(true);

  encoder_.collect_params(params_, "encoder");
  pyramid_.collect_params(params_, "pyramid");
  fusion_.collect_params(params_, "fusion");
  main_decoder_.collect_params(params_, "decoder");
  aux_head_.collect_params(params_, "aux");
  params_.add("classifier.w", classifier_);
}

SartmModel::Output SartmModel::forward(const Tensor& rgb, const Tensor& thermal,
                                       const Tensor& teacher) const {
  if (thermal.rank() != 3 || thermal.dim(0) != 1) {
    throw ShapeError("forward: thermal must be [1,H,W], got " +
                     shape_str(thermal.shape()));
  }
  Tensor thermal3 = concat({thermal, thermal, thermal}, 0);

  std::map<std::string, FeaturePyramid> pyramids;
  pyramids.emplace("rgb", pyramid_.build(encoder_.encode(rgb, "rgb")));
  pyramids.emplace("thermal", pyramid_.build(encoder_.encode(thermal3, "thermal")));

  Output out;
  out.fused = fusion_.fuse(pyramids, teacher);
  out.logits.s0 = main_decoder_.decode(out.fused);
  out.logits.s1 = aux_head_.decode(out.fused);
  return out;
}

LabelMap SartmModel::predict(const Tensor& rgb, const Tensor& thermal,
                             const Tensor& teacher, int64_t label_h,
                             int64_t label_w) const {
  NoGradGuard no_grad;
  Output out = forward(rgb, thermal, teacher);
  Tensor s0 = out.logits.s0;
  const int64_t h0 = s0.dim(1), w0 = s0.dim(2);
  if (label_h % h0 != 0 || label_w % w0 != 0 || label_h / h0 != label_w / w0) {
    throw ShapeError("predict: label geometry is not an integral upscale");
  }
  const int factor = static_cast<int>(label_h / h0);
  if (factor > 1) s0 = bilinear_upsample(s0, factor);

  const int64_t classes = s0.dim(0);
  const int64_t t = label_h * label_w;
  LabelMap pred;
  pred.height = label_h;
  pred.width = label_w;
  pred.values.resize(static_cast<size_t>(t));
  const auto& sv = s0.data();
  for (int64_t p = 0; p < t; ++p) {
    int32_t best = 0;
    Scalar best_v = sv[static_cast<size_t>(p)];
    for (int64_t c = 1; c < classes; ++c) {
      const Scalar v = sv[static_cast<size_t>(c * t + p)];
      if (v > best_v) {
        best_v = v;
        best = static_cast<int32_t>(c);
      }
    }
    pred.values[static_cast<size_t>(p)] = best;
  }
  return pred;
}

uint64_t SartmModel::frozen_checksum() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& e : params_.entries()) {
    if (e.tensor.requires_grad()) continue;
    const auto& v = e.tensor.data();
    const unsigned char* bytes = reinterpret_cast<const unsigned char*>(v.data());
    for (size_t i = 0; i < v.size() * sizeof(Scalar); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

SARTM_NS_END
