#include "sartm/pyramid.hpp"

#include <algorithm>
#include <cmath>

SARTM_NS_BEGIN

namespace {

Tensor init_conv1x1(int64_t cout, int64_t cin, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(cin));
  return Tensor::uniform({cout, cin, 1, 1}, rng, -bound, bound);
}

}  // namespace

PyramidNetwork::PyramidNetwork(const EncoderConfig& enc,
                               std::vector<int> fuse_levels, Rng& rng)
    : num_stages_(enc.num_stages),
      dim_(enc.embed_dim),
      fuse_levels_(std::move(fuse_levels)) {
  if (dim_ % 8 != 0) {
    throw ConfigError("pyramid: embed_dim " + std::to_string(dim_) +
                      " not divisible by 8");
  }
  const int n = num_stages_ - 1;
  for (int lvl : fuse_levels_) {
    if (lvl < 0 || lvl >= n) {
      throw ContractError("pyramid: fuse level " + std::to_string(lvl) +
                          " has no deeper layer (stages: " +
                          std::to_string(num_stages_) + ")");
    }
  }
  for (int i = 0; i < num_stages_; ++i) {
    lateral_w_.push_back(init_conv1x1(dim_, enc.stage_width(i), rng).set_requires_grad(true));
    lateral_b_.push_back(Tensor::zeros({dim_}).set_requires_grad(true));
  }
  reduce0_w_ = init_conv1x1(dim_ / 8, dim_, rng).set_requires_grad(true);
  reduce0_b_ = Tensor::zeros({dim_ / 8}).set_requires_grad(true);
  reduce1_w_ = init_conv1x1(dim_ / 4, dim_, rng).set_requires_grad(true);
  reduce1_b_ = Tensor::zeros({dim_ / 4}).set_requires_grad(true);
}

Tensor PyramidNetwork::lateral(const Tensor& stage_map, int stage) const {
  return add_channel_bias(
      conv2d(stage_map, lateral_w_[static_cast<size_t>(stage)], 1, 0),
      lateral_b_[static_cast<size_t>(stage)]);
}

std::vector<Tensor> PyramidNetwork::topdown_fuse(
    const std::vector<Tensor>& laterals) const {
  if (static_cast<int>(laterals.size()) != num_stages_) {
    throw ShapeError("topdown_fuse: expected " + std::to_string(num_stages_) +
                     " levels, got " + std::to_string(laterals.size()));
  }
  std::vector<Tensor> fused(laterals.size());
  const int n = num_stages_ - 1;
  fused[static_cast<size_t>(n)] = laterals[static_cast<size_t>(n)];
  for (int i = n - 1; i >= 0; --i) {
    const bool in_set = std::find(fuse_levels_.begin(), fuse_levels_.end(), i) !=
                        fuse_levels_.end();
    if (in_set) {
      Tensor up = bilinear_upsample(fused[static_cast<size_t>(i + 1)], 2);
      fused[static_cast<size_t>(i)] =
          mul_scalar(laterals[static_cast<size_t>(i)] + up, Scalar(0.5));
    } else {
      fused[static_cast<size_t>(i)] = laterals[static_cast<size_t>(i)];
    }
  }
  return fused;
}

std::pair<Tensor, Tensor> PyramidNetwork::reduce_channels(const Tensor& f0,
                                                          const Tensor& f1) const {
  Tensor ffp = add_channel_bias(conv2d(f0, reduce0_w_, 1, 0), reduce0_b_);
  Tensor ifp = add_channel_bias(conv2d(f1, reduce1_w_, 1, 0), reduce1_b_);
  return {ffp, ifp};
}

FeaturePyramid PyramidNetwork::build(const StageOutput& stages) const {
  std::vector<Tensor> laterals;
  laterals.reserve(stages.maps.size());
  for (int i = 0; i < static_cast<int>(stages.maps.size()); ++i) {
    laterals.push_back(lateral(stages.maps[static_cast<size_t>(i)], i));
  }
  std::vector<Tensor> fused = topdown_fuse(laterals);
  auto [ffp, ifp] = reduce_channels(fused[0], fused[1]);
  FeaturePyramid out;
  out.sfm = fused.back();
  out.ifp = ifp;
  out.ffp = ffp;
  return out;
}

void PyramidNetwork::collect_params(ParamRegistry& reg, const std::string& prefix) {
  for (int i = 0; i < num_stages_; ++i) {
    reg.add(prefix + ".lateral" + std::to_string(i) + ".w",
            lateral_w_[static_cast<size_t>(i)]);
    reg.add(prefix + ".lateral" + std::to_string(i) + ".b",
            lateral_b_[static_cast<size_t>(i)]);
  }
  reg.add(prefix + ".reduce0.w", reduce0_w_);
  reg.add(prefix + ".reduce0.b", reduce0_b_);
  reg.add(prefix + ".reduce1.w", reduce1_w_);
  reg.add(prefix + ".reduce1.b", reduce1_b_);
}

ModalityFusion::ModalityFusion(int64_t dim, int64_t text_dim,
                               const std::vector<std::string>& modalities,
                               Rng& rng)
    : dim_(dim), text_dim_(text_dim), modalities_(modalities) {
  const int64_t m = static_cast<int64_t>(modalities_.size());
  const int64_t level_dims[3] = {dim_ / 8, dim_ / 4, dim_};
  for (int lvl = 0; lvl < 3; ++lvl) {
    gate_logits_[lvl] = Tensor::zeros({m}).set_requires_grad(true);
    const double bound = 1.0 / std::sqrt(static_cast<double>(text_dim_));
    lang_proj_[lvl] =
        Tensor::uniform({text_dim_, level_dims[lvl]}, rng, -bound, bound)
            .set_requires_grad(true);
    refine_w_[lvl] =
        init_conv1x1(level_dims[lvl], level_dims[lvl], rng).set_requires_grad(true);
    refine_b_[lvl] = Tensor::zeros({level_dims[lvl]}).set_requires_grad(true);
  }
}

namespace {

const Tensor& level_map(const FeaturePyramid& p, int level) {
  switch (level) {
    case 0: return p.ffp;
    case 1: return p.ifp;
    default: return p.sfm;
  }
}

}  // namespace

Tensor ModalityFusion::fuse_level(int level, const std::vector<Tensor>& maps,
                                  const Tensor& teacher_embeddings) const {
  const Shape& ref = maps[0].shape();
  for (const Tensor& m : maps) {
    if (m.shape() != ref) {
      throw FusionError("fuse: modality geometry mismatch " + shape_str(ref) +
                        " vs " + shape_str(m.shape()));
    }
  }
  const int64_t m = static_cast<int64_t>(maps.size());

  // Language bias: project the mean teacher embedding into feature space and
  // dot it with each modality's pooled features.
  Tensor tmean = reshape(mean_axes(teacher_embeddings, {0}), {1, text_dim_});
  Tensor tproj = matmul(tmean, lang_proj_[level]);  // [1, c]

  std::vector<Tensor> logits;
  logits.reserve(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) {
    Tensor pooled = reshape(mean_axes(maps[static_cast<size_t>(i)], {1, 2}),
                            {ref[0], 1});
    Tensor bias = reshape(matmul(tproj, pooled), {1});
    logits.push_back(slice(gate_logits_[level], 0, i, 1) + bias);
  }
  Tensor alpha = softmax(concat(logits, 0), 0);  // [M]

  Tensor weighted;
  for (int64_t i = 0; i < m; ++i) {
    Tensor term = mul_scalar_tensor(maps[static_cast<size_t>(i)], slice(alpha, 0, i, 1));
    weighted = (i == 0) ? term : weighted + term;
  }
  return add_channel_bias(conv2d(weighted, refine_w_[level], 1, 0),
                          refine_b_[level]);
}

Tensor ModalityFusion::gate_weights(int level,
                                    const std::map<std::string, FeaturePyramid>& pyramids,
                                    const Tensor& teacher_embeddings) const {
  std::vector<Tensor> maps;
  for (const auto& [name, p] : pyramids) maps.push_back(level_map(p, level));
  const int64_t m = static_cast<int64_t>(maps.size());
  Tensor tmean = reshape(mean_axes(teacher_embeddings, {0}), {1, text_dim_});
  Tensor tproj = matmul(tmean, lang_proj_[level]);
  std::vector<Tensor> logits;
  for (int64_t i = 0; i < m; ++i) {
    Tensor pooled = reshape(mean_axes(maps[static_cast<size_t>(i)], {1, 2}),
                            {maps[static_cast<size_t>(i)].dim(0), 1});
    Tensor bias = reshape(matmul(tproj, pooled), {1});
    logits.push_back(slice(gate_logits_[level], 0, i, 1) + bias);
  }
  return softmax(concat(logits, 0), 0);
}

FeaturePyramid ModalityFusion::fuse(
    const std::map<std::string, FeaturePyramid>& pyramids,
    const Tensor& teacher_embeddings) const {
  if (pyramids.empty()) throw FusionError("fuse: no modalities");
  std::vector<Tensor> sfm, ifp, ffp;
  for (const auto& [name, p] : pyramids) {
    sfm.push_back(p.sfm);
    ifp.push_back(p.ifp);
    ffp.push_back(p.ffp);
  }
  FeaturePyramid out;
  out.ffp = fuse_level(0, ffp, teacher_embeddings);
  out.ifp = fuse_level(1, ifp, teacher_embeddings);
  out.sfm = fuse_level(2, sfm, teacher_embeddings);
  return out;
}

void ModalityFusion::collect_params(ParamRegistry& reg, const std::string& prefix) {
  const char* names[3] = {"ffp", "ifp", "sfm"};
  for (int lvl = 0; lvl < 3; ++lvl) {
    const std::string lp = prefix + "." + names[lvl];
    reg.add(lp + ".gates", gate_logits_[lvl]);
    reg.add(lp + ".lang_proj", lang_proj_[lvl]);
    reg.add(lp + ".refine.w", refine_w_[lvl]);
    reg.add(lp + ".refine.b", refine_b_[lvl]);
  }
}

SARTM_NS_END
