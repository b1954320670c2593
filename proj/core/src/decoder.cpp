#include "sartm/decoder.hpp"

#include <cmath>

SARTM_NS_BEGIN

namespace {

Tensor init_linear(int64_t fan_in, int64_t fan_out, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform({fan_in, fan_out}, rng, -bound, bound).set_requires_grad(true);
}

Tensor init_conv(int64_t cout, int64_t cin, int k, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
  return Tensor::uniform({cout, cin, k, k}, rng, -bound, bound).set_requires_grad(true);
}

Tensor trainable_zeros(Shape shape) {
  return Tensor::zeros(std::move(shape)).set_requires_grad(true);
}

Tensor trainable_ones(Shape shape) {
  return Tensor::full(std::move(shape), 1).set_requires_grad(true);
}

Tensor flatten_map(const Tensor& map) {
  Tensor x = permute(map, {1, 2, 0});
  return reshape(x, {map.dim(1) * map.dim(2), map.dim(0)});
}

}  // namespace

MainDecoder::MainDecoder(const DecoderConfig& cfg, int64_t dim, Rng& rng)
    : cfg_(cfg), dim_(dim) {
  if (dim % cfg.heads != 0) {
    throw ConfigError("decoder: dim " + std::to_string(dim) +
                      " not divisible by heads " + std::to_string(cfg.heads));
  }
  queries_ = Tensor::uniform({cfg.num_classes, dim}, rng, -0.5, 0.5)
                 .set_requires_grad(true);
  for (int i = 0; i < cfg.depth; ++i) {
    Layer l;
    l.wq = init_linear(dim, dim, rng);
    l.bq = trainable_zeros({dim});
    l.wk = init_linear(dim, dim, rng);
    l.bk = trainable_zeros({dim});
    l.wv = init_linear(dim, dim, rng);
    l.bv = trainable_zeros({dim});
    l.wo = init_linear(dim, dim, rng);
    l.bo = trainable_zeros({dim});
    l.norm1_g = trainable_ones({dim});
    l.norm1_b = trainable_zeros({dim});
    l.norm2_g = trainable_ones({dim});
    l.norm2_b = trainable_zeros({dim});
    l.mlp_w1 = init_linear(dim, dim * 4, rng);
    l.mlp_b1 = trainable_zeros({dim * 4});
    l.mlp_w2 = init_linear(dim * 4, dim, rng);
    l.mlp_b2 = trainable_zeros({dim});
    layers_.push_back(std::move(l));
  }
  final_norm_g_ = trainable_ones({dim});
  final_norm_b_ = trainable_zeros({dim});
  skip_ifp_w_ = init_conv(cfg.num_classes, dim / 4, 1, rng);
  skip_ifp_b_ = trainable_zeros({cfg.num_classes});
  skip_ffp_w_ = init_conv(cfg.num_classes, dim / 8, 1, rng);
  skip_ffp_b_ = trainable_zeros({cfg.num_classes});
}

Tensor MainDecoder::run_layer(const Layer& layer, const Tensor& queries,
                              const Tensor& tokens) const {
  const int64_t c = queries.dim(0), t = tokens.dim(0);
  const int64_t heads = cfg_.heads, dk = dim_ / heads;

  Tensor qn = layer_norm(queries, layer.norm1_g, layer.norm1_b);
  Tensor q = add_bias_lastdim(matmul(qn, layer.wq), layer.bq);
  Tensor k = add_bias_lastdim(matmul(tokens, layer.wk), layer.bk);
  Tensor v = add_bias_lastdim(matmul(tokens, layer.wv), layer.bv);

  auto split = [&](const Tensor& x, int64_t rows) {
    Tensor y = reshape(x, {rows, heads, dk});
    return permute(y, {1, 0, 2});  // [h, rows, dk]
  };
  Tensor qh = split(q, c);
  Tensor kh = split(k, t);
  Tensor vh = split(v, t);

  Tensor scores = mul_scalar(matmul(qh, transpose2(kh)),
                             static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dk))));
  Tensor att = softmax(scores, 2);
  Tensor ctx = matmul(att, vh);        // [h, c, dk]
  ctx = permute(ctx, {1, 0, 2});       // [c, h, dk]
  ctx = reshape(ctx, {c, dim_});
  Tensor out = add_bias_lastdim(matmul(ctx, layer.wo), layer.bo);
  Tensor x = queries + out;

  Tensor xn = layer_norm(x, layer.norm2_g, layer.norm2_b);
  Tensor h = gelu(add_bias_lastdim(matmul(xn, layer.mlp_w1), layer.mlp_b1));
  Tensor m = add_bias_lastdim(matmul(h, layer.mlp_w2), layer.mlp_b2);
  return x + m;
}

Tensor MainDecoder::decode(const FeaturePyramid& fp) const {
  if (fp.sfm.dim(0) != dim_) {
    throw ConfigError("decoder: semantic map has " + std::to_string(fp.sfm.dim(0)) +
                      " channels, expected " + std::to_string(dim_));
  }
  const int64_t hn = fp.sfm.dim(1), wn = fp.sfm.dim(2);
  Tensor tokens = flatten_map(fp.sfm);  // [T, d]

  Tensor q = queries_;
  for (const Layer& layer : layers_) q = run_layer(layer, q, tokens);
  q = layer_norm(q, final_norm_g_, final_norm_b_);

  // Per-pixel logits as query-token dot products.
  Tensor low = matmul(q, transpose2(tokens));  // [classes, T]
  low = reshape(low, {static_cast<int64_t>(cfg_.num_classes), hn, wn});

  Tensor inter = bilinear_upsample(low, 2) +
                 add_channel_bias(conv2d(fp.ifp, skip_ifp_w_, 1, 0), skip_ifp_b_);
  Tensor s0 = bilinear_upsample(inter, 2) +
              add_channel_bias(conv2d(fp.ffp, skip_ffp_w_, 1, 0), skip_ffp_b_);
  return s0;
}

void MainDecoder::collect_params(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".queries", queries_);
  for (size_t i = 0; i < layers_.size(); ++i) {
    const std::string lp = prefix + ".layer" + std::to_string(i);
    Layer& l = layers_[i];
    reg.add(lp + ".wq", l.wq);
    reg.add(lp + ".bq", l.bq);
    reg.add(lp + ".wk", l.wk);
    reg.add(lp + ".bk", l.bk);
    reg.add(lp + ".wv", l.wv);
    reg.add(lp + ".bv", l.bv);
    reg.add(lp + ".wo", l.wo);
    reg.add(lp + ".bo", l.bo);
    reg.add(lp + ".norm1.g", l.norm1_g);
    reg.add(lp + ".norm1.b", l.norm1_b);
    reg.add(lp + ".norm2.g", l.norm2_g);
    reg.add(lp + ".norm2.b", l.norm2_b);
    reg.add(lp + ".mlp.w1", l.mlp_w1);
    reg.add(lp + ".mlp.b1", l.mlp_b1);
    reg.add(lp + ".mlp.w2", l.mlp_w2);
    reg.add(lp + ".mlp.b2", l.mlp_b2);
  }
  reg.add(prefix + ".final_norm.g", final_norm_g_);
  reg.add(prefix + ".final_norm.b", final_norm_b_);
  reg.add(prefix + ".skip_ifp.w", skip_ifp_w_);
  reg.add(prefix + ".skip_ifp.b", skip_ifp_b_);
  reg.add(prefix + ".skip_ffp.w", skip_ffp_w_);
  reg.add(prefix + ".skip_ffp.b", skip_ffp_b_);
}

AuxiliaryHead::AuxiliaryHead(int num_classes, int64_t dim, Rng& rng) {
  align_sfm_w_ = init_conv(dim / 8, dim, 1, rng);
  align_sfm_b_ = trainable_zeros({dim / 8});
  align_ifp_w_ = init_conv(dim / 8, dim / 4, 1, rng);
  align_ifp_b_ = trainable_zeros({dim / 8});
  out_w_ = init_conv(num_classes, dim / 8, 3, rng);
  out_b_ = trainable_zeros({num_classes});
}

Tensor AuxiliaryHead::decode(const FeaturePyramid& fp) const {
  Tensor sfm8 = add_channel_bias(conv2d(fp.sfm, align_sfm_w_, 1, 0), align_sfm_b_);
  Tensor ifp8 = add_channel_bias(conv2d(fp.ifp, align_ifp_w_, 1, 0), align_ifp_b_);
  if (fp.ifp.dim(1) != fp.sfm.dim(1) * 2 || fp.ffp.dim(1) != fp.ifp.dim(1) * 2) {
    throw FusionError("aux head: pyramid levels are not factor-2 apart");
  }
  Tensor merged = bilinear_upsample(ifp8 + bilinear_upsample(sfm8, 2), 2) + fp.ffp;
  return add_channel_bias(conv2d(merged, out_w_, 1, 1), out_b_);
}

void AuxiliaryHead::collect_params(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".align_sfm.w", align_sfm_w_);
  reg.add(prefix + ".align_sfm.b", align_sfm_b_);
  reg.add(prefix + ".align_ifp.w", align_ifp_w_);
  reg.add(prefix + ".align_ifp.b", align_ifp_b_);
  reg.add(prefix + ".out.w", out_w_);
  reg.add(prefix + ".out.b", out_b_);
}

SARTM_NS_END
