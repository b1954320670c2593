#include "sartm/encoder.hpp"

#include <cmath>

SARTM_NS_BEGIN

namespace {

Tensor init_linear(int64_t fan_in, int64_t fan_out, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform({fan_in, fan_out}, rng, -bound, bound);
}

// [T, C] tokens for an H x W map -> [B, w*w, C] windows.
Tensor partition_windows(const Tensor& tokens, int64_t h, int64_t w, int win) {
  const int64_t c = tokens.dim(1);
  if (win == 0 || (win == h && win == w)) {
    return reshape(tokens, {1, h * w, c});
  }
  if (h % win != 0 || w % win != 0) {
    throw GeometryError("window_attention: map " + std::to_string(h) + "x" +
                        std::to_string(w) + " not divisible by window " +
                        std::to_string(win));
  }
  Tensor x = reshape(tokens, {h / win, win, w / win, win, c});
  x = permute(x, {0, 2, 1, 3, 4});
  return reshape(x, {(h / win) * (w / win), static_cast<int64_t>(win) * win, c});
}

Tensor merge_windows(const Tensor& windows, int64_t h, int64_t w, int win) {
  const int64_t c = windows.dim(2);
  if (win == 0 || (win == h && win == w)) {
    return reshape(windows, {h * w, c});
  }
  Tensor x = reshape(windows, {h / win, w / win, win, win, c});
  x = permute(x, {0, 2, 1, 3, 4});
  return reshape(x, {h * w, c});
}

Tensor map_to_tokens(const Tensor& map) {
  Tensor x = permute(map, {1, 2, 0});  // [H,W,C]
  return reshape(x, {map.dim(1) * map.dim(2), map.dim(0)});
}

Tensor tokens_to_map(const Tensor& tokens, int64_t h, int64_t w) {
  Tensor x = reshape(tokens, {h, w, tokens.dim(1)});
  return permute(x, {2, 0, 1});
}

}  // namespace

void EncoderConfig::validate(int64_t height, int64_t width) const {
  if (num_stages < 1) throw ConfigError("encoder: num_stages must be >= 1");
  if (in_channels < 1) throw ConfigError("encoder: in_channels must be >= 1");
  if (embed_dim % num_heads != 0) {
    throw ConfigError("encoder: embed_dim " + std::to_string(embed_dim) +
                      " not divisible by num_heads " + std::to_string(num_heads));
  }
  if (lora_rank < 1 || lora_rank > embed_dim / 2) {
    throw ConfigError("encoder: lora_rank " + std::to_string(lora_rank) +
                      " outside [1, embed_dim/2 = " +
                      std::to_string(embed_dim / 2) + "]");
  }
  if (modalities.empty()) throw ConfigError("encoder: no modalities registered");
  const int n = num_stages - 1;
  const int sn = stage_stride(n);
  if (height % sn != 0 || width % sn != 0) {
    throw GeometryError("encoder: input " + std::to_string(height) + "x" +
                        std::to_string(width) + " not divisible by stride " +
                        std::to_string(sn));
  }
  for (int i = 0; i < n; ++i) {  // last stage attends globally
    const int64_t hi = height / stage_stride(i);
    const int64_t wi = width / stage_stride(i);
    if (hi % window_size != 0 || wi % window_size != 0) {
      throw GeometryError("encoder: stage " + std::to_string(i) + " map " +
                          std::to_string(hi) + "x" + std::to_string(wi) +
                          " not divisible by window " +
                          std::to_string(window_size));
    }
  }
}

Tensor patch_embed(const Tensor& image, const Tensor& we, const Tensor& be,
                   int patch) {
  const Shape& s = image.shape();
  if (s.size() != 3) {
    throw ShapeError("patch_embed: expected [C,H,W], got " + shape_str(s));
  }
  const int64_t c = s[0], h = s[1], w = s[2];
  if (h % patch != 0 || w % patch != 0) {
    throw GeometryError("patch_embed: " + std::to_string(h) + "x" +
                        std::to_string(w) + " not divisible by patch " +
                        std::to_string(patch));
  }
  if (we.rank() != 2 || we.dim(0) != c * patch * patch) {
    throw ShapeError("patch_embed: weight " + shape_str(we.shape()) +
                     " expects " + std::to_string(c * patch * patch) + " rows");
  }
  const int64_t h0 = h / patch, w0 = w / patch;
  Tensor x = reshape(image, {c, h0, patch, w0, patch});
  x = permute(x, {1, 3, 0, 2, 4});  // [H0, W0, C, p, p]
  x = reshape(x, {h0 * w0, c * patch * patch});
  x = add_bias_lastdim(matmul(x, we), be);
  return tokens_to_map(x, h0, w0);
}

AttentionBlock::AttentionBlock(int64_t width, int heads, int mlp_ratio,
                               int rank, const std::vector<std::string>& modalities,
                               Rng& rng)
    : width_(width), heads_(heads) {
  wq_ = init_linear(width, width, rng);
  bq_ = Tensor::zeros({width});
  wk_ = init_linear(width, width, rng);
  bk_ = Tensor::zeros({width});
  wv_ = init_linear(width, width, rng);
  bv_ = Tensor::zeros({width});
  wo_ = init_linear(width, width, rng);
  bo_ = Tensor::zeros({width});
  norm1_g_ = Tensor::full({width}, 1).set_requires_grad(true);
  norm1_b_ = Tensor::zeros({width}).set_requires_grad(true);
  norm2_g_ = Tensor::full({width}, 1).set_requires_grad(true);
  norm2_b_ = Tensor::zeros({width}).set_requires_grad(true);
  const int64_t hidden = width * mlp_ratio;
  mlp_w1_ = init_linear(width, hidden, rng);
  mlp_b1_ = Tensor::zeros({hidden});
  mlp_w2_ = init_linear(hidden, width, rng);
  mlp_b2_ = Tensor::zeros({width});
  const double bound = 1.0 / std::sqrt(static_cast<double>(width));
  for (const auto& m : modalities) {
    LoraPair pair;
    pair.query.down =
        Tensor::uniform({width, rank}, rng, -bound, bound).set_requires_grad(true);
    pair.query.up = Tensor::zeros({rank, width}).set_requires_grad(true);
    pair.value.down =
        Tensor::uniform({width, rank}, rng, -bound, bound).set_requires_grad(true);
    pair.value.up = Tensor::zeros({rank, width}).set_requires_grad(true);
    lora_.emplace(m, std::move(pair));
  }
}

const LoraPair& AttentionBlock::adapters(const std::string& modality) const {
  auto it = lora_.find(modality);
  if (it == lora_.end()) {
    throw ConfigError("encoder: unregistered modality '" + modality + "'");
  }
  return it->second;
}

LoraPair& AttentionBlock::adapters(const std::string& modality) {
  auto it = lora_.find(modality);
  if (it == lora_.end()) {
    throw ConfigError("encoder: unregistered modality '" + modality + "'");
  }
  return it->second;
}

Tensor AttentionBlock::attend(const Tensor& windows, const LoraPair* lora) const {
  const int64_t b = windows.dim(0), t = windows.dim(1);
  const int64_t dk = width_ / heads_;

  Tensor q = add_bias_lastdim(matmul(windows, wq_), bq_);
  Tensor k = add_bias_lastdim(matmul(windows, wk_), bk_);
  Tensor v = add_bias_lastdim(matmul(windows, wv_), bv_);
  if (lora) {
    q = q + matmul(matmul(windows, lora->query.down), lora->query.up);
    v = v + matmul(matmul(windows, lora->value.down), lora->value.up);
  }

  auto split_heads = [&](const Tensor& x) {
    Tensor y = reshape(x, {b, t, static_cast<int64_t>(heads_), dk});
    y = permute(y, {0, 2, 1, 3});
    return reshape(y, {b * heads_, t, dk});
  };
  Tensor qh = split_heads(q);
  Tensor kh = split_heads(k);
  Tensor vh = split_heads(v);

  Tensor scores = mul_scalar(matmul(qh, transpose2(kh)),
                             static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dk))));
  Tensor att = softmax(scores, 2);
  Tensor ctx = matmul(att, vh);
  ctx = reshape(ctx, {b, static_cast<int64_t>(heads_), t, dk});
  ctx = permute(ctx, {0, 2, 1, 3});
  ctx = reshape(ctx, {b, t, width_});
  return add_bias_lastdim(matmul(ctx, wo_), bo_);
}

Tensor AttentionBlock::apply(const Tensor& tokens, int64_t height,
                             int64_t width_px, int window,
                             const LoraPair* lora) const {
  Tensor t1 = layer_norm(tokens, norm1_g_, norm1_b_);
  Tensor windows = partition_windows(t1, height, width_px, window);
  Tensor att = merge_windows(attend(windows, lora), height, width_px, window);
  Tensor x = tokens + att;

  Tensor t2 = layer_norm(x, norm2_g_, norm2_b_);
  Tensor h = gelu(add_bias_lastdim(matmul(t2, mlp_w1_), mlp_b1_));
  Tensor out = add_bias_lastdim(matmul(h, mlp_w2_), mlp_b2_);
  return x + out;
}

void AttentionBlock::collect_params(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".attn.wq", wq_);
  reg.add(prefix + ".attn.bq", bq_);
  reg.add(prefix + ".attn.wk", wk_);
  reg.add(prefix + ".attn.bk", bk_);
  reg.add(prefix + ".attn.wv", wv_);
  reg.add(prefix + ".attn.bv", bv_);
  reg.add(prefix + ".attn.wo", wo_);
  reg.add(prefix + ".attn.bo", bo_);
  reg.add(prefix + ".norm1.g", norm1_g_);
  reg.add(prefix + ".norm1.b", norm1_b_);
  reg.add(prefix + ".norm2.g", norm2_g_);
  reg.add(prefix + ".norm2.b", norm2_b_);
  reg.add(prefix + ".mlp.w1", mlp_w1_);
  reg.add(prefix + ".mlp.b1", mlp_b1_);
  reg.add(prefix + ".mlp.w2", mlp_w2_);
  reg.add(prefix + ".mlp.b2", mlp_b2_);
  for (auto& [m, pair] : lora_) {
    reg.add(prefix + ".lora." + m + ".q.down", pair.query.down);
    reg.add(prefix + ".lora." + m + ".q.up", pair.query.up);
    reg.add(prefix + ".lora." + m + ".v.down", pair.value.down);
    reg.add(prefix + ".lora." + m + ".v.up", pair.value.up);
  }
}

HierarchicalEncoder::HierarchicalEncoder(EncoderConfig config, int64_t height,
                                         int64_t width, Rng& rng)
    : config_(std::move(config)), height_(height), width_(width) {
  config_.validate(height, width);
  const int p = config_.stage_stride(0);
  patch_w_ = init_linear(static_cast<int64_t>(config_.in_channels) * p * p,
                         config_.embed_dim, rng);
  patch_b_ = Tensor::zeros({config_.embed_dim});
  for (int i = 0; i < config_.num_stages; ++i) {
    const int64_t ci = config_.stage_width(i);
    if (i > 0) {
      merge_w_.push_back(init_linear(config_.stage_width(i - 1) * 4, ci, rng));
      merge_b_.push_back(Tensor::zeros({ci}));
    }
    const int64_t ti = stage_height(i) * stage_width_px(i);
    pos_.push_back(Tensor::uniform({ti, ci}, rng, -0.02, 0.02));
    blocks_.emplace_back(ci, config_.num_heads, config_.mlp_ratio,
                         config_.lora_rank, config_.modalities, rng);
  }
}

StageOutput HierarchicalEncoder::run(const Tensor& image,
                                     const std::string* modality) const {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != config_.in_channels || s[1] != height_ ||
      s[2] != width_) {
    throw ShapeError("encode: expected [" + std::to_string(config_.in_channels) +
                     "x" + std::to_string(height_) + "x" +
                     std::to_string(width_) + "], got " + shape_str(s));
  }
  const int n = config_.num_stages - 1;
  Tensor tokens =
      map_to_tokens(patch_embed(image, patch_w_, patch_b_, config_.stage_stride(0)));

  StageOutput out;
  for (int i = 0; i < config_.num_stages; ++i) {
    if (i > 0) {
      const int64_t ph = stage_height(i - 1), pw = stage_width_px(i - 1);
      const int64_t pc = config_.stage_width(i - 1);
      Tensor x = reshape(tokens, {ph / 2, 2, pw / 2, 2, pc});
      x = permute(x, {0, 2, 4, 1, 3});
      x = reshape(x, {(ph / 2) * (pw / 2), pc * 4});
      tokens = add_bias_lastdim(matmul(x, merge_w_[static_cast<size_t>(i - 1)]),
                                merge_b_[static_cast<size_t>(i - 1)]);
    }
    tokens = tokens + pos_[static_cast<size_t>(i)];
    const int window = (i < n) ? config_.window_size : 0;
    const LoraPair* lora =
        modality ? &blocks_[static_cast<size_t>(i)].adapters(*modality) : nullptr;
    tokens = blocks_[static_cast<size_t>(i)].apply(tokens, stage_height(i),
                                                   stage_width_px(i), window, lora);
    out.maps.push_back(tokens_to_map(tokens, stage_height(i), stage_width_px(i)));
  }
  return out;
}

StageOutput HierarchicalEncoder::encode(const Tensor& image,
                                        const std::string& modality) const {
  // Resolve the adapters up front so an unknown modality fails loudly.
  blocks_.front().adapters(modality);
  return run(image, &modality);
}

StageOutput HierarchicalEncoder::encode_base(const Tensor& image) const {
  return run(image, nullptr);
}

void HierarchicalEncoder::collect_params(ParamRegistry& reg,
                                         const std::string& prefix) {
  reg.add(prefix + ".patch.w", patch_w_);
  reg.add(prefix + ".patch.b", patch_b_);
  for (int i = 0; i < config_.num_stages; ++i) {
    const std::string sp = prefix + ".stage" + std::to_string(i);
    if (i > 0) {
      reg.add(sp + ".merge.w", merge_w_[static_cast<size_t>(i - 1)]);
      reg.add(sp + ".merge.b", merge_b_[static_cast<size_t>(i - 1)]);
    }
    reg.add(sp + ".pos", pos_[static_cast<size_t>(i)]);
    blocks_[static_cast<size_t>(i)].collect_params(reg, sp);
  }
}

SARTM_NS_END
