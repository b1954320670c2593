#pragma once

#include <map>
#include <string>
#include <vector>

#include "sartm/ops.hpp"
#include "sartm/params.hpp"
#include "sartm/tensor.hpp"

SARTM_NS_BEGIN

struct EncoderConfig {
  int in_channels = 3;
  int embed_dim = 32;  // stage-0 width; widths double per stage
  int num_stages = 3;
  int window_size = 4;
  int num_heads = 2;
  int lora_rank = 4;
  int mlp_ratio = 4;
  std::vector<std::string> modalities = {"rgb", "thermal"};

  int stage_stride(int i) const { return 1 << (i + 2); }
  int64_t stage_width(int i) const { return static_cast<int64_t>(embed_dim) << i; }
  void validate(int64_t height, int64_t width) const;
};

// Trainable low-rank update for one frozen projection. `up` starts at zero so
// a fresh adapter leaves the base projection untouched.
struct LoraAdapter {
  Tensor down;  // [width, rank]
  Tensor up;    // [rank, width]
};

struct LoraPair {
  LoraAdapter query;
  LoraAdapter value;
};

// Non-overlapping p x p patches, flattened channel-major and projected to
// `d = W_e.cols()` channels. Returns [d, H/p, W/p].
Tensor patch_embed(const Tensor& image, const Tensor& we, const Tensor& be,
                   int patch);

// One pre-norm transformer block: windowed multi-head self-attention with
// LoRA-augmented query/value projections, then an MLP. Base projections are
// frozen; the adapters and layer norms carry the trainable state.
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(int64_t width, int heads, int mlp_ratio, int rank,
                 const std::vector<std::string>& modalities, Rng& rng);

  // tokens: [T, width] for a map of extent height x width_px. window == 0
  // selects global attention (a single window covering the map).
  Tensor apply(const Tensor& tokens, int64_t height, int64_t width_px,
               int window, const LoraPair* lora) const;

  // Attention core on pre-partitioned windows [B, t, width]; exposed for the
  // single-token and two-token window contracts.
  Tensor attend(const Tensor& windows, const LoraPair* lora) const;

  const LoraPair& adapters(const std::string& modality) const;
  LoraPair& adapters(const std::string& modality);

  void collect_params(ParamRegistry& reg, const std::string& prefix);

  int64_t width() const { return width_; }
  int heads() const { return heads_; }

 private:
  int64_t width_ = 0;
  int heads_ = 0;
  Tensor wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;      // frozen
  Tensor norm1_g_, norm1_b_, norm2_g_, norm2_b_;      // trainable
  Tensor mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;          // frozen
  std::map<std::string, LoraPair> lora_;
};

struct StageOutput {
  // One map [C_i, H_i, W_i] per stage, i in [0, n].
  std::vector<Tensor> maps;
};

// Shared frozen hierarchical backbone with per-modality LoRA adapters. The
// spatial geometry is fixed at construction.
class HierarchicalEncoder {
 public:
  HierarchicalEncoder(EncoderConfig config, int64_t height, int64_t width,
                      Rng& rng);

  StageOutput encode(const Tensor& image, const std::string& modality) const;
  // Adapter-free path (the frozen base encoder).
  StageOutput encode_base(const Tensor& image) const;

  const EncoderConfig& config() const { return config_; }
  int64_t stage_height(int i) const { return height_ / config_.stage_stride(i); }
  int64_t stage_width_px(int i) const { return width_ / config_.stage_stride(i); }

  AttentionBlock& block(int stage) { return blocks_[static_cast<size_t>(stage)]; }
  const AttentionBlock& block(int stage) const {
    return blocks_[static_cast<size_t>(stage)];
  }

  void collect_params(ParamRegistry& reg, const std::string& prefix);

 private:
  StageOutput run(const Tensor& image, const std::string* modality) const;

  EncoderConfig config_;
  int64_t height_ = 0, width_ = 0;
  Tensor patch_w_, patch_b_;            // frozen
  std::vector<Tensor> merge_w_, merge_b_;  // frozen, per stage >= 1
  std::vector<Tensor> pos_;             // frozen, [T_i, C_i]
  std::vector<AttentionBlock> blocks_;
};

SARTM_NS_END
