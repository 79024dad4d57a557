#pragma once

#include <memory>
#include <vector>

#include "c2fvl/nn.hpp"

namespace c2fvl {

struct AttentionConfig {
  int num_heads = 4;
  int token_patch = 2;
  double mlp_ratio = 2.0;
};

struct StageConfig {
  int stage_index = 1;
  int in_channels = 1;
  int out_channels = 8;  // must be divisible by 8 (text tiling)
  AttentionConfig attention;

  void validate() const;
};

// Per-stage feature maps of the hybrid encoder (Eqs. 1-2 wiring).
struct StageMaps {
  ad::Var f_cnn;      // conv path, C_i x H_i x W_i
  ad::Var f_vit;      // attention path at token resolution
  ad::Var f_rt;       // reconstructed attention features, C_i x H_i x W_i
  ad::Var f_encoder;  // f_cnn + f_rt
};

using FeaturePyramid = std::vector<StageMaps>;

// scaled dot-product attention over (..., T, d) tensors; also returns the
// row-stochastic attention weights
std::pair<ad::Var, ad::Var> scaled_dot_attention(const ad::Var& q, const ad::Var& k,
                                                 const ad::Var& v);

// two conv(3x3)+bn+relu then 2x2 max-pool
class ConvBlock : public nn::Module {
 public:
  ConvBlock(int in_ch, int out_ch, Rng& rng);
  ad::Var forward(const ad::Var& x, bool training);

 private:
  nn::Conv2d conv1_, conv2_;
  nn::BatchNorm2d bn1_, bn2_;
};

// patch tokenizer + learned positional embedding + one pre-norm transformer
// block; emits a spatial map at token resolution
class AttentionBlock : public nn::Module {
 public:
  // grid_h/grid_w: token grid dims (input spatial dims / token_patch)
  AttentionBlock(int in_ch, int embed_dim, int grid_h, int grid_w, const AttentionConfig& cfg,
                 Rng& rng);
  ad::Var forward(const ad::Var& x) const;  // (N,C,H,W) -> (N,D,H/p,W/p)

  int embed_dim() const { return embed_dim_; }

 private:
  int embed_dim_, grid_h_, grid_w_, heads_, patch_;
  nn::Conv2d patch_embed_;
  ad::Var pos_embed_;
  nn::LayerNorm norm1_, norm2_;
  nn::Linear qkv_, proj_, mlp_fc1_, mlp_fc2_;
};

// Eq. 1: F_rt = ReLU(BN(Conv1x1(Upsample(F_vit)))), Eq. 2: F_enc = F_cnn + F_rt
class ReconstructFuse : public nn::Module {
 public:
  ReconstructFuse(int vit_ch, int out_ch, bool bilinear, Rng& rng);
  // returns (f_rt, f_encoder)
  std::pair<ad::Var, ad::Var> forward(const ad::Var& f_vit, const ad::Var& f_cnn, bool training);

 private:
  nn::Conv2d conv_;
  nn::BatchNorm2d bn_;
  bool bilinear_;
};

class EncoderStage : public nn::Module {
 public:
  // in_h/in_w: spatial dims of this stage's input
  EncoderStage(const StageConfig& cfg, int in_h, int in_w, bool bilinear, Rng& rng);
  StageMaps forward(const ad::Var& x, bool training);

 private:
  ConvBlock conv_block_;
  AttentionBlock attention_block_;
  ReconstructFuse fuse_;
};

class Encoder : public nn::Module {
 public:
  Encoder(const std::vector<StageConfig>& stages, int image_h, int image_w, bool bilinear,
          Rng& rng);
  FeaturePyramid forward(const ad::Var& image, bool training);

  int num_stages() const { return static_cast<int>(stages_.size()); }

 private:
  std::vector<std::unique_ptr<EncoderStage>> stages_;
};

}  // namespace c2fvl
