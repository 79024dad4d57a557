#include "c2fvl/encoder.hpp"

#include <cmath>

namespace c2fvl {

void StageConfig::validate() const {
  if (out_channels <= 0 || out_channels % 8 != 0)
    throw ChannelsNotDivisibleBy8("stage " + std::to_string(stage_index) + ": out_channels " +
                                  std::to_string(out_channels));
  if (in_channels <= 0) throw ShapeMismatch("stage in_channels must be positive");
  if (attention.num_heads <= 0 || attention.token_patch <= 0 || attention.mlp_ratio <= 0)
    throw ShapeMismatch("stage attention config must be positive");
}

std::pair<ad::Var, ad::Var> scaled_dot_attention(const ad::Var& q, const ad::Var& k,
                                                 const ad::Var& v) {
  const int d = q.shape().back();
  auto scores = ad::mul_scalar(ad::matmul(q, ad::transpose_last2(k)), 1.0 / std::sqrt(d));
  auto weights = ad::softmax_lastdim(scores);
  return {ad::matmul(weights, v), weights};
}

ConvBlock::ConvBlock(int in_ch, int out_ch, Rng& rng)
    : conv1_(in_ch, out_ch, 3, 1, 1, rng),
      conv2_(out_ch, out_ch, 3, 1, 1, rng),
      bn1_(out_ch),
      bn2_(out_ch) {
  register_child("conv1", &conv1_);
  register_child("bn1", &bn1_);
  register_child("conv2", &conv2_);
  register_child("bn2", &bn2_);
}

ad::Var ConvBlock::forward(const ad::Var& x, bool training) {
  const auto& s = x.shape();
  if (s[2] % 2 != 0 || s[3] % 2 != 0)
    throw ShapeMismatch("conv_block: spatial dims must be even, got " + x.val().shape_str());
  auto y = ad::relu(bn1_.forward(conv1_.forward(x), training));
  y = ad::relu(bn2_.forward(conv2_.forward(y), training));
  return ad::maxpool2x2(y);
}

AttentionBlock::AttentionBlock(int in_ch, int embed_dim, int grid_h, int grid_w,
                               const AttentionConfig& cfg, Rng& rng)
    : embed_dim_(embed_dim),
      grid_h_(grid_h),
      grid_w_(grid_w),
      heads_(cfg.num_heads),
      patch_(cfg.token_patch),
      patch_embed_(in_ch, embed_dim, cfg.token_patch, cfg.token_patch, 0, rng),
      norm1_(embed_dim),
      norm2_(embed_dim),
      qkv_(embed_dim, 3 * embed_dim, rng),
      proj_(embed_dim, embed_dim, rng),
      mlp_fc1_(embed_dim, static_cast<int>(embed_dim * cfg.mlp_ratio), rng),
      mlp_fc2_(static_cast<int>(embed_dim * cfg.mlp_ratio), embed_dim, rng) {
  if (embed_dim % cfg.num_heads != 0)
    throw ShapeMismatch("attention: heads must divide embed dim");
  Tensor pe({grid_h * grid_w, embed_dim});
  for (auto& v : pe.data) v = rng.normal(0.0, 0.02);
  pos_embed_ = register_param("pos_embed", std::move(pe));
  register_child("patch_embed", &patch_embed_);
  register_child("norm1", &norm1_);
  register_child("qkv", &qkv_);
  register_child("proj", &proj_);
  register_child("norm2", &norm2_);
  register_child("mlp_fc1", &mlp_fc1_);
  register_child("mlp_fc2", &mlp_fc2_);
}

ad::Var AttentionBlock::forward(const ad::Var& x) const {
  const auto& s = x.shape();
  const int n = s[0], h = s[2], w = s[3];
  if (h % patch_ != 0 || w % patch_ != 0)
    throw ShapeMismatch("attention_block: patch " + std::to_string(patch_) +
                        " does not divide " + x.val().shape_str());
  const int gh = h / patch_, gw = w / patch_;
  if (gh != grid_h_ || gw != grid_w_)
    throw ShapeMismatch("attention_block: token grid mismatch with positional embedding");
  const int t = gh * gw;
  const int dh = embed_dim_ / heads_;

  // tokenize: strided conv then (N,D,gh,gw) -> (N,T,D)
  auto tokens = ad::permute(ad::reshape(patch_embed_.forward(x), {n, embed_dim_, t}), {0, 2, 1});
  tokens = ad::add_broadcast_rows(tokens, pos_embed_);

  // pre-norm multi-head self-attention with residual
  auto qkv = qkv_.forward(norm1_.forward(tokens));  // (N,T,3D)
  auto split_heads = [&](const ad::Var& m) {
    return ad::permute(ad::reshape(m, {n, t, heads_, dh}), {0, 2, 1, 3});  // (N,H,T,dh)
  };
  auto q = split_heads(ad::slice_lastdim(qkv, 0, embed_dim_));
  auto k = split_heads(ad::slice_lastdim(qkv, embed_dim_, 2 * embed_dim_));
  auto v = split_heads(ad::slice_lastdim(qkv, 2 * embed_dim_, 3 * embed_dim_));
  auto attn = scaled_dot_attention(q, k, v).first;              // (N,H,T,dh)
  attn = ad::reshape(ad::permute(attn, {0, 2, 1, 3}), {n, t, embed_dim_});
  tokens = ad::add(tokens, proj_.forward(attn));

  // pre-norm MLP with residual
  auto ff = mlp_fc2_.forward(ad::gelu(mlp_fc1_.forward(norm2_.forward(tokens))));
  tokens = ad::add(tokens, ff);

  // back to a spatial map at token resolution
  return ad::reshape(ad::permute(tokens, {0, 2, 1}), {n, embed_dim_, gh, gw});
}

ReconstructFuse::ReconstructFuse(int vit_ch, int out_ch, bool bilinear, Rng& rng)
    : conv_(vit_ch, out_ch, 1, 1, 0, rng), bn_(out_ch), bilinear_(bilinear) {
  register_child("conv", &conv_);
  register_child("bn", &bn_);
}

std::pair<ad::Var, ad::Var> ReconstructFuse::forward(const ad::Var& f_vit, const ad::Var& f_cnn,
                                                     bool training) {
  const auto& sv = f_vit.shape();
  const auto& sc = f_cnn.shape();
  if (sc[2] % sv[2] != 0 || sc[3] % sv[3] != 0 || sc[2] / sv[2] != sc[3] / sv[3])
    throw ShapeMismatch("reconstruct_fuse: " + f_vit.val().shape_str() + " cannot upsample to " +
                        f_cnn.val().shape_str());
  const int factor = sc[2] / sv[2];
  auto up = factor == 1 ? f_vit
            : bilinear_ ? ad::upsample_bilinear(f_vit, factor)
                        : ad::upsample_nearest(f_vit, factor);
  auto f_rt = ad::relu(bn_.forward(conv_.forward(up), training));
  return {f_rt, ad::add(f_cnn, f_rt)};
}

EncoderStage::EncoderStage(const StageConfig& cfg, int in_h, int in_w, bool bilinear, Rng& rng)
    : conv_block_(cfg.in_channels, cfg.out_channels, rng),
      attention_block_(cfg.out_channels, cfg.out_channels, (in_h / 2) / cfg.attention.token_patch,
                       (in_w / 2) / cfg.attention.token_patch, cfg.attention, rng),
      fuse_(cfg.out_channels, cfg.out_channels, bilinear, rng) {
  cfg.validate();
  register_child("conv_block", &conv_block_);
  register_child("attention", &attention_block_);
  register_child("fuse", &fuse_);
}

StageMaps EncoderStage::forward(const ad::Var& x, bool training) {
  StageMaps maps;
  maps.f_cnn = conv_block_.forward(x, training);
  maps.f_vit = attention_block_.forward(maps.f_cnn);
  auto [f_rt, f_enc] = fuse_.forward(maps.f_vit, maps.f_cnn, training);
  maps.f_rt = f_rt;
  maps.f_encoder = f_enc;
  return maps;
}

Encoder::Encoder(const std::vector<StageConfig>& stages, int image_h, int image_w, bool bilinear,
                 Rng& rng) {
  if (stages.empty()) throw ShapeMismatch("encoder: needs at least one stage");
  const int s = static_cast<int>(stages.size());
  if (image_h % (1 << s) != 0 || image_w % (1 << s) != 0)
    throw ShapeMismatch("encoder: image dims must be divisible by 2^S");
  int h = image_h, w = image_w;
  for (int i = 0; i < s; ++i) {
    stages_.push_back(std::make_unique<EncoderStage>(stages[i], h, w, bilinear, rng));
    register_child("stage" + std::to_string(i + 1), stages_[i].get());
    h /= 2;
    w /= 2;
  }
}

FeaturePyramid Encoder::forward(const ad::Var& image, bool training) {
  FeaturePyramid pyramid;
  ad::Var x = image;
  for (auto& stage : stages_) {
    pyramid.push_back(stage->forward(x, training));
    x = pyramid.back().f_encoder;
  }
  return pyramid;
}

}  // namespace c2fvl
