#pragma once

#include <memory>
#include <vector>

#include "c2fvl/mask.hpp"
#include "c2fvl/nn.hpp"

namespace c2fvl {

// One decoder level: fuse the resolution-matched skip by channel
// concatenation, refine with conv(3x3)+bn+relu x2, then upsample x2.
class DecoderStage : public nn::Module {
 public:
  DecoderStage(int in_ch, int skip_ch, int out_ch, Rng& rng);
  // returns the refined map before its x2 upsample
  ad::Var forward(const ad::Var& x, const ad::Var& skip, bool training);

 private:
  nn::Conv2d conv1_, conv2_;
  nn::BatchNorm2d bn1_, bn2_;
};

struct DecoderResult {
  ad::Var logits;                           // (N,1,H,W)
  std::vector<ad::Var> stage_activations;   // deepest first, pre-upsample
};

// CNN decoder from the encoder bottleneck, consuming the VLAB outputs
// shallow->deep as skips. Stage s fuses y_{S+1-s} at its matching resolution
// and doubles the spatial dims, so S stages restore the input resolution.
class Decoder : public nn::Module {
 public:
  // encoder_channels: per-stage encoder widths shallow->deep; the bottleneck
  // entering the decoder has encoder_channels.back() channels
  explicit Decoder(const std::vector<int>& encoder_channels, Rng& rng);

  DecoderResult forward(const std::vector<ad::Var>& vlab_outputs, const ad::Var& deepest,
                        bool training);

  int num_stages() const { return static_cast<int>(stages_.size()); }

 private:
  std::vector<std::unique_ptr<DecoderStage>> stages_;
  std::unique_ptr<nn::Conv2d> head_;
};

// sigmoid(logits) >= threshold, inclusive
Mask logits_to_mask(const Tensor& logits, double threshold);

}  // namespace c2fvl
