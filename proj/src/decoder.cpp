#include "c2fvl/decoder.hpp"

#include <cmath>

namespace c2fvl {

DecoderStage::DecoderStage(int in_ch, int skip_ch, int out_ch, Rng& rng)
    : conv1_(in_ch + skip_ch, out_ch, 3, 1, 1, rng),
      conv2_(out_ch, out_ch, 3, 1, 1, rng),
      bn1_(out_ch),
      bn2_(out_ch) {
  register_child("conv1", &conv1_);
  register_child("bn1", &bn1_);
  register_child("conv2", &conv2_);
  register_child("bn2", &bn2_);
}

ad::Var DecoderStage::forward(const ad::Var& x, const ad::Var& skip, bool training) {
  const auto& sx = x.shape();
  const auto& ss = skip.shape();
  if (sx[2] != ss[2] || sx[3] != ss[3])
    throw ShapeMismatch("decoder stage: skip " + skip.val().shape_str() +
                        " does not match map " + x.val().shape_str());
  auto y = ad::concat_channels(x, skip);
  y = ad::relu(bn1_.forward(conv1_.forward(y), training));
  y = ad::relu(bn2_.forward(conv2_.forward(y), training));
  return y;
}

Decoder::Decoder(const std::vector<int>& encoder_channels, Rng& rng) {
  const int s = static_cast<int>(encoder_channels.size());
  if (s == 0) throw ShapeMismatch("decoder: no stages");
  int in_ch = encoder_channels.back();
  for (int i = 0; i < s; ++i) {
    const int skip_ch = encoder_channels[s - 1 - i];
    const int out_ch = skip_ch;
    stages_.push_back(std::make_unique<DecoderStage>(in_ch, skip_ch, out_ch, rng));
    register_child("stage" + std::to_string(i + 1), stages_[i].get());
    in_ch = out_ch;
  }
  head_ = std::make_unique<nn::Conv2d>(in_ch, 1, 1, 1, 0, rng);
  register_child("head", head_.get());
}

DecoderResult Decoder::forward(const std::vector<ad::Var>& vlab_outputs, const ad::Var& deepest,
                               bool training) {
  const int s = num_stages();
  if (static_cast<int>(vlab_outputs.size()) != s)
    throw ShapeMismatch("decoder: expected " + std::to_string(s) + " VLAB outputs, got " +
                        std::to_string(vlab_outputs.size()));
  DecoderResult res;
  ad::Var x = deepest;
  for (int i = 0; i < s; ++i) {
    const ad::Var& skip = vlab_outputs[static_cast<size_t>(s - 1 - i)];
    x = stages_[static_cast<size_t>(i)]->forward(x, skip, training);
    res.stage_activations.push_back(x);
    x = ad::upsample_nearest(x, 2);
  }
  res.logits = head_->forward(x);
  return res;
}

Mask logits_to_mask(const Tensor& logits, double threshold) {
  const int h = logits.shape[logits.rank() - 2];
  const int w = logits.shape[logits.rank() - 1];
  Mask m(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const double z = logits.data[static_cast<size_t>(i) * w + j];
      const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      m.at(i, j) = p >= threshold ? 1 : 0;
    }
  return m;
}

}  // namespace c2fvl
