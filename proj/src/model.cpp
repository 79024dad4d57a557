#include "c2fvl/model.hpp"

namespace c2fvl {

void ModelConfig::validate() const {
  if (channels.empty()) throw ConfigError("model: channels must be non-empty");
  for (int c : channels)
    if (c <= 0 || c % 8 != 0)
      throw ChannelsNotDivisibleBy8("model: channel width " + std::to_string(c));
  if (static_cast<int>(patch.size()) != num_stages())
    throw ConfigError("model: need one token patch per stage");
  if (image_size % (1 << num_stages()) != 0)
    throw ConfigError("model: image_size must be divisible by 2^S");
  if (vlab_reduction <= 0) throw ConfigError("model: vlab_reduction must be positive");
}

C2fvlModel::C2fvlModel(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  std::vector<StageConfig> stages;
  int in_ch = 1;
  for (int i = 0; i < cfg_.num_stages(); ++i) {
    StageConfig sc;
    sc.stage_index = i + 1;
    sc.in_channels = in_ch;
    sc.out_channels = cfg_.channels[static_cast<size_t>(i)];
    sc.attention = {cfg_.heads, cfg_.patch[static_cast<size_t>(i)], cfg_.mlp_ratio};
    stages.push_back(sc);
    in_ch = sc.out_channels;
  }
  encoder_ = std::make_unique<Encoder>(stages, cfg_.image_size, cfg_.image_size,
                                       cfg_.bilinear_upsample, rng);
  register_child("encoder", encoder_.get());
  for (int i = 0; i < cfg_.num_stages(); ++i) {
    vlabs_.push_back(std::make_unique<Vlab>(cfg_.channels[static_cast<size_t>(i)],
                                            cfg_.vlab_reduction, cfg_.vlab_share, rng));
    register_child("vlab" + std::to_string(i + 1), vlabs_[static_cast<size_t>(i)].get());
  }
  decoder_ = std::make_unique<Decoder>(cfg_.channels, rng);
  register_child("decoder", decoder_.get());
}

ModelOutput C2fvlModel::forward(const ad::Var& images, const std::vector<TextVector>& texts,
                                bool training) {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != cfg_.image_size || s[3] != cfg_.image_size)
    throw DataShapeError("model: expected (N,1," + std::to_string(cfg_.image_size) + "," +
                         std::to_string(cfg_.image_size) + ") images, got " +
                         images.val().shape_str());
  if (texts.size() != static_cast<size_t>(s[0]))
    throw DataShapeError("model: one text vector per image required");

  ModelOutput out;
  out.pyramid = encoder_->forward(images, training);

  const int stage_count = cfg_.num_stages();
  static const TextVector kOnes{{1, 1, 1, 1, 1, 1, 1, 1}};
  static const TextVector kZeros{};
  for (int i = 0; i < stage_count; ++i) {
    // stage text: Multi gates everywhere, Single only at the deepest stage,
    // None feeds the zero vector
    std::vector<TextVector> stage_texts;
    switch (cfg_.text_mode) {
      case TextMode::Multi:
        stage_texts = texts;
        break;
      case TextMode::Single:
        stage_texts.assign(texts.size(), kOnes);
        if (i == stage_count - 1) stage_texts = texts;
        break;
      case TextMode::None:
        stage_texts.assign(texts.size(), kZeros);
        break;
    }
    const ad::Var& f_enc = out.pyramid[static_cast<size_t>(i)].f_encoder;
    Vlab& vlab = *vlabs_[static_cast<size_t>(i)];
    if (cfg_.gate_after_vlab) {
      auto y = vlab.forward(f_enc);
      out.gated.push_back(y);
      out.vlab_outputs.push_back(apply_text_gating(y, stage_texts, cfg_.normalize_count));
    } else {
      auto gated = apply_text_gating(f_enc, stage_texts, cfg_.normalize_count);
      out.gated.push_back(gated);
      out.vlab_outputs.push_back(vlab.forward(gated));
    }
  }

  // decoder consumes the raw bottleneck; aligned features enter as skips
  out.decoder = decoder_->forward(out.vlab_outputs, out.pyramid.back().f_encoder, training);
  out.logits = out.decoder.logits;
  return out;
}

}  // namespace c2fvl
