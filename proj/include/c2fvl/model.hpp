#pragma once

#include <cstdint>
#include <vector>

#include "c2fvl/decoder.hpp"
#include "c2fvl/encoder.hpp"
#include "c2fvl/vl_aggregation.hpp"
#include "c2fvl/vlab.hpp"

namespace c2fvl {

struct ModelConfig {
  int image_size = 64;
  std::vector<int> channels = {16, 32, 64, 128};
  int heads = 4;
  std::vector<int> patch = {2, 2, 2, 2};  // per-stage token patch
  double mlp_ratio = 2.0;
  int vlab_reduction = 4;
  bool vlab_share = false;
  bool bilinear_upsample = false;
  bool gate_after_vlab = false;  // ablation: apply Eq. 3 after VLAB instead of before
  bool normalize_count = false;  // divide v[1] by 9 before gating
  TextMode text_mode = TextMode::Multi;

  int num_stages() const { return static_cast<int>(channels.size()); }
  void validate() const;
};

struct ModelOutput {
  FeaturePyramid pyramid;
  std::vector<ad::Var> gated;         // F_vl,i per stage
  std::vector<ad::Var> vlab_outputs;  // y_i per stage, shallow->deep
  DecoderResult decoder;
  ad::Var logits;
};

class C2fvlModel : public nn::Module {
 public:
  C2fvlModel(const ModelConfig& cfg, uint64_t seed);

  ModelOutput forward(const ad::Var& images, const std::vector<TextVector>& texts, bool training);

  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  std::unique_ptr<Encoder> encoder_;
  std::vector<std::unique_ptr<Vlab>> vlabs_;
  std::unique_ptr<Decoder> decoder_;
};

}  // namespace c2fvl
