#pragma once

#include "c2fvl/nn.hpp"

namespace c2fvl {

// Vision-Language Alignment Block: two per-pixel channel MLP branches pooled
// globally (avg / max), summed, passed through an output MLP and multiplied
// back onto the input as a per-channel recalibration.
class Vlab : public nn::Module {
 public:
  // reduction r must divide channels; share_branches reuses the avg-branch
  // weights for the max branch
  Vlab(int channels, int reduction, bool share_branches, Rng& rng);

  ad::Var forward(const ad::Var& x) const;

  // branch MLPs, 1x1-conv semantics over the channel vector at each pixel
  nn::Conv2d mlp_avg_fc1, mlp_avg_fc2;
  nn::Conv2d mlp_max_fc1, mlp_max_fc2;
  // output MLP over the pooled channel descriptor
  nn::Linear mlp_out_fc1, mlp_out_fc2;

 private:
  bool share_branches_;
};

}  // namespace c2fvl
