#pragma once

#include <vector>

#include "c2fvl/autodiff.hpp"
#include "c2fvl/report_codec.hpp"

namespace c2fvl {

// How report vectors reach the image pathway.
enum class TextMode {
  None,    // zero vector everywhere (text pathway ablated)
  Single,  // text gates only the deepest stage
  Multi,   // text gates every stage (default)
};

// channels/8 consecutive copies of v (Eq. 3 tiling)
std::vector<double> repeat_text(const TextVector& v, int channels);

// Per-sample channel gate rows for a batch; optional count normalization
// divides v[1] by 9 before gating (config flag, default off).
Tensor build_gate(const std::vector<TextVector>& vs, int channels, bool normalize_count);

// F_vl = F_encoder ⊙ tiled text (Eq. 3); gradient flows to the features only.
ad::Var apply_text_gating(const ad::Var& f_encoder, const TextVector& v,
                          bool normalize_count = false);
ad::Var apply_text_gating(const ad::Var& f_encoder, const std::vector<TextVector>& vs,
                          bool normalize_count = false);

}  // namespace c2fvl
