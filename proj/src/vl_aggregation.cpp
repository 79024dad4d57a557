#include "c2fvl/vl_aggregation.hpp"

namespace c2fvl {

std::vector<double> repeat_text(const TextVector& v, int channels) {
  if (channels <= 0 || channels % 8 != 0)
    throw ChannelsNotDivisibleBy8("repeat_text: channels = " + std::to_string(channels));
  std::vector<double> out(static_cast<size_t>(channels));
  for (int c = 0; c < channels; ++c) out[static_cast<size_t>(c)] = static_cast<double>(v[c % 8]);
  return out;
}

Tensor build_gate(const std::vector<TextVector>& vs, int channels, bool normalize_count) {
  if (channels <= 0 || channels % 8 != 0)
    throw ChannelsNotDivisibleBy8("build_gate: channels = " + std::to_string(channels));
  Tensor gate({static_cast<int>(vs.size()), channels});
  for (size_t n = 0; n < vs.size(); ++n) {
    auto row = repeat_text(vs[n], channels);
    if (normalize_count)
      for (int c = 1; c < channels; c += 8) row[static_cast<size_t>(c)] /= 9.0;
    for (int c = 0; c < channels; ++c) gate(static_cast<int>(n), c) = row[static_cast<size_t>(c)];
  }
  return gate;
}

ad::Var apply_text_gating(const ad::Var& f_encoder, const TextVector& v, bool normalize_count) {
  return apply_text_gating(f_encoder, std::vector<TextVector>(f_encoder.shape()[0], v),
                           normalize_count);
}

ad::Var apply_text_gating(const ad::Var& f_encoder, const std::vector<TextVector>& vs,
                          bool normalize_count) {
  const auto& s = f_encoder.shape();
  if (static_cast<int>(vs.size()) != s[0])
    throw ShapeMismatch("apply_text_gating: batch size vs text vectors");
  return ad::mul_channels_const(f_encoder, build_gate(vs, s[1], normalize_count));
}

}  // namespace c2fvl
