#include "c2fvl/vlab.hpp"

namespace c2fvl {

Vlab::Vlab(int channels, int reduction, bool share_branches, Rng& rng)
    : mlp_avg_fc1(channels, channels / std::max(1, reduction), 1, 1, 0, rng),
      mlp_avg_fc2(channels / std::max(1, reduction), channels, 1, 1, 0, rng),
      mlp_max_fc1(channels, channels / std::max(1, reduction), 1, 1, 0, rng),
      mlp_max_fc2(channels / std::max(1, reduction), channels, 1, 1, 0, rng),
      mlp_out_fc1(channels, channels / std::max(1, reduction), rng),
      mlp_out_fc2(channels / std::max(1, reduction), channels, rng),
      share_branches_(share_branches) {
  if (reduction <= 0 || channels % reduction != 0)
    throw ReductionNotDividing("vlab: reduction " + std::to_string(reduction) +
                               " does not divide channels " + std::to_string(channels));
  register_child("mlp_avg_fc1", &mlp_avg_fc1);
  register_child("mlp_avg_fc2", &mlp_avg_fc2);
  if (!share_branches) {
    register_child("mlp_max_fc1", &mlp_max_fc1);
    register_child("mlp_max_fc2", &mlp_max_fc2);
  }
  register_child("mlp_out_fc1", &mlp_out_fc1);
  register_child("mlp_out_fc2", &mlp_out_fc2);
}

ad::Var Vlab::forward(const ad::Var& x) const {
  if (x.shape().size() != 4) throw ShapeMismatch("vlab: expected NCHW input");

  auto branch = [&](const nn::Conv2d& fc1, const nn::Conv2d& fc2) {
    return fc2.forward(ad::relu(fc1.forward(x)));
  };
  auto mapped_avg = branch(mlp_avg_fc1, mlp_avg_fc2);
  auto mapped_max = share_branches_ ? branch(mlp_avg_fc1, mlp_avg_fc2)
                                    : branch(mlp_max_fc1, mlp_max_fc2);
  auto f_avg = ad::global_avg_pool(mapped_avg);  // (N,C)
  auto f_max = ad::global_max_pool(mapped_max);  // (N,C)
  auto pooled = ad::add(f_avg, f_max);
  auto scale = mlp_out_fc2.forward(ad::relu(mlp_out_fc1.forward(pooled)));
  return ad::scale_channels(x, scale);
}

}  // namespace c2fvl
