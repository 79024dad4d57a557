#pragma once

#include <string>
#include <utility>
#include <vector>

#include "c2fvl/autodiff.hpp"
#include "c2fvl/rng.hpp"

namespace c2fvl::nn {

// Base with a named-parameter registry. Registration order is fixed by
// construction order, which makes checkpoints byte-stable.
class Module {
 public:
  virtual ~Module() = default;

  // flattened (name, var) pairs, children prefixed "child."
  std::vector<std::pair<std::string, ad::Var>> named_params() const;
  // mutable views of persistent non-learnable state (batchnorm running stats)
  std::vector<std::pair<std::string, Tensor*>> named_buffers();

  void zero_grad();
  int64_t param_count() const;

 protected:
  ad::Var register_param(const std::string& name, Tensor init);
  void register_buffer(const std::string& name, Tensor* t);
  void register_child(const std::string& name, Module* m);

 private:
  std::vector<std::pair<std::string, ad::Var>> params_;
  std::vector<std::pair<std::string, Tensor*>> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
};

class Conv2d : public Module {
 public:
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng);
  ad::Var forward(const ad::Var& x) const;

  ad::Var weight, bias;

 private:
  int stride_, pad_;
};

class BatchNorm2d : public Module {
 public:
  BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5);
  // batch statistics in training (falling back to running statistics when the
  // per-channel reduce count is 1), running statistics in eval
  ad::Var forward(const ad::Var& x, bool training);

  ad::Var gamma, beta;
  Tensor running_mean, running_var;

 private:
  double momentum_, eps_;
};

class Linear : public Module {
 public:
  Linear(int in_dim, int out_dim, Rng& rng);
  ad::Var forward(const ad::Var& x) const;

  ad::Var weight, bias;
};

class LayerNorm : public Module {
 public:
  explicit LayerNorm(int dim, double eps = 1e-5);
  ad::Var forward(const ad::Var& x) const;

  ad::Var gamma, beta;

 private:
  double eps_;
};

}  // namespace c2fvl::nn
