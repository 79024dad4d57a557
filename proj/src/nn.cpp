#include "c2fvl/nn.hpp"

#include <cmath>

namespace c2fvl::nn {

std::vector<std::pair<std::string, ad::Var>> Module::named_params() const {
  std::vector<std::pair<std::string, ad::Var>> out = params_;
  for (const auto& [cname, child] : children_)
    for (const auto& [pname, var] : child->named_params())
      out.emplace_back(cname + "." + pname, var);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Module::named_buffers() {
  std::vector<std::pair<std::string, Tensor*>> out = buffers_;
  for (auto& [cname, child] : children_)
    for (auto& [bname, t] : child->named_buffers()) out.emplace_back(cname + "." + bname, t);
  return out;
}

void Module::zero_grad() {
  for (auto& [name, v] : named_params()) v.node_->grad = Tensor();
}

int64_t Module::param_count() const {
  int64_t n = 0;
  for (const auto& [name, v] : named_params()) n += v.val().numel();
  return n;
}

ad::Var Module::register_param(const std::string& name, Tensor init) {
  ad::Var v = ad::parameter(std::move(init));
  params_.emplace_back(name, v);
  return v;
}

void Module::register_buffer(const std::string& name, Tensor* t) {
  buffers_.emplace_back(name, t);
}

void Module::register_child(const std::string& name, Module* m) {
  children_.emplace_back(name, m);
}

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng)
    : stride_(stride), pad_(pad) {
  Tensor w({out_ch, in_ch, kernel, kernel});
  const double std = std::sqrt(2.0 / (static_cast<double>(in_ch) * kernel * kernel));
  for (auto& v : w.data) v = rng.normal(0.0, std);
  weight = register_param("weight", std::move(w));
  bias = register_param("bias", Tensor({out_ch}));
}

ad::Var Conv2d::forward(const ad::Var& x) const { return ad::conv2d(x, weight, bias, stride_, pad_); }

BatchNorm2d::BatchNorm2d(int channels, double momentum, double eps)
    : running_mean({channels}), running_var({channels}, 1.0), momentum_(momentum), eps_(eps) {
  gamma = register_param("gamma", Tensor({channels}, 1.0));
  beta = register_param("beta", Tensor({channels}));
  register_buffer("running_mean", &running_mean);
  register_buffer("running_var", &running_var);
}

ad::Var BatchNorm2d::forward(const ad::Var& x, bool training) {
  const Tensor& X = x.val();
  const int64_t reduce = static_cast<int64_t>(X.shape[0]) * X.shape[2] * X.shape[3];
  const bool batch_stats = training && reduce > 1;
  return ad::batchnorm2d(x, gamma, beta, &running_mean, &running_var, batch_stats, momentum_,
                         eps_);
}

Linear::Linear(int in_dim, int out_dim, Rng& rng) {
  Tensor w({out_dim, in_dim});
  const double bound = std::sqrt(6.0 / (in_dim + out_dim));
  for (auto& v : w.data) v = rng.uniform(-bound, bound);
  weight = register_param("weight", std::move(w));
  bias = register_param("bias", Tensor({out_dim}));
}

ad::Var Linear::forward(const ad::Var& x) const { return ad::linear(x, weight, bias); }

LayerNorm::LayerNorm(int dim, double eps) : eps_(eps) {
  gamma = register_param("gamma", Tensor({dim}, 1.0));
  beta = register_param("beta", Tensor({dim}));
}

ad::Var LayerNorm::forward(const ad::Var& x) const { return ad::layernorm(x, gamma, beta, eps_); }

}  // namespace c2fvl::nn
