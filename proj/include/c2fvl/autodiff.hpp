#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "c2fvl/tensor.hpp"

namespace c2fvl::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor val;
  Tensor grad;  // allocated lazily to val's shape on first accumulation
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents
};

// Handle to a node of the dynamically built computation graph.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& val() const { return node_->val; }
  Tensor& val() { return node_->val; }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  const std::vector<int>& shape() const { return node_->val.shape; }
  void zero_grad();

  NodePtr node_;  // exposed for op internals and the optimizer
};

Var constant(Tensor t);
Var parameter(Tensor t);

// While a guard is alive, ops do not record backward closures (FD probes, eval).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

// Backpropagate from a scalar root through the recorded graph.
void backward(const Var& root);

Tensor& ensure_grad(Node& n);

// ---- elementwise (same shape unless noted) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& a, double c);
Var relu(const Var& a);
Var gelu(const Var& a);
Var sigmoid(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var clamp(const Var& a, double lo, double hi);

// ---- reductions / reshaping ----
Var sum(const Var& a);   // -> [1]
Var mean(const Var& a);  // -> [1]
Var reshape(const Var& a, std::vector<int> shape);
Var permute(const Var& a, const std::vector<int>& axes);
Var slice_lastdim(const Var& a, int c0, int c1);

// ---- matrix / attention primitives ----
// (..., m, k) x (..., k, n) with identical leading dims
Var matmul(const Var& a, const Var& b);
Var transpose_last2(const Var& a);
Var softmax_lastdim(const Var& a);
// x (..., in), w (out, in), b (out) -> (..., out)
Var linear(const Var& x, const Var& w, const Var& b);
// normalize over last dim; gamma/beta length = last dim
Var layernorm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// x (N,T,D) + pe (T,D)
Var add_broadcast_rows(const Var& x, const Var& pe);

// ---- convolution / pooling / resampling (NCHW) ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
// use_batch_stats: normalize by per-batch statistics (and update the running
// buffers); otherwise normalize by the provided running statistics.
Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, Tensor* running_mean,
                Tensor* running_var, bool use_batch_stats, double momentum, double eps);
Var maxpool2x2(const Var& x);
Var global_avg_pool(const Var& x);  // (N,C,H,W) -> (N,C)
Var global_max_pool(const Var& x);  // ties route to the first max in scan order
Var upsample_nearest(const Var& x, int factor);
Var upsample_bilinear(const Var& x, int factor);
Var avgpool_factor(const Var& x, int factor);
Var channel_mean(const Var& x);  // (N,C,H,W) -> (N,1,H,W)
Var concat_channels(const Var& a, const Var& b);
// x (N,C,H,W) * s (N,C) with s a differentiable Var
Var scale_channels(const Var& x, const Var& s);
// x (N,C,H,W) * gate (N,C); gate is a plain constant, gradient flows to x only
Var mul_channels_const(const Var& x, const Tensor& gate);

// Per-sample 1 - cos(a_n, b_n) over flattened samples -> (N).
// A sample whose reduced vector has zero norm contributes exactly 1 with zero
// gradient; *flagged is set when that guard fires.
Var cosine_distance_per_sample(const Var& a, const Var& b, bool* flagged);

}  // namespace c2fvl::ad
