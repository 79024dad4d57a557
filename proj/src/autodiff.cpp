#include "c2fvl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace c2fvl::ad {

namespace {

thread_local int g_no_grad_depth = 0;

Var make_node(Tensor val, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  bool req = false;
  if (g_no_grad_depth == 0) {
    for (const auto& p : parents)
      if (p.requires_grad()) req = true;
  }
  n->requires_grad = req;
  if (req) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node_);
    n->backward_fn = std::move(fn);
  }
  Var v;
  v.node_ = std::move(n);
  return v;
}

int64_t rows_of(const Tensor& t, int last) { return t.numel() / last; }

}  // namespace

Var::Var(Tensor value, bool requires_grad) {
  node_ = std::make_shared<Node>();
  node_->val = std::move(value);
  node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
  if (node_) node_->grad = Tensor();
}

Var constant(Tensor t) { return Var(std::move(t), false); }
Var parameter(Tensor t) { return Var(std::move(t), true); }

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Tensor& ensure_grad(Node& n) {
  if (n.grad.data.empty()) n.grad = Tensor(n.val.shape);
  return n.grad;
}

void backward(const Var& root) {
  if (root.val().numel() != 1) throw ShapeMismatch("backward: root must be scalar");
  if (!root.node_->requires_grad) return;

  // iterative DFS postorder over grad-requiring nodes
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node_.get(), 0);
  visited.insert(root.node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  ensure_grad(*root.node_).data[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.data.empty()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a.val(), b.val(), "add");
  Tensor out = a.val();
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += b.val().data[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Tensor& ga = ensure_grad(*self.parents[0]);
    Tensor& gb = ensure_grad(*self.parents[1]);
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      ga.data[i] += self.grad.data[i];
      gb.data[i] += self.grad.data[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.val(), b.val(), "sub");
  Tensor out = a.val();
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] -= b.val().data[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Tensor& ga = ensure_grad(*self.parents[0]);
    Tensor& gb = ensure_grad(*self.parents[1]);
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      ga.data[i] += self.grad.data[i];
      gb.data[i] -= self.grad.data[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.val(), b.val(), "mul");
  Tensor out = a.val();
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= b.val().data[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->val;
    const Tensor& bv = self.parents[1]->val;
    Tensor& ga = ensure_grad(*self.parents[0]);
    Tensor& gb = ensure_grad(*self.parents[1]);
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      ga.data[i] += self.grad.data[i] * bv.data[i];
      gb.data[i] += self.grad.data[i] * av.data[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a.val(), b.val(), "div");
  Tensor out = a.val();
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] /= b.val().data[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->val;
    const Tensor& bv = self.parents[1]->val;
    Tensor& ga = ensure_grad(*self.parents[0]);
    Tensor& gb = ensure_grad(*self.parents[1]);
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      const double inv = 1.0 / bv.data[i];
      ga.data[i] += self.grad.data[i] * inv;
      gb.data[i] -= self.grad.data[i] * av.data[i] * inv * inv;
    }
  });
}

Var add_scalar(const Var& a, double c) {
  Tensor out = a.val();
  for (auto& v : out.data) v += c;
  return make_node(std::move(out), {a}, [](Node& self) {
    Tensor& ga = ensure_grad(*self.parents[0]);
    for (int64_t i = 0; i < self.grad.numel(); ++i) ga.data[i] += self.grad.data[i];
  });
}

Var mul_scalar(const Var& a, double c) {
  Tensor out = a.val();
  for (auto& v : out.data) v *= c;
  return make_node(std::move(out), {a}, [c](Node& self) {
    Tensor& ga = ensure_grad(*self.parents[0]);
    for (int64_t i = 0; i < self.grad.numel(); ++i) ga.data[i] += c * self.grad.data[i];
  });
}

Var relu(const Var& a) {
  Tensor out = a.val();
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  return make_node(std::move(out), {a}, [](Node& self) {
    const Tensor& x = self.parents[0]->val;
    Tensor& ga = ensure_grad(*self.parents[0]);
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      if (x.data[i] > 0.0) ga.data[i] += self.grad.data[i];
  });
}

Var gelu(const Var& a) {
  static constexpr double kInvSqrt2 = 0.7071067811865475244;
  static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  Tensor out = a.val();
  for (auto& v : out.data) v = v * 0.5 * (1.0 + std::erf(v * kInvSqrt2));
  return make_node(std::move(out), {a}, [](Node& self) {
    const Tensor& x = self.parents[0]->val;
    Tensor& ga = ensure_grad(*self.parents[0]);
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      const double xv = x.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(xv * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xv * xv);
      ga.data[i] += self.grad.data[i] * (cdf + xv * pdf);
    }
  });
}

Var sigmoid(const Var& a) {
  Tensor out = a.val();
  for (auto& v : out.data) {
    if (v >= 0.0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  return make_node(std::move(out), {a}, [](Node& self) {
    const Tensor& y = self.val;
    Tensor& ga = ensure_grad(*self.parents[0]);
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      ga.data[i] += self.grad.data[i] * y.data[i] * (1.0 - y.data[i]);
  });
}

Var log(const Var& a) {
  Tensor out = a.val();
  for (auto& v : out.data) v = std::log(v);
  return make_node(std::move(out), {a}, [](Node& self) {
    const Tensor& x = self.parents[0]->val;
    Tensor& ga = ensure_grad(*self.parents[0]);
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      ga.data[i] += self.grad.data[i] / x.data[i];
  });
}

Var sqrt(const Var& a) {
  Tensor out = a.val();
  for (auto& v : out.data) v = std::sqrt(v);
  return make_node(std::move(out), {a}, [](Node& self) {
    const Tensor& y = self.val;
    Tensor& ga = ensure_grad(*self.parents[0]);
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      ga.data[i] += self.grad.data[i] * 0.5 / y.data[i];
  });
}

Var clamp(const Var& a, double lo, double hi) {
  Tensor out = a.val();
  for (auto& v : out.data) v = std::min(hi, std::max(lo, v));
  return make_node(std::move(out), {a}, [lo, hi](Node& self) {
    const Tensor& x = self.parents[0]->val;
    Tensor& ga = ensure_grad(*self.parents[0]);
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      if (x.data[i] > lo && x.data[i] < hi) ga.data[i] += self.grad.data[i];
  });
}

// ---------------------------------------------------------------------------
// reductions / reshaping
// ---------------------------------------------------------------------------

Var sum(const Var& a) {
  Tensor out({1});
  double s = 0.0;
  for (double v : a.val().data) s += v;
  out.data[0] = s;
  return make_node(std::move(out), {a}, [](Node& self) {
    Tensor& ga = ensure_grad(*self.parents[0]);
    const double g = self.grad.data[0];
    for (auto& v : ga.data) v += g;
  });
}

Var mean(const Var& a) {
  const double inv = 1.0 / static_cast<double>(a.val().numel());
  Tensor out({1});
  double s = 0.0;
  for (double v : a.val().data) s += v;
  out.data[0] = s * inv;
  return make_node(std::move(out), {a}, [inv](Node& self) {
    Tensor& ga = ensure_grad(*self.parents[0]);
    const double g = self.grad.data[0] * inv;
    for (auto& v : ga.data) v += g;
  });
}

Var reshape(const Var& a, std::vector<int> shape) {
  if (Tensor::numel_of(shape) != a.val().numel())
    throw ShapeMismatch("reshape: numel mismatch " + a.val().shape_str());
  Tensor out = a.val();
  out.shape = std::move(shape);
  return make_node(std::move(out), {a}, [](Node& self) {
    Tensor& ga = ensure_grad(*self.parents[0]);
    for (int64_t i = 0; i < self.grad.numel(); ++i) ga.data[i] += self.grad.data[i];
  });
}

Var permute(const Var& a, const std::vector<int>& axes) {
  const Tensor& x = a.val();
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) throw ShapeMismatch("permute: axes rank");
  std::vector<int> oshape(r);
  for (int i = 0; i < r; ++i) oshape[i] = x.shape[axes[i]];
  std::vector<int64_t> istride(r, 1), map(x.numel());
  for (int i = r - 2; i >= 0; --i) istride[i] = istride[i + 1] * x.shape[i + 1];
  // map[out_index] = in_index
  std::vector<int> idx(r, 0);
  for (int64_t o = 0; o < x.numel(); ++o) {
    int64_t in = 0;
    for (int i = 0; i < r; ++i) in += static_cast<int64_t>(idx[i]) * istride[axes[i]];
    map[o] = in;
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[i] < oshape[i]) break;
      idx[i] = 0;
    }
  }
  Tensor out(oshape);
  for (int64_t o = 0; o < out.numel(); ++o) out.data[o] = x.data[map[o]];
  return make_node(std::move(out), {a}, [map = std::move(map)](Node& self) {
    Tensor& ga = ensure_grad(*self.parents[0]);
    for (int64_t o = 0; o < self.grad.numel(); ++o) ga.data[map[o]] += self.grad.data[o];
  });
}

Var slice_lastdim(const Var& a, int c0, int c1) {
  const Tensor& x = a.val();
  const int last = x.shape.back();
  if (c0 < 0 || c1 > last || c0 >= c1) throw ShapeMismatch("slice_lastdim: bad range");
  const int64_t rows = rows_of(x, last);
  const int w = c1 - c0;
  std::vector<int> oshape = x.shape;
  oshape.back() = w;
  Tensor out(oshape);
  for (int64_t rr = 0; rr < rows; ++rr)
    std::memcpy(&out.data[rr * w], &x.data[rr * last + c0], sizeof(double) * w);
  return make_node(std::move(out), {a}, [c0, w, last, rows](Node& self) {
    Tensor& ga = ensure_grad(*self.parents[0]);
    for (int64_t rr = 0; rr < rows; ++rr)
      for (int j = 0; j < w; ++j) ga.data[rr * last + c0 + j] += self.grad.data[rr * w + j];
  });
}

// ---------------------------------------------------------------------------
// matrix / attention primitives
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  const int ra = A.rank(), rb = B.rank();
  if (ra < 2 || ra != rb) throw ShapeMismatch("matmul: rank");
  for (int i = 0; i < ra - 2; ++i)
    if (A.shape[i] != B.shape[i]) throw ShapeMismatch("matmul: batch dims");
  const int m = A.shape[ra - 2], k = A.shape[ra - 1];
  const int k2 = B.shape[rb - 2], n = B.shape[rb - 1];
  if (k != k2) throw ShapeMismatch("matmul: inner dims " + A.shape_str() + " x " + B.shape_str());
  int64_t batch = 1;
  for (int i = 0; i < ra - 2; ++i) batch *= A.shape[i];
  std::vector<int> oshape(A.shape.begin(), A.shape.end() - 2);
  oshape.push_back(m);
  oshape.push_back(n);
  Tensor out(oshape);
  for (int64_t t = 0; t < batch; ++t)
    mat_mul(&A.data[t * m * k], &B.data[t * k * n], &out.data[t * m * n], m, k, n);
  return make_node(std::move(out), {a, b}, [batch, m, k, n](Node& self) {
    const Tensor& A = self.parents[0]->val;
    const Tensor& B = self.parents[1]->val;
    Tensor& ga = ensure_grad(*self.parents[0]);
    Tensor& gb = ensure_grad(*self.parents[1]);
    for (int64_t t = 0; t < batch; ++t) {
      const double* dC = &self.grad.data[t * m * n];
      // dA = dC * B^T ; dB = A^T * dC
      mat_mul_nt(dC, &B.data[t * k * n], &ga.data[t * m * k], m, n, k, true);
      mat_mul_tn(&A.data[t * m * k], dC, &gb.data[t * k * n], k, m, n, true);
    }
  });
}

Var transpose_last2(const Var& a) {
  const Tensor& x = a.val();
  const int r = x.rank();
  if (r < 2) throw ShapeMismatch("transpose_last2: rank");
  std::vector<int> axes(r);
  for (int i = 0; i < r; ++i) axes[i] = i;
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(a, axes);
}

Var softmax_lastdim(const Var& a) {
  const Tensor& x = a.val();
  const int last = x.shape.back();
  const int64_t rows = rows_of(x, last);
  Tensor out = x;
  for (int64_t rr = 0; rr < rows; ++rr) {
    double* row = &out.data[rr * last];
    double mx = row[0];
    for (int j = 1; j < last; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < last; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    const double inv = 1.0 / s;
    for (int j = 0; j < last; ++j) row[j] *= inv;
  }
  return make_node(std::move(out), {a}, [last, rows](Node& self) {
    const Tensor& y = self.val;
    Tensor& ga = ensure_grad(*self.parents[0]);
    for (int64_t rr = 0; rr < rows; ++rr) {
      const double* yr = &y.data[rr * last];
      const double* gr = &self.grad.data[rr * last];
      double s = 0.0;
      for (int j = 0; j < last; ++j) s += gr[j] * yr[j];
      double* gx = &ga.data[rr * last];
      for (int j = 0; j < last; ++j) gx[j] += yr[j] * (gr[j] - s);
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& X = x.val();
  const Tensor& W = w.val();
  const int in = X.shape.back();
  if (W.rank() != 2 || W.shape[1] != in)
    throw ShapeMismatch("linear: weight " + W.shape_str() + " input " + X.shape_str());
  const int out_dim = W.shape[0];
  if (b.val().numel() != out_dim) throw ShapeMismatch("linear: bias");
  const int64_t rows = rows_of(X, in);
  std::vector<int> oshape = X.shape;
  oshape.back() = out_dim;
  Tensor out(oshape);
  mat_mul_nt(X.data.data(), W.data.data(), out.data.data(), static_cast<int>(rows), in, out_dim);
  for (int64_t rr = 0; rr < rows; ++rr)
    for (int j = 0; j < out_dim; ++j) out.data[rr * out_dim + j] += b.val().data[j];
  return make_node(std::move(out), {x, w, b}, [rows, in, out_dim](Node& self) {
    const Tensor& X = self.parents[0]->val;
    const Tensor& W = self.parents[1]->val;
    Tensor& gx = ensure_grad(*self.parents[0]);
    Tensor& gw = ensure_grad(*self.parents[1]);
    Tensor& gb = ensure_grad(*self.parents[2]);
    const double* dY = self.grad.data.data();
    // dX = dY * W ; dW = dY^T * X ; db = colsum(dY)
    mat_mul(dY, W.data.data(), gx.data.data(), static_cast<int>(rows), out_dim, in, true);
    mat_mul_tn(dY, X.data.data(), gw.data.data(), out_dim, static_cast<int>(rows), in, true);
    for (int64_t rr = 0; rr < rows; ++rr)
      for (int j = 0; j < out_dim; ++j) gb.data[j] += dY[rr * out_dim + j];
  });
}

Var layernorm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& X = x.val();
  const int d = X.shape.back();
  if (gamma.val().numel() != d || beta.val().numel() != d) throw ShapeMismatch("layernorm: affine");
  const int64_t rows = rows_of(X, d);
  Tensor out(X.shape);
  Tensor mu({static_cast<int>(rows)}), istd({static_cast<int>(rows)});
  for (int64_t rr = 0; rr < rows; ++rr) {
    const double* xr = &X.data[rr * d];
    double m = 0.0;
    for (int j = 0; j < d; ++j) m += xr[j];
    m /= d;
    double v = 0.0;
    for (int j = 0; j < d; ++j) v += (xr[j] - m) * (xr[j] - m);
    v /= d;
    const double is = 1.0 / std::sqrt(v + eps);
    mu.data[rr] = m;
    istd.data[rr] = is;
    double* yr = &out.data[rr * d];
    for (int j = 0; j < d; ++j)
      yr[j] = gamma.val().data[j] * (xr[j] - m) * is + beta.val().data[j];
  }
  return make_node(std::move(out), {x, gamma, beta},
                   [rows, d, mu = std::move(mu), istd = std::move(istd)](Node& self) {
                     const Tensor& X = self.parents[0]->val;
                     const Tensor& G = self.parents[1]->val;
                     Tensor& gx = ensure_grad(*self.parents[0]);
                     Tensor& gg = ensure_grad(*self.parents[1]);
                     Tensor& gb = ensure_grad(*self.parents[2]);
                     for (int64_t rr = 0; rr < rows; ++rr) {
                       const double* xr = &X.data[rr * d];
                       const double* gr = &self.grad.data[rr * d];
                       const double m = mu.data[rr];
                       const double is = istd.data[rr];
                       double sum_dxh = 0.0, sum_dxh_xm = 0.0;
                       for (int j = 0; j < d; ++j) {
                         const double dxh = gr[j] * G.data[j];
                         sum_dxh += dxh;
                         sum_dxh_xm += dxh * (xr[j] - m);
                         gg.data[j] += gr[j] * (xr[j] - m) * is;
                         gb.data[j] += gr[j];
                       }
                       const double dvar = sum_dxh_xm * (-0.5) * is * is * is;
                       double sum_xm = 0.0;
                       for (int j = 0; j < d; ++j) sum_xm += xr[j] - m;
                       const double dmean = -is * sum_dxh + dvar * (-2.0 / d) * sum_xm;
                       double* gxr = &gx.data[rr * d];
                       for (int j = 0; j < d; ++j) {
                         const double dxh = gr[j] * G.data[j];
                         gxr[j] += dxh * is + dvar * 2.0 * (xr[j] - m) / d + dmean / d;
                       }
                     }
                   });
}

Var add_broadcast_rows(const Var& x, const Var& pe) {
  const Tensor& X = x.val();
  const Tensor& P = pe.val();
  if (X.rank() != 3 || P.rank() != 2 || X.shape[1] != P.shape[0] || X.shape[2] != P.shape[1])
    throw ShapeMismatch("add_broadcast_rows: " + X.shape_str() + " + " + P.shape_str());
  const int n = X.shape[0];
  const int64_t plane = P.numel();
  Tensor out = X;
  for (int i = 0; i < n; ++i)
    for (int64_t j = 0; j < plane; ++j) out.data[i * plane + j] += P.data[j];
  return make_node(std::move(out), {x, pe}, [n, plane](Node& self) {
    Tensor& gx = ensure_grad(*self.parents[0]);
    Tensor& gp = ensure_grad(*self.parents[1]);
    for (int i = 0; i < n; ++i)
      for (int64_t j = 0; j < plane; ++j) {
        gx.data[i * plane + j] += self.grad.data[i * plane + j];
        gp.data[j] += self.grad.data[i * plane + j];
      }
  });
}

// ---------------------------------------------------------------------------
// convolution / pooling / resampling
// ---------------------------------------------------------------------------

namespace {

void im2col(const double* x, int c_in, int h, int w, int kh, int kw, int stride, int pad,
            int ho, int wo, double* col) {
  // col is (c_in*kh*kw, ho*wo)
  for (int c = 0; c < c_in; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        double* crow = col + (static_cast<size_t>(c) * kh * kw + ki * kw + kj) *
                                 static_cast<size_t>(ho) * wo;
        for (int i = 0; i < ho; ++i) {
          const int yi = i * stride + ki - pad;
          if (yi < 0 || yi >= h) {
            std::memset(crow + static_cast<size_t>(i) * wo, 0, sizeof(double) * wo);
            continue;
          }
          const double* xrow = x + (static_cast<size_t>(c) * h + yi) * w;
          for (int j = 0; j < wo; ++j) {
            const int xj = j * stride + kj - pad;
            crow[static_cast<size_t>(i) * wo + j] = (xj < 0 || xj >= w) ? 0.0 : xrow[xj];
          }
        }
      }
    }
  }
}

void col2im_accum(const double* col, int c_in, int h, int w, int kh, int kw, int stride, int pad,
                  int ho, int wo, double* gx) {
  for (int c = 0; c < c_in; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const double* crow = col + (static_cast<size_t>(c) * kh * kw + ki * kw + kj) *
                                       static_cast<size_t>(ho) * wo;
        for (int i = 0; i < ho; ++i) {
          const int yi = i * stride + ki - pad;
          if (yi < 0 || yi >= h) continue;
          double* grow = gx + (static_cast<size_t>(c) * h + yi) * w;
          for (int j = 0; j < wo; ++j) {
            const int xj = j * stride + kj - pad;
            if (xj >= 0 && xj < w) grow[xj] += crow[static_cast<size_t>(i) * wo + j];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor& X = x.val();
  const Tensor& W = w.val();
  if (X.rank() != 4 || W.rank() != 4) throw ShapeMismatch("conv2d: rank");
  const int n = X.shape[0], c_in = X.shape[1], h = X.shape[2], wd = X.shape[3];
  const int c_out = W.shape[0], kh = W.shape[2], kw = W.shape[3];
  if (W.shape[1] != c_in)
    throw ShapeMismatch("conv2d: channels " + X.shape_str() + " w " + W.shape_str());
  if (b.val().numel() != c_out) throw ShapeMismatch("conv2d: bias");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  if ((h + 2 * pad - kh) % stride != 0 || (wd + 2 * pad - kw) % stride != 0 || ho <= 0 || wo <= 0)
    throw ShapeMismatch("conv2d: geometry " + X.shape_str());
  const int k = c_in * kh * kw;
  const int64_t spatial = static_cast<int64_t>(ho) * wo;

  Tensor out({n, c_out, ho, wo});
  std::vector<double> col(static_cast<size_t>(k) * spatial);
  for (int s = 0; s < n; ++s) {
    im2col(&X.data[static_cast<size_t>(s) * c_in * h * wd], c_in, h, wd, kh, kw, stride, pad, ho,
           wo, col.data());
    double* y = &out.data[static_cast<size_t>(s) * c_out * spatial];
    mat_mul(W.data.data(), col.data(), y, c_out, k, static_cast<int>(spatial));
    for (int c = 0; c < c_out; ++c) {
      const double bias = b.val().data[c];
      double* yrow = y + static_cast<size_t>(c) * spatial;
      for (int64_t j = 0; j < spatial; ++j) yrow[j] += bias;
    }
  }
  return make_node(
      std::move(out), {x, w, b},
      [n, c_in, h, wd, c_out, kh, kw, stride, pad, ho, wo, k, spatial](Node& self) {
        const Tensor& X = self.parents[0]->val;
        const Tensor& W = self.parents[1]->val;
        Tensor& gx = ensure_grad(*self.parents[0]);
        Tensor& gw = ensure_grad(*self.parents[1]);
        Tensor& gb = ensure_grad(*self.parents[2]);
        std::vector<double> col(static_cast<size_t>(k) * spatial);
        std::vector<double> dcol(static_cast<size_t>(k) * spatial);
        for (int s = 0; s < n; ++s) {
          const double* dy = &self.grad.data[static_cast<size_t>(s) * c_out * spatial];
          im2col(&X.data[static_cast<size_t>(s) * c_in * h * wd], c_in, h, wd, kh, kw, stride,
                 pad, ho, wo, col.data());
          // dW += dY * col^T ; dcol = W^T * dY
          mat_mul_nt(dy, col.data(), gw.data.data(), c_out, static_cast<int>(spatial), k, true);
          mat_mul_tn(W.data.data(), dy, dcol.data(), k, c_out, static_cast<int>(spatial));
          col2im_accum(dcol.data(), c_in, h, wd, kh, kw, stride, pad, ho, wo,
                       &gx.data[static_cast<size_t>(s) * c_in * h * wd]);
          for (int c = 0; c < c_out; ++c) {
            const double* dyrow = dy + static_cast<size_t>(c) * spatial;
            double acc = 0.0;
            for (int64_t j = 0; j < spatial; ++j) acc += dyrow[j];
            gb.data[c] += acc;
          }
        }
      });
}

Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, Tensor* running_mean,
                Tensor* running_var, bool use_batch_stats, double momentum, double eps) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw ShapeMismatch("batchnorm2d: rank");
  const int n = X.shape[0], c = X.shape[1], h = X.shape[2], w = X.shape[3];
  if (gamma.val().numel() != c || beta.val().numel() != c) throw ShapeMismatch("batchnorm2d: affine");
  const int64_t m = static_cast<int64_t>(n) * h * w;
  const int64_t plane = static_cast<int64_t>(h) * w;

  Tensor mean_t({c}), var_t({c});
  if (use_batch_stats) {
    if (m < 2) throw ShapeMismatch("batchnorm2d: batch statistics need more than one value");
    for (int ci = 0; ci < c; ++ci) {
      double s = 0.0;
      for (int s0 = 0; s0 < n; ++s0) {
        const double* xp = &X.data[(static_cast<size_t>(s0) * c + ci) * plane];
        for (int64_t j = 0; j < plane; ++j) s += xp[j];
      }
      const double mu = s / static_cast<double>(m);
      double v = 0.0;
      for (int s0 = 0; s0 < n; ++s0) {
        const double* xp = &X.data[(static_cast<size_t>(s0) * c + ci) * plane];
        for (int64_t j = 0; j < plane; ++j) v += (xp[j] - mu) * (xp[j] - mu);
      }
      mean_t.data[ci] = mu;
      var_t.data[ci] = v / static_cast<double>(m);
    }
    if (running_mean && running_var) {
      const double unbias = static_cast<double>(m) / static_cast<double>(m - 1);
      for (int ci = 0; ci < c; ++ci) {
        running_mean->data[ci] =
            (1.0 - momentum) * running_mean->data[ci] + momentum * mean_t.data[ci];
        running_var->data[ci] =
            (1.0 - momentum) * running_var->data[ci] + momentum * var_t.data[ci] * unbias;
      }
    }
  } else {
    mean_t.data = running_mean->data;
    var_t.data = running_var->data;
  }

  Tensor out(X.shape);
  for (int s0 = 0; s0 < n; ++s0) {
    for (int ci = 0; ci < c; ++ci) {
      const double mu = mean_t.data[ci];
      const double is = 1.0 / std::sqrt(var_t.data[ci] + eps);
      const double g = gamma.val().data[ci];
      const double bt = beta.val().data[ci];
      const double* xp = &X.data[(static_cast<size_t>(s0) * c + ci) * plane];
      double* yp = &out.data[(static_cast<size_t>(s0) * c + ci) * plane];
      for (int64_t j = 0; j < plane; ++j) yp[j] = g * (xp[j] - mu) * is + bt;
    }
  }
  return make_node(
      std::move(out), {x, gamma, beta},
      [n, c, plane, m, eps, use_batch_stats, mean_t = std::move(mean_t),
       var_t = std::move(var_t)](Node& self) {
        const Tensor& X = self.parents[0]->val;
        const Tensor& G = self.parents[1]->val;
        Tensor& gx = ensure_grad(*self.parents[0]);
        Tensor& gg = ensure_grad(*self.parents[1]);
        Tensor& gb = ensure_grad(*self.parents[2]);
        for (int ci = 0; ci < c; ++ci) {
          const double mu = mean_t.data[ci];
          const double is = 1.0 / std::sqrt(var_t.data[ci] + eps);
          const double g = G.data[ci];
          double sum_dy = 0.0, sum_dy_xh = 0.0;
          for (int s0 = 0; s0 < n; ++s0) {
            const double* xp = &X.data[(static_cast<size_t>(s0) * c + ci) * plane];
            const double* dyp = &self.grad.data[(static_cast<size_t>(s0) * c + ci) * plane];
            for (int64_t j = 0; j < plane; ++j) {
              sum_dy += dyp[j];
              sum_dy_xh += dyp[j] * (xp[j] - mu) * is;
            }
          }
          gg.data[ci] += sum_dy_xh;
          gb.data[ci] += sum_dy;
          if (use_batch_stats) {
            // dx via batch-statistic chain rule
            const double inv_m = 1.0 / static_cast<double>(m);
            for (int s0 = 0; s0 < n; ++s0) {
              const double* xp = &X.data[(static_cast<size_t>(s0) * c + ci) * plane];
              const double* dyp = &self.grad.data[(static_cast<size_t>(s0) * c + ci) * plane];
              double* gxp = &gx.data[(static_cast<size_t>(s0) * c + ci) * plane];
              for (int64_t j = 0; j < plane; ++j) {
                const double xh = (xp[j] - mu) * is;
                gxp[j] += g * is * (dyp[j] - inv_m * sum_dy - inv_m * xh * sum_dy_xh);
              }
            }
          } else {
            const double scale = g * is;
            for (int s0 = 0; s0 < n; ++s0) {
              const double* dyp = &self.grad.data[(static_cast<size_t>(s0) * c + ci) * plane];
              double* gxp = &gx.data[(static_cast<size_t>(s0) * c + ci) * plane];
              for (int64_t j = 0; j < plane; ++j) gxp[j] += scale * dyp[j];
            }
          }
        }
      });
}

Var maxpool2x2(const Var& x) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw ShapeMismatch("maxpool2x2: rank");
  const int n = X.shape[0], c = X.shape[1], h = X.shape[2], w = X.shape[3];
  if (h % 2 != 0 || w % 2 != 0) throw ShapeMismatch("maxpool2x2: odd spatial dims " + X.shape_str());
  const int ho = h / 2, wo = w / 2;
  Tensor out({n, c, ho, wo});
  std::vector<int64_t> arg(out.numel());
  int64_t o = 0;
  for (int s0 = 0; s0 < n; ++s0) {
    for (int ci = 0; ci < c; ++ci) {
      const double* xp = &X.data[(static_cast<size_t>(s0) * c + ci) * h * w];
      const int64_t base = (static_cast<size_t>(s0) * c + ci) * h * w;
      for (int i = 0; i < ho; ++i) {
        for (int j = 0; j < wo; ++j, ++o) {
          double best = -1e300;
          int64_t bidx = 0;
          for (int di = 0; di < 2; ++di) {
            for (int dj = 0; dj < 2; ++dj) {
              const int64_t idx = static_cast<int64_t>(2 * i + di) * w + (2 * j + dj);
              if (xp[idx] > best) {  // strict: first max wins on ties
                best = xp[idx];
                bidx = idx;
              }
            }
          }
          out.data[o] = best;
          arg[o] = base + bidx;
        }
      }
    }
  }
  return make_node(std::move(out), {x}, [arg = std::move(arg)](Node& self) {
    Tensor& gx = ensure_grad(*self.parents[0]);
    for (int64_t i = 0; i < self.grad.numel(); ++i) gx.data[arg[i]] += self.grad.data[i];
  });
}

Var global_avg_pool(const Var& x) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw ShapeMismatch("global_avg_pool: rank");
  const int n = X.shape[0], c = X.shape[1];
  const int64_t plane = static_cast<int64_t>(X.shape[2]) * X.shape[3];
  Tensor out({n, c});
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci) {
      const double* xp = &X.data[(static_cast<size_t>(i) * c + ci) * plane];
      double s = 0.0;
      for (int64_t j = 0; j < plane; ++j) s += xp[j];
      out(i, ci) = s / static_cast<double>(plane);
    }
  return make_node(std::move(out), {x}, [n, c, plane](Node& self) {
    Tensor& gx = ensure_grad(*self.parents[0]);
    const double inv = 1.0 / static_cast<double>(plane);
    for (int i = 0; i < n; ++i)
      for (int ci = 0; ci < c; ++ci) {
        const double g = self.grad(i, ci) * inv;
        double* gxp = &gx.data[(static_cast<size_t>(i) * c + ci) * plane];
        for (int64_t j = 0; j < plane; ++j) gxp[j] += g;
      }
  });
}

Var global_max_pool(const Var& x) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw ShapeMismatch("global_max_pool: rank");
  const int n = X.shape[0], c = X.shape[1];
  const int64_t plane = static_cast<int64_t>(X.shape[2]) * X.shape[3];
  Tensor out({n, c});
  std::vector<int64_t> arg(static_cast<size_t>(n) * c);
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci) {
      const int64_t base = (static_cast<size_t>(i) * c + ci) * plane;
      double best = X.data[base];
      int64_t bidx = base;
      for (int64_t j = 1; j < plane; ++j)
        if (X.data[base + j] > best) {  // first max in scan order on ties
          best = X.data[base + j];
          bidx = base + j;
        }
      out(i, ci) = best;
      arg[static_cast<size_t>(i) * c + ci] = bidx;
    }
  return make_node(std::move(out), {x}, [arg = std::move(arg)](Node& self) {
    Tensor& gx = ensure_grad(*self.parents[0]);
    for (size_t i = 0; i < arg.size(); ++i) gx.data[arg[i]] += self.grad.data[i];
  });
}

Var upsample_nearest(const Var& x, int factor) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw ShapeMismatch("upsample_nearest: rank");
  if (factor < 1) throw ShapeMismatch("upsample_nearest: factor");
  const int n = X.shape[0], c = X.shape[1], h = X.shape[2], w = X.shape[3];
  const int ho = h * factor, wo = w * factor;
  Tensor out({n, c, ho, wo});
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci) {
      const double* xp = &X.data[(static_cast<size_t>(i) * c + ci) * h * w];
      double* yp = &out.data[(static_cast<size_t>(i) * c + ci) * ho * wo];
      for (int yi = 0; yi < ho; ++yi) {
        const double* xrow = xp + static_cast<size_t>(yi / factor) * w;
        double* yrow = yp + static_cast<size_t>(yi) * wo;
        for (int xj = 0; xj < wo; ++xj) yrow[xj] = xrow[xj / factor];
      }
    }
  return make_node(std::move(out), {x}, [n, c, h, w, ho, wo, factor](Node& self) {
    Tensor& gx = ensure_grad(*self.parents[0]);
    for (int i = 0; i < n; ++i)
      for (int ci = 0; ci < c; ++ci) {
        double* gxp = &gx.data[(static_cast<size_t>(i) * c + ci) * h * w];
        const double* gyp = &self.grad.data[(static_cast<size_t>(i) * c + ci) * ho * wo];
        for (int yi = 0; yi < ho; ++yi)
          for (int xj = 0; xj < wo; ++xj)
            gxp[static_cast<size_t>(yi / factor) * w + xj / factor] +=
                gyp[static_cast<size_t>(yi) * wo + xj];
      }
  });
}

Var upsample_bilinear(const Var& x, int factor) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw ShapeMismatch("upsample_bilinear: rank");
  const int n = X.shape[0], c = X.shape[1], h = X.shape[2], w = X.shape[3];
  const int ho = h * factor, wo = w * factor;
  // precompute 1-d interpolation taps (align_corners = false)
  auto taps = [factor](int out_len, int in_len) {
    std::vector<std::pair<int, int>> idx(out_len);
    std::vector<double> frac(out_len);
    for (int o = 0; o < out_len; ++o) {
      double src = (o + 0.5) / factor - 0.5;
      src = std::max(0.0, std::min(src, static_cast<double>(in_len - 1)));
      const int i0 = static_cast<int>(src);
      const int i1 = std::min(i0 + 1, in_len - 1);
      idx[o] = {i0, i1};
      frac[o] = src - i0;
    }
    return std::make_pair(idx, frac);
  };
  auto [yi_idx, yi_frac] = taps(ho, h);
  auto [xi_idx, xi_frac] = taps(wo, w);
  Tensor out({n, c, ho, wo});
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci) {
      const double* xp = &X.data[(static_cast<size_t>(i) * c + ci) * h * w];
      double* yp = &out.data[(static_cast<size_t>(i) * c + ci) * ho * wo];
      for (int yo = 0; yo < ho; ++yo) {
        const auto [y0, y1] = yi_idx[yo];
        const double fy = yi_frac[yo];
        for (int xo = 0; xo < wo; ++xo) {
          const auto [x0, x1] = xi_idx[xo];
          const double fx = xi_frac[xo];
          yp[static_cast<size_t>(yo) * wo + xo] =
              (1 - fy) * ((1 - fx) * xp[static_cast<size_t>(y0) * w + x0] +
                          fx * xp[static_cast<size_t>(y0) * w + x1]) +
              fy * ((1 - fx) * xp[static_cast<size_t>(y1) * w + x0] +
                    fx * xp[static_cast<size_t>(y1) * w + x1]);
        }
      }
    }
  return make_node(std::move(out), {x},
                   [n, c, h, w, ho, wo, yi_idx = std::move(yi_idx), yi_frac = std::move(yi_frac),
                    xi_idx = std::move(xi_idx), xi_frac = std::move(xi_frac)](Node& self) {
                     Tensor& gx = ensure_grad(*self.parents[0]);
                     for (int i = 0; i < n; ++i)
                       for (int ci = 0; ci < c; ++ci) {
                         double* gxp = &gx.data[(static_cast<size_t>(i) * c + ci) * h * w];
                         const double* gyp =
                             &self.grad.data[(static_cast<size_t>(i) * c + ci) * ho * wo];
                         for (int yo = 0; yo < ho; ++yo) {
                           const auto [y0, y1] = yi_idx[yo];
                           const double fy = yi_frac[yo];
                           for (int xo = 0; xo < wo; ++xo) {
                             const auto [x0, x1] = xi_idx[xo];
                             const double fx = xi_frac[xo];
                             const double g = gyp[static_cast<size_t>(yo) * wo + xo];
                             gxp[static_cast<size_t>(y0) * w + x0] += (1 - fy) * (1 - fx) * g;
                             gxp[static_cast<size_t>(y0) * w + x1] += (1 - fy) * fx * g;
                             gxp[static_cast<size_t>(y1) * w + x0] += fy * (1 - fx) * g;
                             gxp[static_cast<size_t>(y1) * w + x1] += fy * fx * g;
                           }
                         }
                       }
                   });
}

Var avgpool_factor(const Var& x, int factor) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw ShapeMismatch("avgpool_factor: rank");
  const int n = X.shape[0], c = X.shape[1], h = X.shape[2], w = X.shape[3];
  if (factor < 1 || h % factor != 0 || w % factor != 0)
    throw ShapeMismatch("avgpool_factor: factor does not divide " + X.shape_str());
  const int ho = h / factor, wo = w / factor;
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  Tensor out({n, c, ho, wo});
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci) {
      const double* xp = &X.data[(static_cast<size_t>(i) * c + ci) * h * w];
      double* yp = &out.data[(static_cast<size_t>(i) * c + ci) * ho * wo];
      for (int yi = 0; yi < ho; ++yi)
        for (int xj = 0; xj < wo; ++xj) {
          double s = 0.0;
          for (int di = 0; di < factor; ++di)
            for (int dj = 0; dj < factor; ++dj)
              s += xp[static_cast<size_t>(yi * factor + di) * w + xj * factor + dj];
          yp[static_cast<size_t>(yi) * wo + xj] = s * inv;
        }
    }
  return make_node(std::move(out), {x}, [n, c, h, w, ho, wo, factor, inv](Node& self) {
    Tensor& gx = ensure_grad(*self.parents[0]);
    for (int i = 0; i < n; ++i)
      for (int ci = 0; ci < c; ++ci) {
        double* gxp = &gx.data[(static_cast<size_t>(i) * c + ci) * h * w];
        const double* gyp = &self.grad.data[(static_cast<size_t>(i) * c + ci) * ho * wo];
        for (int yi = 0; yi < ho; ++yi)
          for (int xj = 0; xj < wo; ++xj) {
            const double g = gyp[static_cast<size_t>(yi) * wo + xj] * inv;
            for (int di = 0; di < factor; ++di)
              for (int dj = 0; dj < factor; ++dj)
                gxp[static_cast<size_t>(yi * factor + di) * w + xj * factor + dj] += g;
          }
      }
  });
}

Var channel_mean(const Var& x) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw ShapeMismatch("channel_mean: rank");
  const int n = X.shape[0], c = X.shape[1], h = X.shape[2], w = X.shape[3];
  const int64_t plane = static_cast<int64_t>(h) * w;
  const double inv = 1.0 / static_cast<double>(c);
  Tensor out({n, 1, h, w});
  for (int i = 0; i < n; ++i) {
    double* yp = &out.data[static_cast<size_t>(i) * plane];
    for (int ci = 0; ci < c; ++ci) {
      const double* xp = &X.data[(static_cast<size_t>(i) * c + ci) * plane];
      for (int64_t j = 0; j < plane; ++j) yp[j] += xp[j];
    }
    for (int64_t j = 0; j < plane; ++j) yp[j] *= inv;
  }
  return make_node(std::move(out), {x}, [n, c, plane, inv](Node& self) {
    Tensor& gx = ensure_grad(*self.parents[0]);
    for (int i = 0; i < n; ++i) {
      const double* gyp = &self.grad.data[static_cast<size_t>(i) * plane];
      for (int ci = 0; ci < c; ++ci) {
        double* gxp = &gx.data[(static_cast<size_t>(i) * c + ci) * plane];
        for (int64_t j = 0; j < plane; ++j) gxp[j] += gyp[j] * inv;
      }
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.rank() != 4 || B.rank() != 4 || A.shape[0] != B.shape[0] || A.shape[2] != B.shape[2] ||
      A.shape[3] != B.shape[3])
    throw ShapeMismatch("concat_channels: " + A.shape_str() + " | " + B.shape_str());
  const int n = A.shape[0], ca = A.shape[1], cb = B.shape[1];
  const int64_t plane = static_cast<int64_t>(A.shape[2]) * A.shape[3];
  Tensor out({n, ca + cb, A.shape[2], A.shape[3]});
  for (int i = 0; i < n; ++i) {
    std::memcpy(&out.data[static_cast<size_t>(i) * (ca + cb) * plane],
                &A.data[static_cast<size_t>(i) * ca * plane], sizeof(double) * ca * plane);
    std::memcpy(&out.data[(static_cast<size_t>(i) * (ca + cb) + ca) * plane],
                &B.data[static_cast<size_t>(i) * cb * plane], sizeof(double) * cb * plane);
  }
  return make_node(std::move(out), {a, b}, [n, ca, cb, plane](Node& self) {
    Tensor& ga = ensure_grad(*self.parents[0]);
    Tensor& gb = ensure_grad(*self.parents[1]);
    for (int i = 0; i < n; ++i) {
      const double* g0 = &self.grad.data[static_cast<size_t>(i) * (ca + cb) * plane];
      double* gap = &ga.data[static_cast<size_t>(i) * ca * plane];
      double* gbp = &gb.data[static_cast<size_t>(i) * cb * plane];
      for (int64_t j = 0; j < static_cast<int64_t>(ca) * plane; ++j) gap[j] += g0[j];
      for (int64_t j = 0; j < static_cast<int64_t>(cb) * plane; ++j)
        gbp[j] += g0[static_cast<int64_t>(ca) * plane + j];
    }
  });
}

Var scale_channels(const Var& x, const Var& s) {
  const Tensor& X = x.val();
  const Tensor& S = s.val();
  if (X.rank() != 4 || S.rank() != 2 || S.shape[0] != X.shape[0] || S.shape[1] != X.shape[1])
    throw ShapeMismatch("scale_channels: " + X.shape_str() + " * " + S.shape_str());
  const int n = X.shape[0], c = X.shape[1];
  const int64_t plane = static_cast<int64_t>(X.shape[2]) * X.shape[3];
  Tensor out(X.shape);
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci) {
      const double sv = S(i, ci);
      const double* xp = &X.data[(static_cast<size_t>(i) * c + ci) * plane];
      double* yp = &out.data[(static_cast<size_t>(i) * c + ci) * plane];
      for (int64_t j = 0; j < plane; ++j) yp[j] = xp[j] * sv;
    }
  return make_node(std::move(out), {x, s}, [n, c, plane](Node& self) {
    const Tensor& X = self.parents[0]->val;
    const Tensor& S = self.parents[1]->val;
    Tensor& gx = ensure_grad(*self.parents[0]);
    Tensor& gs = ensure_grad(*self.parents[1]);
    for (int i = 0; i < n; ++i)
      for (int ci = 0; ci < c; ++ci) {
        const double sv = S(i, ci);
        const double* xp = &X.data[(static_cast<size_t>(i) * c + ci) * plane];
        const double* gyp = &self.grad.data[(static_cast<size_t>(i) * c + ci) * plane];
        double* gxp = &gx.data[(static_cast<size_t>(i) * c + ci) * plane];
        double acc = 0.0;
        for (int64_t j = 0; j < plane; ++j) {
          gxp[j] += gyp[j] * sv;
          acc += gyp[j] * xp[j];
        }
        gs(i, ci) += acc;
      }
  });
}

Var mul_channels_const(const Var& x, const Tensor& gate) {
  const Tensor& X = x.val();
  if (X.rank() != 4 || gate.rank() != 2 || gate.shape[0] != X.shape[0] ||
      gate.shape[1] != X.shape[1])
    throw ShapeMismatch("mul_channels_const: " + X.shape_str() + " * " + gate.shape_str());
  const int n = X.shape[0], c = X.shape[1];
  const int64_t plane = static_cast<int64_t>(X.shape[2]) * X.shape[3];
  Tensor out(X.shape);
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci) {
      const double sv = gate(i, ci);
      const double* xp = &X.data[(static_cast<size_t>(i) * c + ci) * plane];
      double* yp = &out.data[(static_cast<size_t>(i) * c + ci) * plane];
      for (int64_t j = 0; j < plane; ++j) yp[j] = xp[j] * sv;
    }
  return make_node(std::move(out), {x}, [n, c, plane, gate](Node& self) {
    Tensor& gx = ensure_grad(*self.parents[0]);
    for (int i = 0; i < n; ++i)
      for (int ci = 0; ci < c; ++ci) {
        const double sv = gate(i, ci);
        const double* gyp = &self.grad.data[(static_cast<size_t>(i) * c + ci) * plane];
        double* gxp = &gx.data[(static_cast<size_t>(i) * c + ci) * plane];
        for (int64_t j = 0; j < plane; ++j) gxp[j] += gyp[j] * sv;
      }
  });
}

Var cosine_distance_per_sample(const Var& a, const Var& b, bool* flagged) {
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  require_same_shape(A, B, "cosine_distance_per_sample");
  const int n = A.shape[0];
  const int64_t len = A.numel() / n;
  Tensor out({n});
  std::vector<double> dots(n), nas(n), nbs(n);
  for (int i = 0; i < n; ++i) {
    const double* ap = &A.data[static_cast<size_t>(i) * len];
    const double* bp = &B.data[static_cast<size_t>(i) * len];
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (int64_t j = 0; j < len; ++j) {
      dot += ap[j] * bp[j];
      na2 += ap[j] * ap[j];
      nb2 += bp[j] * bp[j];
    }
    const double na = std::sqrt(na2), nb = std::sqrt(nb2);
    dots[i] = dot;
    nas[i] = na;
    nbs[i] = nb;
    if (na == 0.0 || nb == 0.0) {
      out.data[i] = 1.0;  // zero-norm guard: neutral loss, no gradient
      if (flagged) *flagged = true;
    } else {
      out.data[i] = 1.0 - dot / (na * nb);
    }
  }
  return make_node(std::move(out), {a, b},
                   [n, len, dots = std::move(dots), nas = std::move(nas),
                    nbs = std::move(nbs)](Node& self) {
                     const Tensor& A = self.parents[0]->val;
                     const Tensor& B = self.parents[1]->val;
                     Tensor& ga = ensure_grad(*self.parents[0]);
                     Tensor& gb = ensure_grad(*self.parents[1]);
                     for (int i = 0; i < n; ++i) {
                       const double na = nas[i], nb = nbs[i], dot = dots[i];
                       if (na == 0.0 || nb == 0.0) continue;
                       const double g = self.grad.data[i];
                       const double inv_nanb = 1.0 / (na * nb);
                       const double* ap = &A.data[static_cast<size_t>(i) * len];
                       const double* bp = &B.data[static_cast<size_t>(i) * len];
                       double* gap = &ga.data[static_cast<size_t>(i) * len];
                       double* gbp = &gb.data[static_cast<size_t>(i) * len];
                       for (int64_t j = 0; j < len; ++j) {
                         gap[j] += g * (dot * ap[j] / (na * na) - bp[j]) * inv_nanb;
                         gbp[j] += g * (dot * bp[j] / (nb * nb) - ap[j]) * inv_nanb;
                       }
                     }
                   });
}

}  // namespace c2fvl::ad
