#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "c2fvl/errors.hpp"

namespace c2fvl {

// Dense row-major tensor of doubles. Rank 1..4 in practice (N,C,H,W).
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
  Tensor(std::vector<int> s, double fill) : shape(std::move(s)), data(numel_of(shape), fill) {}

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  double& operator()(int a) { return data[static_cast<size_t>(a)]; }
  double operator()(int a) const { return data[static_cast<size_t>(a)]; }
  double& operator()(int a, int b) { return data[static_cast<size_t>(a) * shape[1] + b]; }
  double operator()(int a, int b) const { return data[static_cast<size_t>(a) * shape[1] + b]; }
  double& operator()(int a, int b, int c) {
    return data[(static_cast<size_t>(a) * shape[1] + b) * shape[2] + c];
  }
  double operator()(int a, int b, int c) const {
    return data[(static_cast<size_t>(a) * shape[1] + b) * shape[2] + c];
  }
  double& operator()(int a, int b, int c, int d) {
    return data[((static_cast<size_t>(a) * shape[1] + b) * static_cast<size_t>(shape[2]) + c) *
                    shape[3] +
                d];
  }
  double operator()(int a, int b, int c, int d) const {
    return data[((static_cast<size_t>(a) * shape[1] + b) * static_cast<size_t>(shape[2]) + c) *
                    shape[3] +
                d];
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
  if (!a.same_shape(b))
    throw ShapeMismatch(std::string(where) + ": " + a.shape_str() + " vs " + b.shape_str());
}

// C(m,n) = A(m,k) * B(k,n), accumulating when acc is set.
void mat_mul(const double* a, const double* b, double* c, int m, int k, int n, bool acc = false);
// C(m,n) = A(m,k) * B(n,k)^T
void mat_mul_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc = false);
// C(m,n) = A(k,m)^T * B(k,n)
void mat_mul_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc = false);

}  // namespace c2fvl
