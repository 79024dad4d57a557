#include "c2fvl/tensor.hpp"

#include <cstring>

namespace c2fvl {

void mat_mul(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  if (!acc) std::memset(c, 0, sizeof(double) * static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const double av = arow[l];
      const double* brow = b + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void mat_mul_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<size_t>(j) * k;
      double s = 0.0;
      for (int l = 0; l < k; ++l) s += arow[l] * brow[l];
      crow[j] = acc ? crow[j] + s : s;
    }
  }
}

void mat_mul_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  if (!acc) std::memset(c, 0, sizeof(double) * static_cast<size_t>(m) * n);
  for (int l = 0; l < k; ++l) {
    const double* arow = a + static_cast<size_t>(l) * m;
    const double* brow = b + static_cast<size_t>(l) * n;
    for (int i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace c2fvl
