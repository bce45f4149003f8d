#pragma once

#include <cstddef>
#include <span>

// Dense loops behind the tape ops. Summation order is fixed, so results are
// bit-reproducible for a given build.
namespace palp::kernels {

inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// y += a * x
inline void axpy(double* y, double a, const double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// Y[n,m] = X[n,k] * W[m,k]^T
inline void gemm_nt(const double* x, const double* w, double* y, std::size_t n,
                    std::size_t k, std::size_t m) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t o0 = 0; o0 < m; o0 += kBlock) {
    const std::size_t o1 = o0 + kBlock < m ? o0 + kBlock : m;
    for (std::size_t i = 0; i < n; ++i) {
      const double* xi = x + i * k;
      double* yi = y + i * m;
      for (std::size_t o = o0; o < o1; ++o) yi[o] = dot(xi, w + o * k, k);
    }
  }
}

// DX[n,k] += DY[n,m] * W[m,k]
inline void gemm_nn_acc(const double* dy, const double* w, double* dx, std::size_t n,
                        std::size_t k, std::size_t m) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t o0 = 0; o0 < m; o0 += kBlock) {
    const std::size_t o1 = o0 + kBlock < m ? o0 + kBlock : m;
    for (std::size_t i = 0; i < n; ++i) {
      const double* dyi = dy + i * m;
      double* dxi = dx + i * k;
      for (std::size_t o = o0; o < o1; ++o) axpy(dxi, dyi[o], w + o * k, k);
    }
  }
}

// DW[m,k] += DY[n,m]^T * X[n,k]
inline void gemm_tn_acc(const double* dy, const double* x, double* dw, std::size_t n,
                        std::size_t k, std::size_t m) {
  for (std::size_t o = 0; o < m; ++o) {
    double* dwo = dw + o * k;
    for (std::size_t i = 0; i < n; ++i) axpy(dwo, dy[i * m + o], x + i * k, k);
  }
}

}  // namespace palp::kernels
