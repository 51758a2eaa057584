#include "stylexlab/simd/kernels.hpp"

#include <cmath>

namespace stylexlab::simd::reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    if (beta == T(0)) {
      for (int j = 0; j < n; ++j) crow[j] = T(0);
    } else if (beta != T(1)) {
      for (int j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (int p = 0; p < k; ++p) {
      const T av = alpha * (trans_a ? a[static_cast<std::ptrdiff_t>(p) * lda + i]
                                    : a[static_cast<std::ptrdiff_t>(i) * lda + p]);
      if (av == T(0)) continue;
      if (!trans_b) {
        const T* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (int j = 0; j < n; ++j) crow[j] += av * b[static_cast<std::ptrdiff_t>(j) * ldb + p];
      }
    }
  }
}

template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
T dot(std::size_t n, const T* x, const T* y) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <typename T>
void leaky_relu_forward(std::size_t n, T slope, T gain, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] >= T(0) ? gain * x[i] : gain * slope * x[i];
}

template <typename T>
void leaky_relu_backward(std::size_t n, T slope, T gain, const T* y, const T* dy, T* dx) {
  for (std::size_t i = 0; i < n; ++i) dx[i] = y[i] >= T(0) ? gain * dy[i] : gain * slope * dy[i];
}

template <typename T>
void adam_update(std::size_t n, T lr_t, T beta1, T beta2, T eps, T* param, const T* grad, T* m,
                 T* v) {
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (T(1) - beta1) * grad[i];
    v[i] = beta2 * v[i] + (T(1) - beta2) * grad[i] * grad[i];
    param[i] -= lr_t * m[i] / (std::sqrt(v[i]) + eps);
  }
}

#define STYLEXLAB_INSTANTIATE(T)                                                              \
  template void gemm<T>(bool, bool, int, int, int, T, const T*, int, const T*, int, T, T*, int); \
  template void axpy<T>(std::size_t, T, const T*, T*);                                        \
  template T dot<T>(std::size_t, const T*, const T*);                                         \
  template void leaky_relu_forward<T>(std::size_t, T, T, const T*, T*);                       \
  template void leaky_relu_backward<T>(std::size_t, T, T, const T*, const T*, T*);            \
  template void adam_update<T>(std::size_t, T, T, T, T, T*, const T*, T*, T*);

STYLEXLAB_INSTANTIATE(float)
STYLEXLAB_INSTANTIATE(double)
#undef STYLEXLAB_INSTANTIATE

}  // namespace stylexlab::simd::reference
