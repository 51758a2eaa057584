#include <atomic>
#include <cstdlib>
#include <cstring>

#include "stylexlab/simd/kernels.hpp"

namespace stylexlab::simd {
namespace {

Isa detect() {
  if (const char* env = std::getenv("STYLEXLAB_SIMD"); env && std::strcmp(env, "scalar") == 0)
    return Isa::kScalar;
  return cpu_has_avx2() ? Isa::kAvx2 : Isa::kScalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

}  // namespace

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa active_isa() { return current().load(std::memory_order_relaxed); }

std::string_view isa_name(Isa isa) { return isa == Isa::kAvx2 ? "avx2" : "scalar"; }

Isa force_isa(Isa isa) {
  if (isa == Isa::kAvx2 && !cpu_has_avx2()) isa = Isa::kScalar;
  return current().exchange(isa);
}

#if defined(STYLEXLAB_HAVE_AVX2)
#define STYLEXLAB_USE_AVX2() (active_isa() == Isa::kAvx2)
#else
#define STYLEXLAB_USE_AVX2() false
#endif

template <>
void gemm<float>(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
                 int lda, const float* b, int ldb, float beta, float* c, int ldc) {
#if defined(STYLEXLAB_HAVE_AVX2)
  if (STYLEXLAB_USE_AVX2())
    return avx2::sgemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
#endif
  reference::gemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <>
void gemm<double>(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
                  int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  reference::gemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <>
void axpy<float>(std::size_t n, float alpha, const float* x, float* y) {
#if defined(STYLEXLAB_HAVE_AVX2)
  if (STYLEXLAB_USE_AVX2()) return avx2::axpy(n, alpha, x, y);
#endif
  reference::axpy(n, alpha, x, y);
}

template <>
void axpy<double>(std::size_t n, double alpha, const double* x, double* y) {
  reference::axpy(n, alpha, x, y);
}

template <>
float dot<float>(std::size_t n, const float* x, const float* y) {
#if defined(STYLEXLAB_HAVE_AVX2)
  if (STYLEXLAB_USE_AVX2()) return avx2::dot(n, x, y);
#endif
  return reference::dot(n, x, y);
}

template <>
double dot<double>(std::size_t n, const double* x, const double* y) {
  return reference::dot(n, x, y);
}

template <>
void leaky_relu_forward<float>(std::size_t n, float slope, float gain, const float* x, float* y) {
#if defined(STYLEXLAB_HAVE_AVX2)
  if (STYLEXLAB_USE_AVX2()) return avx2::leaky_relu_forward(n, slope, gain, x, y);
#endif
  reference::leaky_relu_forward(n, slope, gain, x, y);
}

template <>
void leaky_relu_forward<double>(std::size_t n, double slope, double gain, const double* x,
                                double* y) {
  reference::leaky_relu_forward(n, slope, gain, x, y);
}

template <>
void leaky_relu_backward<float>(std::size_t n, float slope, float gain, const float* y,
                                const float* dy, float* dx) {
#if defined(STYLEXLAB_HAVE_AVX2)
  if (STYLEXLAB_USE_AVX2()) return avx2::leaky_relu_backward(n, slope, gain, y, dy, dx);
#endif
  reference::leaky_relu_backward(n, slope, gain, y, dy, dx);
}

template <>
void leaky_relu_backward<double>(std::size_t n, double slope, double gain, const double* y,
                                 const double* dy, double* dx) {
  reference::leaky_relu_backward(n, slope, gain, y, dy, dx);
}

template <>
void adam_update<float>(std::size_t n, float lr_t, float beta1, float beta2, float eps,
                        float* param, const float* grad, float* m, float* v) {
#if defined(STYLEXLAB_HAVE_AVX2)
  if (STYLEXLAB_USE_AVX2()) return avx2::adam_update(n, lr_t, beta1, beta2, eps, param, grad, m, v);
#endif
  reference::adam_update(n, lr_t, beta1, beta2, eps, param, grad, m, v);
}

template <>
void adam_update<double>(std::size_t n, double lr_t, double beta1, double beta2, double eps,
                         double* param, const double* grad, double* m, double* v) {
  reference::adam_update(n, lr_t, beta1, beta2, eps, param, grad, m, v);
}

}  // namespace stylexlab::simd
