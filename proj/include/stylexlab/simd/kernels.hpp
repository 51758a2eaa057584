#pragma once
// Numeric inner loops used by the network engine.
//
// Every kernel has a portable scalar reference implementation (templated, so
// it also serves double precision for gradient checks) and, for float, an
// AVX2+FMA variant selected once at startup from CPUID. Setting the
// environment variable STYLEXLAB_SIMD=scalar forces the reference path.

#include <cstddef>
#include <string_view>

namespace stylexlab::simd {

enum class Isa { kScalar, kAvx2 };

// Active ISA for float kernels. Decided on first use; stable for the process.
Isa active_isa();
std::string_view isa_name(Isa isa);
// Overrides dispatch (tests use this to compare variants). Returns the previous value.
Isa force_isa(Isa isa);
bool cpu_has_avx2();

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C, op(A) is M x K, op(B) is K x N.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc);

template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y);

template <typename T>
T dot(std::size_t n, const T* x, const T* y);

// y = x >= 0 ? gain * x : gain * slope * x
template <typename T>
void leaky_relu_forward(std::size_t n, T slope, T gain, const T* x, T* y);

// dx = dy * (y >= 0 ? gain : gain * slope), evaluated from the forward output.
template <typename T>
void leaky_relu_backward(std::size_t n, T slope, T gain, const T* y, const T* dy, T* dx);

// Adam step with decoupled bias correction folded into lr_t.
template <typename T>
void adam_update(std::size_t n, T lr_t, T beta1, T beta2, T eps, T* param, const T* grad, T* m,
                 T* v);

namespace reference {
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc);
template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y);
template <typename T>
T dot(std::size_t n, const T* x, const T* y);
template <typename T>
void leaky_relu_forward(std::size_t n, T slope, T gain, const T* x, T* y);
template <typename T>
void leaky_relu_backward(std::size_t n, T slope, T gain, const T* y, const T* dy, T* dx);
template <typename T>
void adam_update(std::size_t n, T lr_t, T beta1, T beta2, T eps, T* param, const T* grad, T* m,
                 T* v);
}  // namespace reference

namespace avx2 {
void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
           const float* b, int ldb, float beta, float* c, int ldc);
void axpy(std::size_t n, float alpha, const float* x, float* y);
float dot(std::size_t n, const float* x, const float* y);
void leaky_relu_forward(std::size_t n, float slope, float gain, const float* x, float* y);
void leaky_relu_backward(std::size_t n, float slope, float gain, const float* y, const float* dy,
                         float* dx);
void adam_update(std::size_t n, float lr_t, float beta1, float beta2, float eps, float* param,
                 const float* grad, float* m, float* v);
}  // namespace avx2

}  // namespace stylexlab::simd
