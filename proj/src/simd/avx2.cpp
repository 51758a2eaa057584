// AVX2+FMA float kernels. This translation unit is compiled with -mavx2 -mfma
// and is only entered when the CPU reports both features.

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "stylexlab/simd/kernels.hpp"

namespace stylexlab::simd::avx2 {
namespace {

constexpr int kMr = 6;
constexpr int kNr = 16;
constexpr int kKc = 256;
constexpr int kMc = 96;
constexpr int kNc = 2048;

inline float at(const float* m, int ld, bool trans, int row, int col) {
  return trans ? m[static_cast<std::ptrdiff_t>(col) * ld + row]
               : m[static_cast<std::ptrdiff_t>(row) * ld + col];
}

// op(B)[pc:pc+kc, jc:jc+nc] packed as 16-wide column panels, zero padded.
void pack_b(bool trans_b, const float* b, int ldb, int pc, int kc, int jc, int nc, float* out) {
  for (int j0 = 0; j0 < nc; j0 += kNr) {
    const int w = std::min(kNr, nc - j0);
    for (int p = 0; p < kc; ++p) {
      float* dst = out + static_cast<std::ptrdiff_t>(p) * kNr;
      if (!trans_b && w == kNr) {
        const float* src = b + static_cast<std::ptrdiff_t>(pc + p) * ldb + jc + j0;
        _mm256_storeu_ps(dst, _mm256_loadu_ps(src));
        _mm256_storeu_ps(dst + 8, _mm256_loadu_ps(src + 8));
      } else {
        for (int jj = 0; jj < kNr; ++jj)
          dst[jj] = jj < w ? at(b, ldb, trans_b, pc + p, jc + j0 + jj) : 0.0f;
      }
    }
    out += static_cast<std::ptrdiff_t>(kc) * kNr;
  }
}

// alpha * op(A)[ic:ic+mc, pc:pc+kc] packed as 6-row panels, zero padded.
void pack_a(bool trans_a, const float* a, int lda, int ic, int mc, int pc, int kc, float alpha,
            float* out) {
  for (int i0 = 0; i0 < mc; i0 += kMr) {
    const int h = std::min(kMr, mc - i0);
    for (int p = 0; p < kc; ++p) {
      float* dst = out + static_cast<std::ptrdiff_t>(p) * kMr;
      for (int ii = 0; ii < kMr; ++ii)
        dst[ii] = ii < h ? alpha * at(a, lda, trans_a, ic + i0 + ii, pc + p) : 0.0f;
    }
    out += static_cast<std::ptrdiff_t>(kc) * kMr;
  }
}

// C[0:mr, 0:nr] += Ap * Bp over kc steps.
void micro_kernel(int kc, const float* ap, const float* bp, std::ptrdiff_t bstride, float* c,
                  int ldc, int mr, int nr) {
  __m256 c00 = _mm256_setzero_ps(), c01 = _mm256_setzero_ps();
  __m256 c10 = _mm256_setzero_ps(), c11 = _mm256_setzero_ps();
  __m256 c20 = _mm256_setzero_ps(), c21 = _mm256_setzero_ps();
  __m256 c30 = _mm256_setzero_ps(), c31 = _mm256_setzero_ps();
  __m256 c40 = _mm256_setzero_ps(), c41 = _mm256_setzero_ps();
  __m256 c50 = _mm256_setzero_ps(), c51 = _mm256_setzero_ps();
  for (int p = 0; p < kc; ++p) {
    const __m256 b0 = _mm256_loadu_ps(bp);
    const __m256 b1 = _mm256_loadu_ps(bp + 8);
    __m256 a = _mm256_broadcast_ss(ap + 0);
    c00 = _mm256_fmadd_ps(a, b0, c00);
    c01 = _mm256_fmadd_ps(a, b1, c01);
    a = _mm256_broadcast_ss(ap + 1);
    c10 = _mm256_fmadd_ps(a, b0, c10);
    c11 = _mm256_fmadd_ps(a, b1, c11);
    a = _mm256_broadcast_ss(ap + 2);
    c20 = _mm256_fmadd_ps(a, b0, c20);
    c21 = _mm256_fmadd_ps(a, b1, c21);
    a = _mm256_broadcast_ss(ap + 3);
    c30 = _mm256_fmadd_ps(a, b0, c30);
    c31 = _mm256_fmadd_ps(a, b1, c31);
    a = _mm256_broadcast_ss(ap + 4);
    c40 = _mm256_fmadd_ps(a, b0, c40);
    c41 = _mm256_fmadd_ps(a, b1, c41);
    a = _mm256_broadcast_ss(ap + 5);
    c50 = _mm256_fmadd_ps(a, b0, c50);
    c51 = _mm256_fmadd_ps(a, b1, c51);
    ap += kMr;
    bp += bstride;
  }
  alignas(32) float tile[kMr][kNr];
  _mm256_store_ps(tile[0], c00);
  _mm256_store_ps(tile[0] + 8, c01);
  _mm256_store_ps(tile[1], c10);
  _mm256_store_ps(tile[1] + 8, c11);
  _mm256_store_ps(tile[2], c20);
  _mm256_store_ps(tile[2] + 8, c21);
  _mm256_store_ps(tile[3], c30);
  _mm256_store_ps(tile[3] + 8, c31);
  _mm256_store_ps(tile[4], c40);
  _mm256_store_ps(tile[4] + 8, c41);
  _mm256_store_ps(tile[5], c50);
  _mm256_store_ps(tile[5] + 8, c51);
  if (nr == kNr) {
    for (int i = 0; i < mr; ++i) {
      float* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
      _mm256_storeu_ps(crow, _mm256_add_ps(_mm256_loadu_ps(crow), _mm256_load_ps(tile[i])));
      _mm256_storeu_ps(crow + 8,
                       _mm256_add_ps(_mm256_loadu_ps(crow + 8), _mm256_load_ps(tile[i] + 8)));
    }
  } else {
    for (int i = 0; i < mr; ++i) {
      float* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
      for (int j = 0; j < nr; ++j) crow[j] += tile[i][j];
    }
  }
}

struct PackBuffers {
  std::vector<float> a;
  std::vector<float> b;
};

PackBuffers& buffers() {
  thread_local PackBuffers bufs;
  return bufs;
}

}  // namespace

void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
           const float* b, int ldb, float beta, float* c, int ldc) {
  if (m <= 0 || n <= 0) return;
  if (beta != 1.0f) {
    for (int i = 0; i < m; ++i) {
      float* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
      if (beta == 0.0f)
        std::fill(crow, crow + n, 0.0f);
      else
        for (int j = 0; j < n; ++j) crow[j] *= beta;
    }
  }
  if (k <= 0 || alpha == 0.0f) return;

  PackBuffers& bufs = buffers();
  bufs.a.resize(static_cast<std::size_t>(kMc + kMr) * kKc);
  bufs.b.resize(static_cast<std::size_t>(kNc + kNr) * kKc);

  for (int jc = 0; jc < n; jc += kNc) {
    const int nc = std::min(kNc, n - jc);
    for (int pc = 0; pc < k; pc += kKc) {
      const int kc = std::min(kKc, k - pc);
      // Row-major B with full 16-wide panels is streamed in place; only the
      // ragged tail (or a transposed B) goes through the packing buffer.
      const bool direct_b = !trans_b;
      const int full_cols = direct_b ? (nc / kNr) * kNr : 0;
      if (direct_b) {
        if (full_cols < nc)
          pack_b(trans_b, b, ldb, pc, kc, jc + full_cols, nc - full_cols, bufs.b.data());
      } else {
        pack_b(trans_b, b, ldb, pc, kc, jc, nc, bufs.b.data());
      }
      for (int ic = 0; ic < m; ic += kMc) {
        const int mc = std::min(kMc, m - ic);
        pack_a(trans_a, a, lda, ic, mc, pc, kc, alpha, bufs.a.data());
        for (int jr = 0; jr < nc; jr += kNr) {
          const int nr = std::min(kNr, nc - jr);
          const float* bp;
          std::ptrdiff_t bstride = kNr;
          if (jr < full_cols) {
            bp = b + static_cast<std::ptrdiff_t>(pc) * ldb + jc + jr;
            bstride = ldb;
          } else {
            bp = bufs.b.data() + static_cast<std::ptrdiff_t>((jr - full_cols) / kNr) * kc * kNr;
          }
          for (int ir = 0; ir < mc; ir += kMr) {
            const int mr = std::min(kMr, mc - ir);
            const float* ap = bufs.a.data() + static_cast<std::ptrdiff_t>(ir / kMr) * kc * kMr;
            micro_kernel(kc, ap, bp, bstride, c + static_cast<std::ptrdiff_t>(ic + ir) * ldc + jc + jr, ldc,
                         mr, nr);
          }
        }
      }
    }
  }
}

void axpy(std::size_t n, float alpha, const float* x, float* y) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

float dot(std::size_t n, const float* x, const float* y) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8)
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
  acc0 = _mm256_add_ps(acc0, acc1);
  __m128 s = _mm_add_ps(_mm256_castps256_ps128(acc0), _mm256_extractf128_ps(acc0, 1));
  s = _mm_add_ps(s, _mm_movehl_ps(s, s));
  s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 0x1));
  float out = _mm_cvtss_f32(s);
  for (; i < n; ++i) out += x[i] * y[i];
  return out;
}

void leaky_relu_forward(std::size_t n, float slope, float gain, const float* x, float* y) {
  const __m256 vpos = _mm256_set1_ps(gain);
  const __m256 vneg = _mm256_set1_ps(gain * slope);
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256 neg = _mm256_cmp_ps(v, zero, _CMP_LT_OQ);
    _mm256_storeu_ps(y + i, _mm256_mul_ps(v, _mm256_blendv_ps(vpos, vneg, neg)));
  }
  for (; i < n; ++i) y[i] = x[i] >= 0.0f ? gain * x[i] : gain * slope * x[i];
}

void leaky_relu_backward(std::size_t n, float slope, float gain, const float* y, const float* dy,
                         float* dx) {
  const __m256 vpos = _mm256_set1_ps(gain);
  const __m256 vneg = _mm256_set1_ps(gain * slope);
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 neg = _mm256_cmp_ps(_mm256_loadu_ps(y + i), zero, _CMP_LT_OQ);
    _mm256_storeu_ps(dx + i, _mm256_mul_ps(_mm256_loadu_ps(dy + i), _mm256_blendv_ps(vpos, vneg, neg)));
  }
  for (; i < n; ++i) dx[i] = y[i] >= 0.0f ? gain * dy[i] : gain * slope * dy[i];
}

void adam_update(std::size_t n, float lr_t, float beta1, float beta2, float eps, float* param,
                 const float* grad, float* m, float* v) {
  const __m256 b1 = _mm256_set1_ps(beta1), nb1 = _mm256_set1_ps(1.0f - beta1);
  const __m256 b2 = _mm256_set1_ps(beta2), nb2 = _mm256_set1_ps(1.0f - beta2);
  const __m256 lr = _mm256_set1_ps(lr_t), ve = _mm256_set1_ps(eps);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 g = _mm256_loadu_ps(grad + i);
    const __m256 mi = _mm256_fmadd_ps(b1, _mm256_loadu_ps(m + i), _mm256_mul_ps(nb1, g));
    const __m256 vi =
        _mm256_fmadd_ps(b2, _mm256_loadu_ps(v + i), _mm256_mul_ps(nb2, _mm256_mul_ps(g, g)));
    _mm256_storeu_ps(m + i, mi);
    _mm256_storeu_ps(v + i, vi);
    const __m256 step = _mm256_div_ps(_mm256_mul_ps(lr, mi), _mm256_add_ps(_mm256_sqrt_ps(vi), ve));
    _mm256_storeu_ps(param + i, _mm256_sub_ps(_mm256_loadu_ps(param + i), step));
  }
  for (; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0f - beta1) * grad[i];
    v[i] = beta2 * v[i] + (1.0f - beta2) * grad[i] * grad[i];
    param[i] -= lr_t * m[i] / (std::sqrt(v[i]) + eps);
  }
}

}  // namespace stylexlab::simd::avx2
