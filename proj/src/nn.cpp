#include "stylexlab/nn.hpp"

#include <algorithm>
#include <cmath>

#include "stylexlab/simd/kernels.hpp"

namespace stylexlab::nn {
namespace {

template <typename T>
std::vector<T>& scratch(int slot) {
  thread_local std::vector<T> bufs[3];
  return bufs[slot];
}

// col[(i*9 + ky*3 + kx), y*w + x] = x[i, y+ky-1, x+kx-1] (zero outside).
template <typename T>
void im2col3(const Tensor<T>& x, std::vector<T>& col) {
  const int h = x.h, w = x.w;
  const std::size_t hw = x.plane_size();
  col.resize(static_cast<std::size_t>(x.c) * 9 * hw);
  for (int i = 0; i < x.c; ++i) {
    const T* src = x.plane(i);
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* dst = col.data() + (static_cast<std::size_t>(i) * 9 + ky * 3 + kx) * hw;
        const int dy = ky - 1, dx = kx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          T* row = dst + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(row, row + w, T(0));
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          for (int xx = 0; xx < x0; ++xx) row[xx] = T(0);
          std::copy(srow + x0 + dx, srow + x1 + dx, row + x0);
          for (int xx = x1; xx < w; ++xx) row[xx] = T(0);
        }
      }
    }
  }
}

template <typename T>
void col2im3(const std::vector<T>& col, Tensor<T>& dx) {
  const int h = dx.h, w = dx.w;
  const std::size_t hw = dx.plane_size();
  dx.zero();
  for (int i = 0; i < dx.c; ++i) {
    T* dst = dx.plane(i);
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* src = col.data() + (static_cast<std::size_t>(i) * 9 + ky * 3 + kx) * hw;
        const int dy = ky - 1, ddx = kx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const T* row = src + static_cast<std::size_t>(y) * w;
          T* drow = dst + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -ddx), x1 = std::min(w, w - ddx);
          for (int xx = x0; xx < x1; ++xx) drow[xx + ddx] += row[xx];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void conv2d_forward(const Tensor<T>& x, std::span<const T> weight, T scale, int cout, int k,
                    Tensor<T>& y) {
  if (k != 1 && k != 3) throw std::invalid_argument("conv2d: kernel must be 1 or 3");
  const int kdim = x.c * k * k;
  if (weight.size() != static_cast<std::size_t>(cout) * kdim)
    throw std::invalid_argument("conv2d: weight size mismatch");
  const int hw = static_cast<int>(x.plane_size());
  if (!(y.c == cout && y.h == x.h && y.w == x.w)) y = Tensor<T>(cout, x.h, x.w);
  const T* b = x.data.data();
  if (k == 3) {
    auto& col = scratch<T>(0);
    im2col3(x, col);
    b = col.data();
  }
  simd::gemm<T>(false, false, cout, hw, kdim, scale, weight.data(), kdim, b, hw, T(0),
                y.data.data(), hw);
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, std::span<const T> weight, T scale, int cout, int k,
                     const Tensor<T>& dy, std::span<T> dweight, Tensor<T>* dx) {
  const int kdim = x.c * k * k;
  const int hw = static_cast<int>(x.plane_size());
  const T* b = x.data.data();
  if (k == 3 && !dweight.empty()) {
    auto& col = scratch<T>(0);
    im2col3(x, col);
    b = col.data();
  }
  if (!dweight.empty())
    simd::gemm<T>(false, true, cout, kdim, hw, scale, dy.data.data(), hw, b, hw, T(1),
                  dweight.data(), kdim);
  if (dx) {
    if (!dx->same_shape(x)) *dx = Tensor<T>(x.c, x.h, x.w);
    if (k == 1) {
      simd::gemm<T>(true, false, kdim, hw, cout, scale, weight.data(), kdim, dy.data.data(), hw,
                    T(0), dx->data.data(), hw);
    } else {
      auto& dcol = scratch<T>(1);
      dcol.resize(static_cast<std::size_t>(kdim) * hw);
      simd::gemm<T>(true, false, kdim, hw, cout, scale, weight.data(), kdim, dy.data.data(), hw,
                    T(0), dcol.data(), hw);
      col2im3(dcol, *dx);
    }
  }
}

template <typename T>
void add_channel_bias(Tensor<T>& y, std::span<const T> bias) {
  for (int ch = 0; ch < y.c; ++ch) {
    T* p = y.plane(ch);
    const T b = bias[ch];
    for (std::size_t i = 0; i < y.plane_size(); ++i) p[i] += b;
  }
}

template <typename T>
void channel_bias_grad(const Tensor<T>& dy, std::span<T> dbias) {
  for (int ch = 0; ch < dy.c; ++ch) {
    const T* p = dy.plane(ch);
    T acc = T(0);
    for (std::size_t i = 0; i < dy.plane_size(); ++i) acc += p[i];
    dbias[ch] += acc;
  }
}

template <typename T>
void leaky_relu_inplace(Tensor<T>& y) {
  simd::leaky_relu_forward<T>(y.size(), T(kLeakySlope), T(kLeakyGain), y.data.data(),
                              y.data.data());
}

template <typename T>
void leaky_relu_backward_inplace(const Tensor<T>& y, Tensor<T>& dy) {
  simd::leaky_relu_backward<T>(y.size(), T(kLeakySlope), T(kLeakyGain), y.data.data(),
                               dy.data.data(), dy.data.data());
}

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  Tensor<T> y(x.c, x.h / 2, x.w / 2);
  for (int ch = 0; ch < x.c; ++ch)
    for (int yy = 0; yy < y.h; ++yy)
      for (int xx = 0; xx < y.w; ++xx)
        y.at(ch, yy, xx) = T(0.25) * (x.at(ch, 2 * yy, 2 * xx) + x.at(ch, 2 * yy, 2 * xx + 1) +
                                      x.at(ch, 2 * yy + 1, 2 * xx) +
                                      x.at(ch, 2 * yy + 1, 2 * xx + 1));
  return y;
}

template <typename T>
Tensor<T> avg_pool2_backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.c, dy.h * 2, dy.w * 2);
  for (int ch = 0; ch < dy.c; ++ch)
    for (int yy = 0; yy < dx.h; ++yy)
      for (int xx = 0; xx < dx.w; ++xx) dx.at(ch, yy, xx) = T(0.25) * dy.at(ch, yy / 2, xx / 2);
  return dx;
}

namespace {

// 1-D bilinear 2x upsample along a strided line: out[2i] = .75 x[i] + .25 x[i-1],
// out[2i+1] = .75 x[i] + .25 x[i+1], indices clamped.
template <typename T>
void up_line(const T* in, std::ptrdiff_t in_stride, int n, T* out, std::ptrdiff_t out_stride) {
  for (int i = 0; i < n; ++i) {
    const T c = in[i * in_stride];
    const T l = in[std::max(i - 1, 0) * in_stride];
    const T r = in[std::min(i + 1, n - 1) * in_stride];
    out[(2 * i) * out_stride] = T(0.75) * c + T(0.25) * l;
    out[(2 * i + 1) * out_stride] = T(0.75) * c + T(0.25) * r;
  }
}

template <typename T>
void up_line_backward(const T* dout, std::ptrdiff_t out_stride, int n, T* din,
                      std::ptrdiff_t in_stride) {
  for (int i = 0; i < n; ++i) din[i * in_stride] = T(0);
  for (int i = 0; i < n; ++i) {
    const T a = dout[(2 * i) * out_stride];
    const T b = dout[(2 * i + 1) * out_stride];
    din[i * in_stride] += T(0.75) * (a + b);
    din[std::max(i - 1, 0) * in_stride] += T(0.25) * a;
    din[std::min(i + 1, n - 1) * in_stride] += T(0.25) * b;
  }
}

}  // namespace

template <typename T>
Tensor<T> upsample2(const Tensor<T>& x) {
  Tensor<T> tmp(x.c, x.h, x.w * 2);
  Tensor<T> y(x.c, x.h * 2, x.w * 2);
  for (int ch = 0; ch < x.c; ++ch) {
    for (int r = 0; r < x.h; ++r)
      up_line(x.plane(ch) + static_cast<std::ptrdiff_t>(r) * x.w, 1, x.w,
              tmp.plane(ch) + static_cast<std::ptrdiff_t>(r) * tmp.w, 1);
    for (int col = 0; col < tmp.w; ++col)
      up_line(tmp.plane(ch) + col, tmp.w, x.h, y.plane(ch) + col, y.w);
  }
  return y;
}

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& dy) {
  const int h = dy.h / 2, w = dy.w / 2;
  Tensor<T> tmp(dy.c, h, dy.w);
  Tensor<T> dx(dy.c, h, w);
  for (int ch = 0; ch < dy.c; ++ch) {
    for (int col = 0; col < dy.w; ++col)
      up_line_backward(dy.plane(ch) + col, dy.w, h, tmp.plane(ch) + col, tmp.w);
    for (int r = 0; r < h; ++r)
      up_line_backward(tmp.plane(ch) + static_cast<std::ptrdiff_t>(r) * tmp.w, 1, w,
                       dx.plane(ch) + static_cast<std::ptrdiff_t>(r) * w, 1);
  }
  return dx;
}

template <typename T>
void linear_forward(std::span<const T> x, std::span<const T> weight, std::span<const T> bias,
                    T scale, std::span<T> y) {
  const int in = static_cast<int>(x.size());
  const int out = static_cast<int>(y.size());
  if (weight.size() != static_cast<std::size_t>(in) * out)
    throw std::invalid_argument("linear: weight size mismatch");
  for (int o = 0; o < out; ++o)
    y[o] = scale * simd::dot<T>(in, weight.data() + static_cast<std::size_t>(o) * in, x.data()) +
           (bias.empty() ? T(0) : bias[o]);
}

template <typename T>
void linear_backward(std::span<const T> x, std::span<const T> weight, T scale,
                     std::span<const T> dy, std::span<T> dweight, std::span<T> dbias,
                     std::span<T> dx) {
  const int in = static_cast<int>(x.size());
  const int out = static_cast<int>(dy.size());
  if (!dx.empty()) std::fill(dx.begin(), dx.end(), T(0));
  for (int o = 0; o < out; ++o) {
    const T g = dy[o];
    if (!dbias.empty()) dbias[o] += g;
    if (g == T(0)) continue;
    if (!dweight.empty())
      simd::axpy<T>(in, scale * g, x.data(), dweight.data() + static_cast<std::size_t>(o) * in);
    if (!dx.empty())
      simd::axpy<T>(in, scale * g, weight.data() + static_cast<std::size_t>(o) * in, dx.data());
  }
}

template <typename T>
void modconv_forward(const Tensor<T>& x, std::span<const T> style, std::span<const T> weight,
                     T scale, int cout, int k, bool demodulate, Tensor<T>& y,
                     ModConvCache<T>* cache) {
  const int cin = x.c;
  const int taps = k * k;
  if (static_cast<int>(style.size()) != cin)
    throw std::invalid_argument("modconv: style length does not match input channels");
  if (weight.size() != static_cast<std::size_t>(cout) * cin * taps)
    throw std::invalid_argument("modconv: weight size mismatch");
  std::vector<T> local_mod, local_eff, local_demod;
  std::vector<T>& mod = cache ? cache->modulated : local_mod;
  std::vector<T>& eff = cache ? cache->effective : local_eff;
  std::vector<T>& dm = cache ? cache->demod : local_demod;
  mod.resize(weight.size());
  for (int o = 0; o < cout; ++o)
    for (int i = 0; i < cin; ++i) {
      const T s = scale * style[i];
      const std::size_t base = (static_cast<std::size_t>(o) * cin + i) * taps;
      for (int t = 0; t < taps; ++t) mod[base + t] = weight[base + t] * s;
    }
  if (demodulate) {
    dm.assign(cout, T(0));
    eff.resize(mod.size());
    const std::size_t row = static_cast<std::size_t>(cin) * taps;
    for (int o = 0; o < cout; ++o) {
      const T* m = mod.data() + o * row;
      const T d = T(1) / std::sqrt(simd::dot<T>(row, m, m) + T(1e-8));
      dm[o] = d;
      for (std::size_t j = 0; j < row; ++j) eff[o * row + j] = m[j] * d;
    }
  } else {
    dm.clear();
    eff = mod;
  }
  conv2d_forward<T>(x, eff, T(1), cout, k, y);
  if (cache) {
    cache->input = x;
    cache->style.assign(style.begin(), style.end());
  }
}

template <typename T>
void modconv_backward(const ModConvCache<T>& cache, std::span<const T> weight, T scale, int cout,
                      int k, const Tensor<T>& dy, std::span<T> dweight, std::span<T> dstyle,
                      Tensor<T>* dx) {
  const int cin = cache.input.c;
  const int taps = k * k;
  const std::size_t row = static_cast<std::size_t>(cin) * taps;
  auto& g = scratch<T>(2);
  g.assign(cache.effective.size(), T(0));
  conv2d_backward<T>(cache.input, cache.effective, T(1), cout, k, dy, g, dx);
  if (!cache.demod.empty()) {
    // d/dw' of (w' * d), d = (|w'|^2 + eps)^-1/2 per output row.
    for (int o = 0; o < cout; ++o) {
      T* go = g.data() + o * row;
      const T* m = cache.modulated.data() + o * row;
      const T d = cache.demod[o];
      const T proj = simd::dot<T>(row, go, m);
      const T c = d * d * d * proj;
      for (std::size_t j = 0; j < row; ++j) go[j] = d * go[j] - c * m[j];
    }
  }
  for (int o = 0; o < cout; ++o)
    for (int i = 0; i < cin; ++i) {
      const std::size_t base = (static_cast<std::size_t>(o) * cin + i) * taps;
      const T s = scale * cache.style[i];
      T acc = T(0);
      for (int t = 0; t < taps; ++t) {
        if (!dweight.empty()) dweight[base + t] += g[base + t] * s;
        acc += g[base + t] * weight[base + t];
      }
      if (!dstyle.empty()) dstyle[i] += acc * scale;
    }
}

template <typename T>
void add_inplace(Tensor<T>& y, const Tensor<T>& x) {
  if (!y.same_shape(x)) throw std::invalid_argument("add: shape mismatch");
  simd::axpy<T>(y.size(), T(1), x.data.data(), y.data.data());
}

#define STYLEXLAB_NN_INSTANTIATE(T)                                                             \
  template void conv2d_forward<T>(const Tensor<T>&, std::span<const T>, T, int, int, Tensor<T>&); \
  template void conv2d_backward<T>(const Tensor<T>&, std::span<const T>, T, int, int,           \
                                   const Tensor<T>&, std::span<T>, Tensor<T>*);                 \
  template void add_channel_bias<T>(Tensor<T>&, std::span<const T>);                            \
  template void channel_bias_grad<T>(const Tensor<T>&, std::span<T>);                           \
  template void leaky_relu_inplace<T>(Tensor<T>&);                                              \
  template void leaky_relu_backward_inplace<T>(const Tensor<T>&, Tensor<T>&);                   \
  template Tensor<T> avg_pool2<T>(const Tensor<T>&);                                            \
  template Tensor<T> avg_pool2_backward<T>(const Tensor<T>&);                                   \
  template Tensor<T> upsample2<T>(const Tensor<T>&);                                            \
  template Tensor<T> upsample2_backward<T>(const Tensor<T>&);                                   \
  template void linear_forward<T>(std::span<const T>, std::span<const T>, std::span<const T>, T, \
                                  std::span<T>);                                                \
  template void linear_backward<T>(std::span<const T>, std::span<const T>, T,                   \
                                   std::span<const T>, std::span<T>, std::span<T>, std::span<T>); \
  template void modconv_forward<T>(const Tensor<T>&, std::span<const T>, std::span<const T>, T,  \
                                   int, int, bool, Tensor<T>&, ModConvCache<T>*);               \
  template void modconv_backward<T>(const ModConvCache<T>&, std::span<const T>, T, int, int,    \
                                    const Tensor<T>&, std::span<T>, std::span<T>, Tensor<T>*);  \
  template void add_inplace<T>(Tensor<T>&, const Tensor<T>&);

STYLEXLAB_NN_INSTANTIATE(float)
STYLEXLAB_NN_INSTANTIATE(double)
#undef STYLEXLAB_NN_INSTANTIATE

}  // namespace stylexlab::nn
