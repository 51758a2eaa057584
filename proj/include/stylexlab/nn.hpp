#pragma once
// Per-sample network primitives with hand-written backward passes.
//
// Activations are single-sample C x H x W tensors; minibatches are handled by
// accumulating parameter gradients over samples. All ops are templated so the
// same code runs in float (training) and double (finite-difference checks).

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace stylexlab::nn {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kLeakyGain = 1.4142135623730951;

template <typename T>
struct Tensor {
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int channels, int height, int width, T fill = T(0))
      : c(channels), h(height), w(width),
        data(static_cast<std::size_t>(channels) * height * width, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane_size() const { return static_cast<std::size_t>(h) * w; }
  T* plane(int ch) { return data.data() + ch * plane_size(); }
  const T* plane(int ch) const { return data.data() + ch * plane_size(); }
  T& at(int ch, int y, int x) { return data[(ch * plane_size()) + static_cast<std::size_t>(y) * w + x]; }
  T at(int ch, int y, int x) const {
    return data[(ch * plane_size()) + static_cast<std::size_t>(y) * w + x];
  }
  bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
  void zero() { std::fill(data.begin(), data.end(), T(0)); }
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out(t.c, t.h, t.w);
  for (std::size_t i = 0; i < t.size(); ++i) out.data[i] = static_cast<To>(t.data[i]);
  return out;
}

// A named learnable array with its gradient accumulator.
template <typename T>
struct Param {
  std::string name;
  std::vector<T> value;
  std::vector<T> grad;

  Param() = default;
  Param(std::string n, std::size_t count, T fill = T(0))
      : name(std::move(n)), value(count, fill), grad(count, T(0)) {}
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (auto* p : params) p->zero_grad();
}

template <typename T>
void init_normal(Param<T>& p, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : p.value) v = static_cast<T>(dist(rng));
}

// Copies values between precisions, matching parameters by position.
template <typename To, typename From>
void copy_values(const ParamList<To>& dst, const ParamList<From>& src) {
  if (dst.size() != src.size()) throw std::invalid_argument("parameter list size mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i]->size() != src[i]->size())
      throw std::invalid_argument("parameter size mismatch: " + dst[i]->name);
    for (std::size_t j = 0; j < dst[i]->size(); ++j)
      dst[i]->value[j] = static_cast<To>(src[i]->value[j]);
  }
}

// --- convolution (stride 1, "same" padding, k in {1, 3}) ---------------------
//
// Weights are [cout][cin * k * k]; the effective weight is weight * scale.

template <typename T>
void conv2d_forward(const Tensor<T>& x, std::span<const T> weight, T scale, int cout, int k,
                    Tensor<T>& y);

// Accumulates into dweight (may be empty) and writes dx (may be null).
template <typename T>
void conv2d_backward(const Tensor<T>& x, std::span<const T> weight, T scale, int cout, int k,
                     const Tensor<T>& dy, std::span<T> dweight, Tensor<T>* dx);

template <typename T>
void add_channel_bias(Tensor<T>& y, std::span<const T> bias);
template <typename T>
void channel_bias_grad(const Tensor<T>& dy, std::span<T> dbias);

// --- activations ---------------------------------------------------------------

template <typename T>
void leaky_relu_inplace(Tensor<T>& y);
// dy is overwritten with the gradient w.r.t. the pre-activation, using the post-activation y.
template <typename T>
void leaky_relu_backward_inplace(const Tensor<T>& y, Tensor<T>& dy);

// --- resampling ------------------------------------------------------------------

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x);
template <typename T>
Tensor<T> avg_pool2_backward(const Tensor<T>& dy);
// Separable bilinear 2x upsampling with clamped borders.
template <typename T>
Tensor<T> upsample2(const Tensor<T>& x);
template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& dy);

// --- dense -----------------------------------------------------------------------

// y = scale * W x + b, W is [out][in].
template <typename T>
void linear_forward(std::span<const T> x, std::span<const T> weight, std::span<const T> bias,
                    T scale, std::span<T> y);
template <typename T>
void linear_backward(std::span<const T> x, std::span<const T> weight, T scale,
                     std::span<const T> dy, std::span<T> dweight, std::span<T> dbias,
                     std::span<T> dx);

// --- modulated convolution ------------------------------------------------------
//
// w'[o][i,t] = weight[o][i,t] * scale * style[i], optionally demodulated per
// output channel so each filter has unit norm.

template <typename T>
struct ModConvCache {
  Tensor<T> input;
  std::vector<T> style;
  std::vector<T> modulated;  // pre-demodulation w'
  std::vector<T> effective;  // weights actually convolved
  std::vector<T> demod;      // per output channel factor (empty if no demod)
};

template <typename T>
void modconv_forward(const Tensor<T>& x, std::span<const T> style, std::span<const T> weight,
                     T scale, int cout, int k, bool demodulate, Tensor<T>& y,
                     ModConvCache<T>* cache);

template <typename T>
void modconv_backward(const ModConvCache<T>& cache, std::span<const T> weight, T scale, int cout,
                      int k, const Tensor<T>& dy, std::span<T> dweight, std::span<T> dstyle,
                      Tensor<T>* dx);

// --- elementwise helpers -----------------------------------------------------

template <typename T>
void add_inplace(Tensor<T>& y, const Tensor<T>& x);

}  // namespace stylexlab::nn
