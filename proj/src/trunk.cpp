#include "stylexlab/trunk.hpp"

#include <cmath>
#include <stdexcept>

namespace stylexlab {

void TrunkSpec::validate() const {
  if (resolution < 4 || (resolution & (resolution - 1)) != 0)
    throw std::invalid_argument("trunk resolution must be a power of two >= 4");
  if (widths.empty()) throw std::invalid_argument("trunk needs at least one stage");
  if ((resolution >> widths.size()) < 1) throw std::invalid_argument("trunk has too many stages");
  if (convs_per_stage < 1) throw std::invalid_argument("convs_per_stage must be >= 1");
  for (int w : widths)
    if (w < 1) throw std::invalid_argument("trunk widths must be positive");
}

void to_json(nlohmann::json& j, const TrunkSpec& s) {
  j = {{"resolution", s.resolution},
       {"in_channels", s.in_channels},
       {"widths", s.widths},
       {"convs_per_stage", s.convs_per_stage}};
}

void from_json(const nlohmann::json& j, TrunkSpec& s) {
  s.resolution = j.value("resolution", s.resolution);
  s.in_channels = j.value("in_channels", s.in_channels);
  s.widths = j.value("widths", s.widths);
  s.convs_per_stage = j.value("convs_per_stage", s.convs_per_stage);
}

template <typename T>
ConvTrunk<T>::ConvTrunk(const std::string& prefix, const TrunkSpec& spec) : spec_(spec) {
  spec_.validate();
  int cin = spec.in_channels;
  int idx = 0;
  for (int width : spec.widths) {
    for (int r = 0; r < spec.convs_per_stage; ++r, ++idx) {
      weights_.emplace_back(prefix + ".conv" + std::to_string(idx) + ".w",
                            static_cast<std::size_t>(width) * cin * 9);
      biases_.emplace_back(prefix + ".conv" + std::to_string(idx) + ".b", width);
      cin_.push_back(cin);
      cout_.push_back(width);
      cin = width;
    }
  }
}

template <typename T>
void ConvTrunk<T>::init(std::mt19937_64& rng) {
  for (auto& w : weights_) nn::init_normal(w, rng);
  for (auto& b : biases_) std::fill(b.value.begin(), b.value.end(), T(0));
}

template <typename T>
nn::Tensor<T> ConvTrunk<T>::forward(const nn::Tensor<T>& x, Cache* cache,
                                    std::vector<nn::Tensor<T>>* stage_features) const {
  if (x.c != spec_.in_channels || x.h != spec_.resolution || x.w != spec_.resolution)
    throw nn::ShapeError("expected " + std::to_string(spec_.in_channels) + "x" +
                         std::to_string(spec_.resolution) + "x" + std::to_string(spec_.resolution) +
                         " input, got " + std::to_string(x.c) + "x" + std::to_string(x.h) + "x" +
                         std::to_string(x.w));
  if (cache) {
    cache->conv_inputs.clear();
    cache->conv_outputs.clear();
  }
  if (stage_features) stage_features->clear();
  nn::Tensor<T> cur = x;
  std::size_t layer = 0;
  for (std::size_t s = 0; s < spec_.widths.size(); ++s) {
    for (int r = 0; r < spec_.convs_per_stage; ++r, ++layer) {
      nn::Tensor<T> y;
      const T scale = T(1) / std::sqrt(T(cin_[layer] * 9));
      nn::conv2d_forward<T>(cur, weights_[layer].value, scale, cout_[layer], 3, y);
      nn::add_channel_bias<T>(y, biases_[layer].value);
      nn::leaky_relu_inplace(y);
      if (cache) {
        cache->conv_inputs.push_back(std::move(cur));
        cache->conv_outputs.push_back(y);
      }
      cur = std::move(y);
    }
    if (stage_features) stage_features->push_back(cur);
    cur = nn::avg_pool2(cur);
  }
  return cur;
}

template <typename T>
nn::Tensor<T> ConvTrunk<T>::backward(const Cache& cache, const nn::Tensor<T>& dout,
                                     const std::vector<nn::Tensor<T>>* stage_feature_grads,
                                     bool param_grads) {
  nn::Tensor<T> grad = dout;
  std::size_t layer = cin_.size();
  for (std::size_t s = spec_.widths.size(); s-- > 0;) {
    grad = nn::avg_pool2_backward(grad);
    if (stage_feature_grads && s < stage_feature_grads->size() &&
        (*stage_feature_grads)[s].size() > 0)
      nn::add_inplace(grad, (*stage_feature_grads)[s]);
    for (int r = 0; r < spec_.convs_per_stage; ++r) {
      --layer;
      nn::leaky_relu_backward_inplace(cache.conv_outputs[layer], grad);
      const T scale = T(1) / std::sqrt(T(cin_[layer] * 9));
      if (param_grads) nn::channel_bias_grad<T>(grad, biases_[layer].grad);
      nn::Tensor<T> dx;
      nn::conv2d_backward<T>(cache.conv_inputs[layer], weights_[layer].value, scale, cout_[layer], 3,
                             grad, param_grads ? std::span<T>(weights_[layer].grad) : std::span<T>(),
                             &dx);
      grad = std::move(dx);
    }
  }
  return grad;
}

template <typename T>
nn::ParamList<T> ConvTrunk<T>::params() {
  nn::ParamList<T> out;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    out.push_back(&weights_[i]);
    out.push_back(&biases_[i]);
  }
  return out;
}

template class ConvTrunk<float>;
template class ConvTrunk<double>;

}  // namespace stylexlab
