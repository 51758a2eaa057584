#pragma once

#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "stylexlab/nn.hpp"

namespace stylexlab {

// Downsampling conv stack: each stage runs `convs_per_stage` 3x3 conv + bias +
// leaky ReLU layers at the current resolution, then 2x average pooling.
struct TrunkSpec {
  int resolution = 64;
  int in_channels = 3;
  std::vector<int> widths{16, 32, 64, 64};
  int convs_per_stage = 1;

  int out_resolution() const { return resolution >> static_cast<int>(widths.size()); }
  int out_channels() const { return widths.empty() ? in_channels : widths.back(); }
  void validate() const;
};

void to_json(nlohmann::json& j, const TrunkSpec& s);
void from_json(const nlohmann::json& j, TrunkSpec& s);

template <typename T>
class ConvTrunk {
 public:
  struct Cache {
    std::vector<nn::Tensor<T>> conv_inputs;
    std::vector<nn::Tensor<T>> conv_outputs;  // post-activation
  };

  ConvTrunk() = default;
  ConvTrunk(const std::string& prefix, const TrunkSpec& spec);

  void init(std::mt19937_64& rng);
  const TrunkSpec& spec() const { return spec_; }

  // Returns the final pooled feature map. If `stage_features` is non-null it
  // receives each stage's last activation (pre-pool).
  nn::Tensor<T> forward(const nn::Tensor<T>& x, Cache* cache,
                        std::vector<nn::Tensor<T>>* stage_features = nullptr) const;

  // Backpropagates `dout` (grad of the final map) plus optional per-stage
  // feature gradients. Accumulates parameter grads when `param_grads` is set.
  // Returns the input gradient.
  nn::Tensor<T> backward(const Cache& cache, const nn::Tensor<T>& dout,
                         const std::vector<nn::Tensor<T>>* stage_feature_grads, bool param_grads);

  nn::ParamList<T> params();

 private:
  TrunkSpec spec_;
  std::vector<nn::Param<T>> weights_;
  std::vector<nn::Param<T>> biases_;
  std::vector<int> cin_;
  std::vector<int> cout_;
};

}  // namespace stylexlab
