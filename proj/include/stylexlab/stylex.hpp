#pragma once
// Classifier-guided style-based generator: encoder E, conditional generator G
// with an explicit StyleSpace, discriminator D, and their joint training.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "stylexlab/classifier.hpp"
#include "stylexlab/nn.hpp"
#include "stylexlab/synthdata.hpp"
#include "stylexlab/trunk.hpp"

namespace stylexlab::sx {

// --- StyleSpace ------------------------------------------------------------------

enum class LayerKind { kConv, kToRgb };

struct StyleLayer {
  std::string name;
  LayerKind kind = LayerKind::kConv;
  int resolution = 4;
  int dim = 0;           // style dimension = input channels
  int out_channels = 0;
  bool upsample = false;  // conv: upsample features first; torgb: upsample the rgb skip
};

class StyleSpaceLayout {
 public:
  StyleSpaceLayout() = default;
  explicit StyleSpaceLayout(std::vector<StyleLayer> layers);

  std::size_t size() const { return total_; }
  int num_layers() const { return static_cast<int>(layers_.size()); }
  const StyleLayer& layer(int l) const { return layers_.at(static_cast<std::size_t>(l)); }
  const std::vector<StyleLayer>& layers() const { return layers_; }
  std::size_t offset(int l) const { return offsets_.at(static_cast<std::size_t>(l)); }

  // flat index <-> (layer, channel)
  std::pair<int, int> locate(std::size_t flat) const;
  std::size_t flat(int layer, int channel) const;

  bool operator==(const StyleSpaceLayout& o) const;

 private:
  std::vector<StyleLayer> layers_;
  std::vector<std::size_t> offsets_;
  std::size_t total_ = 0;
};

void to_json(nlohmann::json& j, const StyleSpaceLayout& l);
void from_json(const nlohmann::json& j, StyleSpaceLayout& l);

// --- specs ------------------------------------------------------------------------

struct GeneratorSpec {
  int resolution = 64;
  int d_w = 128;
  int cond_dim = 6;
  std::vector<int> channels{64, 64, 32, 24, 12};  // per resolution, starting at 4x4
  bool use_noise = true;
  std::uint64_t noise_seed = 7;

  void validate() const;
  StyleSpaceLayout layout() const;
};

void to_json(nlohmann::json& j, const GeneratorSpec& s);
void from_json(const nlohmann::json& j, GeneratorSpec& s);

// --- networks -------------------------------------------------------------------------

template <typename T>
class Generator {
 public:
  // Activations entering style layer l: features (before any upsampling) and
  // the rgb skip accumulator (empty before the first torgb).
  struct State {
    nn::Tensor<T> feat;
    nn::Tensor<T> rgb;
  };
  struct Cache {
    std::vector<nn::ModConvCache<T>> modconv;
    std::vector<nn::Tensor<T>> act;  // post-activation output of conv layers
    nn::Tensor<T> out;
  };

  Generator() = default;
  explicit Generator(const GeneratorSpec& spec);

  void init(std::mt19937_64& rng);
  const GeneratorSpec& spec() const { return spec_; }
  const StyleSpaceLayout& layout() const { return layout_; }

  // s_l = A_l [w; c] / sqrt(d_w + cond_dim) + b_l, concatenated over layers.
  std::vector<T> style_map(std::span<const T> w, std::span<const T> c) const;
  // Accumulates grads of A and b when param_grads; returns d/d[w; c].
  std::vector<T> style_map_backward(std::span<const T> w, std::span<const T> c,
                                    std::span<const T> dstyle, bool param_grads);

  nn::Tensor<T> synthesize(std::span<const T> s, Cache* cache = nullptr,
                           std::vector<State>* states = nullptr) const;
  // Runs style layers [layer, end) starting from a captured state.
  nn::Tensor<T> synthesize_from(int layer, const State& state, std::span<const T> s) const;
  // Returns d loss / d s.
  std::vector<T> synthesize_backward(const Cache& cache, std::span<const T> s,
                                     const nn::Tensor<T>& dout, bool param_grads);

  nn::ParamList<T> params();
  nn::ParamList<T> mapping_params();    // affine style maps only
  nn::ParamList<T> synthesis_params();  // everything else

 private:
  void run_layer(int l, std::span<const T> s, State& st, Cache* cache) const;

  GeneratorSpec spec_;
  StyleSpaceLayout layout_;
  nn::Param<T> const_input_;
  std::vector<nn::Param<T>> affine_w_, affine_b_;
  std::vector<nn::Param<T>> weight_, bias_, noise_strength_;
  std::vector<std::vector<T>> noise_;  // frozen per-layer buffers (conv layers)
};

template <typename T>
class Encoder {
 public:
  struct Cache {
    typename ConvTrunk<T>::Cache trunk;
    nn::Tensor<T> fm;
  };

  Encoder() = default;
  Encoder(const TrunkSpec& trunk, int d_w);

  void init(std::mt19937_64& rng);
  std::vector<T> forward(const nn::Tensor<T>& x, Cache* cache) const;
  void backward(const Cache& cache, std::span<const T> dw, bool param_grads);
  nn::ParamList<T> params();
  const TrunkSpec& trunk_spec() const { return trunk_.spec(); }
  int d_w() const { return d_w_; }

 private:
  ConvTrunk<T> trunk_;
  int d_w_ = 0;
  nn::Param<T> fc_w_, fc_b_;
};

template <typename T>
class Discriminator {
 public:
  static constexpr int kHidden = 64;
  struct Cache {
    typename ConvTrunk<T>::Cache trunk;
    nn::Tensor<T> fm;
    std::vector<T> hidden;  // post-activation
  };

  Discriminator() = default;
  explicit Discriminator(const TrunkSpec& trunk);

  void init(std::mt19937_64& rng);
  T forward(const nn::Tensor<T>& x, Cache* cache) const;
  // Returns d/dx of dlogit * D(x); accumulates param grads when requested.
  nn::Tensor<T> backward(const Cache& cache, T dlogit, bool param_grads);
  nn::ParamList<T> params();
  const TrunkSpec& trunk_spec() const { return trunk_.spec(); }

 private:
  ConvTrunk<T> trunk_;
  nn::Param<T> fc1_w_, fc1_b_, fc2_w_, fc2_b_;
};

// --- losses ------------------------------------------------------------------------------

inline constexpr double kProbFloor = 1e-6;

struct PerceptualSpec {
  std::vector<int> depths{0, 1, 2};  // classifier trunk stages
  double eps = 1e-10;
};

void to_json(nlohmann::json& j, const PerceptualSpec& s);
void from_json(const nlohmann::json& j, PerceptualSpec& s);

// Mean over the chosen depths of the spatial mean of squared differences of
// channel-normalized features. Writes d/d(fb) when grads is set.
template <typename T>
T perceptual_from_features(const std::vector<nn::Tensor<T>>& fa,
                           const std::vector<nn::Tensor<T>>& fb, const PerceptualSpec& spec,
                           std::vector<nn::Tensor<T>>* grads);

// Mean absolute difference; writes d/dy when dy is set.
template <typename T>
T l1_mean(const nn::Tensor<T>& x, const nn::Tensor<T>& y, nn::Tensor<T>* dy);

// |x - y| mean plus perceptual distance through the frozen extractor.
template <typename T>
T rec_loss(const clf::ClassifierNet<T>& extractor, const PerceptualSpec& spec,
           const nn::Tensor<T>& x, const nn::Tensor<T>& y);

// Sum over heads of KL(p || floor(q)), q given as logits. Writes d/dlogits.
template <typename T>
T kl_from_logits(const std::vector<std::vector<T>>& p, const std::vector<std::vector<T>>& q_logits,
                 std::vector<std::vector<T>>* dlogits);

double cls_loss(const clf::ClassifierOutput& p, const clf::ClassifierOutput& q);

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct AdversarialLosses {
  double d_loss = 0;  // includes r1
  double g_loss = 0;
  double r1 = 0;
};

// Batch means of the non-saturating logistic losses; R1 = gamma/2 |grad_x D(real)|^2.
template <typename T>
AdversarialLosses adversarial_losses(Discriminator<T>& d, const std::vector<nn::Tensor<T>>& real,
                                     const std::vector<nn::Tensor<T>>& fake, double gamma);

// d/dtheta of 0.5 * |grad_x D(x)|^2 by a central difference of parameter
// gradients along g = grad_x D(x), scaled by `weight` and accumulated into
// the discriminator's grads. Returns 0.5 * |g|^2.
template <typename T>
T r1_accumulate(Discriminator<T>& d, const nn::Tensor<T>& x, T weight);

// --- models -------------------------------------------------------------------------------

using ConditionVector = std::vector<float>;
using StyleVector = std::vector<float>;
using LatentW = std::vector<float>;

struct StylexModels {
  GeneratorSpec gen_spec;
  TrunkSpec enc_spec;
  TrunkSpec disc_spec;
  Encoder<float> encoder;
  Generator<float> generator;
  Discriminator<float> discriminator;

  const StyleSpaceLayout& layout() const { return generator.layout(); }
  nn::ParamList<float> all_params();
};

StylexModels make_models(const GeneratorSpec& gen, const TrunkSpec& enc, const TrunkSpec& disc,
                         std::uint64_t seed);

LatentW encode(const StylexModels& m, const synth::Image& pixels);
ConditionVector build_condition(const clf::ClassifierOutput& output,
                                const std::vector<clf::HeadSpec>& heads);
StyleVector style_map(const StylexModels& m, const LatentW& w, const ConditionVector& c);
synth::Image synthesize(const StylexModels& m, const StyleVector& s);
// style vector of the reconstruction path for an image
StyleVector image_style(const StylexModels& m, const clf::ClassifierModel& c,
                        const synth::Image& pixels);
synth::Image reconstruct(const StylexModels& m, const clf::ClassifierModel& c,
                         const synth::Image& pixels);

// --- training ---------------------------------------------------------------------------------

struct StylexTrainConfig {
  double lambda_rec = 0.1;
  double lambda_cls = 0.1;
  double lr = 0.002;
  double beta1 = 0.0;
  double beta2 = 0.99;
  int steps = 40000;
  int batch_size = 16;
  int resolution = 64;
  double r1_gamma = 1.0;
  int r1_interval = 16;
  PerceptualSpec perceptual;
  GeneratorSpec generator;
  TrunkSpec encoder{64, 3, {16, 32, 64, 64}, 1};
  TrunkSpec discriminator{64, 3, {16, 32, 64, 64}, 1};
  int log_every = 50;
  int checkpoint_every = 5000;
  std::uint64_t seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const StylexTrainConfig& c);
void from_json(const nlohmann::json& j, StylexTrainConfig& c);

struct StepRecord {
  int step = 0;
  double d_loss = 0, g_adv = 0, rec = 0, cls = 0, r1 = 0;
};

struct StylexHistory {
  std::vector<StepRecord> steps;
};

class GateRefusal : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOptions {
  double classifier_tune_auc = 1.0;
  bool override_gate = false;
  std::filesystem::path out_dir;  // checkpoints and log; empty disables
  std::function<void(const StepRecord&)> on_step;
};

std::pair<StylexModels, StylexHistory> train_stylex(const std::vector<synth::LabeledImage>& data,
                                                    const clf::ClassifierModel& classifier,
                                                    const StylexTrainConfig& config,
                                                    const TrainOptions& options = {});

// Writes `path` and `path`.json; the sidecar embeds layout, config, step count
// and classifier hash. Returns the blob hash.
std::string save_checkpoint(StylexModels& m, const std::filesystem::path& path,
                            const nlohmann::json& extra = {});
StylexModels load_checkpoint(const std::filesystem::path& path, nlohmann::json* sidecar = nullptr);

}  // namespace stylexlab::sx
