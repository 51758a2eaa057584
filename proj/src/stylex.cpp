#include "stylexlab/stylex.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <spdlog/spdlog.h>

#include "stylexlab/checkpoint.hpp"
#include "stylexlab/hash.hpp"
#include "stylexlab/optim.hpp"

namespace stylexlab::sx {

// --- layout -------------------------------------------------------------------------------

StyleSpaceLayout::StyleSpaceLayout(std::vector<StyleLayer> layers) : layers_(std::move(layers)) {
  for (const auto& l : layers_) {
    if (l.dim <= 0) throw std::invalid_argument("style layer " + l.name + " has no coordinates");
    offsets_.push_back(total_);
    total_ += static_cast<std::size_t>(l.dim);
  }
}

std::pair<int, int> StyleSpaceLayout::locate(std::size_t flat) const {
  if (flat >= total_)
    throw std::out_of_range("style coordinate " + std::to_string(flat) + " outside [0, " +
                            std::to_string(total_) + ")");
  const auto it = std::upper_bound(offsets_.begin(), offsets_.end(), flat);
  const int layer = static_cast<int>(it - offsets_.begin()) - 1;
  return {layer, static_cast<int>(flat - offsets_[layer])};
}

std::size_t StyleSpaceLayout::flat(int layer, int channel) const {
  if (layer < 0 || layer >= num_layers()) throw std::out_of_range("style layer out of range");
  if (channel < 0 || channel >= layers_[layer].dim)
    throw std::out_of_range("style channel out of range");
  return offsets_[layer] + static_cast<std::size_t>(channel);
}

bool StyleSpaceLayout::operator==(const StyleSpaceLayout& o) const {
  if (layers_.size() != o.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto &a = layers_[i], &b = o.layers_[i];
    if (a.name != b.name || a.kind != b.kind || a.resolution != b.resolution || a.dim != b.dim ||
        a.out_channels != b.out_channels || a.upsample != b.upsample)
      return false;
  }
  return true;
}

void to_json(nlohmann::json& j, const StyleSpaceLayout& l) {
  j = nlohmann::json::array();
  for (int i = 0; i < l.num_layers(); ++i) {
    const auto& s = l.layer(i);
    j.push_back({{"index", i},
                 {"name", s.name},
                 {"kind", s.kind == LayerKind::kConv ? "conv" : "torgb"},
                 {"resolution", s.resolution},
                 {"dim", s.dim},
                 {"out_channels", s.out_channels},
                 {"upsample", s.upsample},
                 {"offset", l.offset(i)}});
  }
}

void from_json(const nlohmann::json& j, StyleSpaceLayout& l) {
  std::vector<StyleLayer> layers;
  for (const auto& e : j) {
    StyleLayer s;
    s.name = e.at("name").get<std::string>();
    s.kind = e.at("kind").get<std::string>() == "conv" ? LayerKind::kConv : LayerKind::kToRgb;
    s.resolution = e.at("resolution").get<int>();
    s.dim = e.at("dim").get<int>();
    s.out_channels = e.at("out_channels").get<int>();
    s.upsample = e.at("upsample").get<bool>();
    layers.push_back(s);
  }
  l = StyleSpaceLayout(std::move(layers));
}

// --- generator spec -------------------------------------------------------------------------

void GeneratorSpec::validate() const {
  if (resolution < 8 || (resolution & (resolution - 1)) != 0)
    throw std::invalid_argument("generator resolution must be a power of two >= 8");
  int stages = 0;
  for (int r = 4; r <= resolution; r *= 2) ++stages;
  if (static_cast<int>(channels.size()) != stages)
    throw std::invalid_argument("generator.channels needs one entry per resolution from 4 to " +
                                std::to_string(resolution) + " (" + std::to_string(stages) + ")");
  for (int c : channels)
    if (c < 1) throw std::invalid_argument("generator channels must be positive");
  if (d_w < 1) throw std::invalid_argument("d_w must be positive");
  if (cond_dim < 0) throw std::invalid_argument("cond_dim must be non-negative");
}

StyleSpaceLayout GeneratorSpec::layout() const {
  validate();
  std::vector<StyleLayer> layers;
  layers.push_back({"b4.conv", LayerKind::kConv, 4, channels[0], channels[0], false});
  layers.push_back({"b4.torgb", LayerKind::kToRgb, 4, channels[0], 3, false});
  for (std::size_t k = 1; k < channels.size(); ++k) {
    const int r = 4 << k;
    const std::string p = "b" + std::to_string(r);
    layers.push_back({p + ".conv0", LayerKind::kConv, r, channels[k - 1], channels[k], true});
    layers.push_back({p + ".conv1", LayerKind::kConv, r, channels[k], channels[k], false});
    layers.push_back({p + ".torgb", LayerKind::kToRgb, r, channels[k], 3, true});
  }
  return StyleSpaceLayout(std::move(layers));
}

void to_json(nlohmann::json& j, const GeneratorSpec& s) {
  j = {{"resolution", s.resolution}, {"d_w", s.d_w},
       {"cond_dim", s.cond_dim},     {"channels", s.channels},
       {"use_noise", s.use_noise},   {"noise_seed", s.noise_seed}};
}

void from_json(const nlohmann::json& j, GeneratorSpec& s) {
  s.resolution = j.value("resolution", s.resolution);
  s.d_w = j.value("d_w", s.d_w);
  s.cond_dim = j.value("cond_dim", s.cond_dim);
  s.channels = j.value("channels", s.channels);
  s.use_noise = j.value("use_noise", s.use_noise);
  s.noise_seed = j.value("noise_seed", s.noise_seed);
}

// --- generator ---------------------------------------------------------------------------------

namespace {

template <typename T>
T inv_sqrt(int n) {
  return T(1) / std::sqrt(static_cast<T>(n));
}

int kernel_of(const StyleLayer& l) { return l.kind == LayerKind::kConv ? 3 : 1; }

template <typename T>
void lrelu_vec(std::vector<T>& v) {
  const T slope = static_cast<T>(nn::kLeakySlope), gain = static_cast<T>(nn::kLeakyGain);
  for (auto& x : v) x = x > T(0) ? x * gain : x * slope * gain;
}

template <typename T>
void lrelu_vec_backward(const std::vector<T>& y, std::vector<T>& dy) {
  const T slope = static_cast<T>(nn::kLeakySlope), gain = static_cast<T>(nn::kLeakyGain);
  for (std::size_t i = 0; i < y.size(); ++i) dy[i] *= y[i] > T(0) ? gain : slope * gain;
}

}  // namespace

template <typename T>
Generator<T>::Generator(const GeneratorSpec& spec) : spec_(spec), layout_(spec.layout()) {
  const int in = spec.d_w + spec.cond_dim;
  const_input_ = nn::Param<T>("g.const", static_cast<std::size_t>(spec.channels[0]) * 16);
  std::mt19937_64 noise_rng(spec.noise_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int l = 0; l < layout_.num_layers(); ++l) {
    const auto& L = layout_.layer(l);
    const std::string p = "g." + L.name;
    affine_w_.emplace_back(p + ".affine.w", static_cast<std::size_t>(L.dim) * in);
    affine_b_.emplace_back(p + ".affine.b", L.dim, T(1));
    const int k = kernel_of(L);
    weight_.emplace_back(p + ".w", static_cast<std::size_t>(L.out_channels) * L.dim * k * k);
    bias_.emplace_back(p + ".b", L.out_channels);
    if (L.kind == LayerKind::kConv) {
      noise_strength_.emplace_back(p + ".noise_strength", 1);
      std::vector<T> buf(static_cast<std::size_t>(L.resolution) * L.resolution);
      for (auto& v : buf) v = static_cast<T>(normal(noise_rng));
      noise_.push_back(std::move(buf));
    } else {
      noise_strength_.emplace_back(p + ".noise_strength", 0);
      noise_.emplace_back();
    }
  }
}

template <typename T>
void Generator<T>::init(std::mt19937_64& rng) {
  nn::init_normal(const_input_, rng);
  for (std::size_t l = 0; l < weight_.size(); ++l) {
    nn::init_normal(affine_w_[l], rng);
    std::fill(affine_b_[l].value.begin(), affine_b_[l].value.end(), T(1));
    nn::init_normal(weight_[l], rng);
    std::fill(bias_[l].value.begin(), bias_[l].value.end(), T(0));
    std::fill(noise_strength_[l].value.begin(), noise_strength_[l].value.end(), T(0));
  }
}

template <typename T>
std::vector<T> Generator<T>::style_map(std::span<const T> w, std::span<const T> c) const {
  if (static_cast<int>(w.size()) != spec_.d_w || static_cast<int>(c.size()) != spec_.cond_dim)
    throw std::invalid_argument("style_map: expected w of " + std::to_string(spec_.d_w) +
                                " and c of " + std::to_string(spec_.cond_dim) + ", got " +
                                std::to_string(w.size()) + " and " + std::to_string(c.size()));
  std::vector<T> wc(w.begin(), w.end());
  wc.insert(wc.end(), c.begin(), c.end());
  const T scale = inv_sqrt<T>(static_cast<int>(wc.size()));
  std::vector<T> s(layout_.size());
  for (int l = 0; l < layout_.num_layers(); ++l)
    nn::linear_forward<T>(wc, affine_w_[l].value, affine_b_[l].value, scale,
                          std::span<T>(s).subspan(layout_.offset(l), layout_.layer(l).dim));
  return s;
}

template <typename T>
std::vector<T> Generator<T>::style_map_backward(std::span<const T> w, std::span<const T> c,
                                                std::span<const T> dstyle, bool param_grads) {
  std::vector<T> wc(w.begin(), w.end());
  wc.insert(wc.end(), c.begin(), c.end());
  const T scale = inv_sqrt<T>(static_cast<int>(wc.size()));
  std::vector<T> dwc(wc.size(), T(0)), tmp(wc.size());
  for (int l = 0; l < layout_.num_layers(); ++l) {
    nn::linear_backward<T>(wc, affine_w_[l].value, scale,
                           dstyle.subspan(layout_.offset(l), layout_.layer(l).dim),
                           param_grads ? std::span<T>(affine_w_[l].grad) : std::span<T>(),
                           param_grads ? std::span<T>(affine_b_[l].grad) : std::span<T>(), tmp);
    for (std::size_t i = 0; i < wc.size(); ++i) dwc[i] += tmp[i];
  }
  return dwc;
}

template <typename T>
void Generator<T>::run_layer(int l, std::span<const T> s, State& st, Cache* cache) const {
  const auto& L = layout_.layer(l);
  const auto sl = s.subspan(layout_.offset(l), L.dim);
  const int k = kernel_of(L);
  const T scale = inv_sqrt<T>(L.dim * k * k);
  nn::ModConvCache<T>* mc = cache ? &cache->modconv[l] : nullptr;
  nn::Tensor<T> y;
  if (L.kind == LayerKind::kConv) {
    if (L.upsample)
      nn::modconv_forward<T>(nn::upsample2(st.feat), sl, weight_[l].value, scale, L.out_channels,
                             k, true, y, mc);
    else
      nn::modconv_forward<T>(st.feat, sl, weight_[l].value, scale, L.out_channels, k, true, y, mc);
    if (spec_.use_noise) {
      const T strength = noise_strength_[l].value[0];
      if (strength != T(0)) {
        const auto& nz = noise_[l];
        for (int c = 0; c < y.c; ++c) {
          T* p = y.plane(c);
          for (std::size_t i = 0; i < nz.size(); ++i) p[i] += strength * nz[i];
        }
      }
    }
    nn::add_channel_bias<T>(y, bias_[l].value);
    nn::leaky_relu_inplace(y);
    if (cache) cache->act[l] = y;
    st.feat = std::move(y);
  } else {
    nn::modconv_forward<T>(st.feat, sl, weight_[l].value, scale, L.out_channels, k, false, y, mc);
    nn::add_channel_bias<T>(y, bias_[l].value);
    if (st.rgb.size() == 0) {
      st.rgb = std::move(y);
    } else {
      if (L.upsample) st.rgb = nn::upsample2(st.rgb);
      nn::add_inplace(st.rgb, y);
    }
  }
}

template <typename T>
nn::Tensor<T> Generator<T>::synthesize(std::span<const T> s, Cache* cache,
                                       std::vector<State>* states) const {
  if (s.size() != layout_.size())
    throw std::invalid_argument("style vector of length " + std::to_string(s.size()) +
                                " does not match layout size " + std::to_string(layout_.size()));
  State st;
  st.feat = nn::Tensor<T>(spec_.channels[0], 4, 4);
  st.feat.data = const_input_.value;
  if (cache) {
    cache->modconv.assign(layout_.num_layers(), {});
    cache->act.assign(layout_.num_layers(), {});
  }
  if (states) states->clear();
  for (int l = 0; l < layout_.num_layers(); ++l) {
    if (states) states->push_back(st);
    run_layer(l, s, st, cache);
  }
  nn::Tensor<T> out = std::move(st.rgb);
  for (auto& v : out.data) v = std::tanh(v);
  if (cache) cache->out = out;
  return out;
}

template <typename T>
nn::Tensor<T> Generator<T>::synthesize_from(int layer, const State& state,
                                            std::span<const T> s) const {
  if (s.size() != layout_.size()) throw std::invalid_argument("style vector/layout mismatch");
  if (layer < 0 || layer >= layout_.num_layers()) throw std::out_of_range("layer out of range");
  State st = state;
  for (int l = layer; l < layout_.num_layers(); ++l) run_layer(l, s, st, nullptr);
  nn::Tensor<T> out = std::move(st.rgb);
  for (auto& v : out.data) v = std::tanh(v);
  return out;
}

template <typename T>
std::vector<T> Generator<T>::synthesize_backward(const Cache& cache, std::span<const T> s,
                                                 const nn::Tensor<T>& dout, bool param_grads) {
  std::vector<T> ds(layout_.size(), T(0));
  nn::Tensor<T> drgb = dout;
  for (std::size_t i = 0; i < drgb.size(); ++i) {
    const T o = cache.out.data[i];
    drgb.data[i] *= T(1) - o * o;
  }
  nn::Tensor<T> dfeat;
  for (int l = layout_.num_layers() - 1; l >= 0; --l) {
    const auto& L = layout_.layer(l);
    const int k = kernel_of(L);
    const T scale = inv_sqrt<T>(L.dim * k * k);
    auto dsl = std::span<T>(ds).subspan(layout_.offset(l), L.dim);
    auto dweight = param_grads ? std::span<T>(weight_[l].grad) : std::span<T>();
    nn::Tensor<T> dx;
    if (L.kind == LayerKind::kToRgb) {
      if (param_grads) nn::channel_bias_grad<T>(drgb, bias_[l].grad);
      nn::modconv_backward<T>(cache.modconv[l], weight_[l].value, scale, L.out_channels, k, drgb,
                              dweight, dsl, &dx);
      if (dfeat.size() == 0)
        dfeat = std::move(dx);
      else
        nn::add_inplace(dfeat, dx);
      if (L.upsample) drgb = nn::upsample2_backward(drgb);
    } else {
      nn::Tensor<T> grad = std::move(dfeat);
      nn::leaky_relu_backward_inplace(cache.act[l], grad);
      if (param_grads) {
        nn::channel_bias_grad<T>(grad, bias_[l].grad);
        if (spec_.use_noise) {
          const auto& nz = noise_[l];
          T acc = T(0);
          for (int c = 0; c < grad.c; ++c) {
            const T* g = grad.plane(c);
            for (std::size_t i = 0; i < nz.size(); ++i) acc += g[i] * nz[i];
          }
          noise_strength_[l].grad[0] += acc;
        }
      }
      nn::modconv_backward<T>(cache.modconv[l], weight_[l].value, scale, L.out_channels, k, grad,
                              dweight, dsl, &dx);
      dfeat = L.upsample ? nn::upsample2_backward(dx) : std::move(dx);
    }
  }
  if (param_grads)
    for (std::size_t i = 0; i < dfeat.size(); ++i) const_input_.grad[i] += dfeat.data[i];
  (void)s;
  return ds;
}

template <typename T>
nn::ParamList<T> Generator<T>::mapping_params() {
  nn::ParamList<T> out;
  for (std::size_t l = 0; l < affine_w_.size(); ++l) {
    out.push_back(&affine_w_[l]);
    out.push_back(&affine_b_[l]);
  }
  return out;
}

template <typename T>
nn::ParamList<T> Generator<T>::synthesis_params() {
  nn::ParamList<T> out{&const_input_};
  for (std::size_t l = 0; l < weight_.size(); ++l) {
    out.push_back(&weight_[l]);
    out.push_back(&bias_[l]);
    if (noise_strength_[l].size() > 0) out.push_back(&noise_strength_[l]);
  }
  return out;
}

template <typename T>
nn::ParamList<T> Generator<T>::params() {
  auto out = mapping_params();
  const auto syn = synthesis_params();
  out.insert(out.end(), syn.begin(), syn.end());
  return out;
}

// --- encoder ----------------------------------------------------------------------------------

template <typename T>
Encoder<T>::Encoder(const TrunkSpec& trunk, int d_w) : trunk_("enc", trunk), d_w_(d_w) {
  const int in = trunk.out_channels() * trunk.out_resolution() * trunk.out_resolution();
  fc_w_ = nn::Param<T>("enc.fc.w", static_cast<std::size_t>(d_w) * in);
  fc_b_ = nn::Param<T>("enc.fc.b", d_w);
}

template <typename T>
void Encoder<T>::init(std::mt19937_64& rng) {
  trunk_.init(rng);
  nn::init_normal(fc_w_, rng);
  std::fill(fc_b_.value.begin(), fc_b_.value.end(), T(0));
}

template <typename T>
std::vector<T> Encoder<T>::forward(const nn::Tensor<T>& x, Cache* cache) const {
  nn::Tensor<T> fm = trunk_.forward(x, cache ? &cache->trunk : nullptr);
  std::vector<T> w(d_w_);
  nn::linear_forward<T>(fm.data, fc_w_.value, fc_b_.value, inv_sqrt<T>(static_cast<int>(fm.size())),
                        w);
  if (cache) cache->fm = std::move(fm);
  return w;
}

template <typename T>
void Encoder<T>::backward(const Cache& cache, std::span<const T> dw, bool param_grads) {
  const auto& fm = cache.fm;
  nn::Tensor<T> dfm(fm.c, fm.h, fm.w);
  nn::linear_backward<T>(fm.data, fc_w_.value, inv_sqrt<T>(static_cast<int>(fm.size())), dw,
                         param_grads ? std::span<T>(fc_w_.grad) : std::span<T>(),
                         param_grads ? std::span<T>(fc_b_.grad) : std::span<T>(), dfm.data);
  trunk_.backward(cache.trunk, dfm, nullptr, param_grads);
}

template <typename T>
nn::ParamList<T> Encoder<T>::params() {
  auto out = trunk_.params();
  out.push_back(&fc_w_);
  out.push_back(&fc_b_);
  return out;
}

// --- discriminator ---------------------------------------------------------------------------------

template <typename T>
Discriminator<T>::Discriminator(const TrunkSpec& trunk) : trunk_("disc", trunk) {
  const int in = trunk.out_channels() * trunk.out_resolution() * trunk.out_resolution();
  fc1_w_ = nn::Param<T>("disc.fc1.w", static_cast<std::size_t>(kHidden) * in);
  fc1_b_ = nn::Param<T>("disc.fc1.b", kHidden);
  fc2_w_ = nn::Param<T>("disc.fc2.w", kHidden);
  fc2_b_ = nn::Param<T>("disc.fc2.b", 1);
}

template <typename T>
void Discriminator<T>::init(std::mt19937_64& rng) {
  trunk_.init(rng);
  nn::init_normal(fc1_w_, rng);
  nn::init_normal(fc2_w_, rng);
  std::fill(fc1_b_.value.begin(), fc1_b_.value.end(), T(0));
  std::fill(fc2_b_.value.begin(), fc2_b_.value.end(), T(0));
}

template <typename T>
T Discriminator<T>::forward(const nn::Tensor<T>& x, Cache* cache) const {
  nn::Tensor<T> fm = trunk_.forward(x, cache ? &cache->trunk : nullptr);
  std::vector<T> h(kHidden);
  nn::linear_forward<T>(fm.data, fc1_w_.value, fc1_b_.value,
                        inv_sqrt<T>(static_cast<int>(fm.size())), h);
  lrelu_vec(h);
  T out = T(0);
  nn::linear_forward<T>(h, fc2_w_.value, fc2_b_.value, inv_sqrt<T>(kHidden), std::span<T>(&out, 1));
  if (cache) {
    cache->fm = std::move(fm);
    cache->hidden = std::move(h);
  }
  return out;
}

template <typename T>
nn::Tensor<T> Discriminator<T>::backward(const Cache& cache, T dlogit, bool param_grads) {
  std::vector<T> dh(kHidden);
  nn::linear_backward<T>(cache.hidden, fc2_w_.value, inv_sqrt<T>(kHidden),
                         std::span<const T>(&dlogit, 1),
                         param_grads ? std::span<T>(fc2_w_.grad) : std::span<T>(),
                         param_grads ? std::span<T>(fc2_b_.grad) : std::span<T>(), dh);
  lrelu_vec_backward(cache.hidden, dh);
  const auto& fm = cache.fm;
  nn::Tensor<T> dfm(fm.c, fm.h, fm.w);
  nn::linear_backward<T>(fm.data, fc1_w_.value, inv_sqrt<T>(static_cast<int>(fm.size())), dh,
                         param_grads ? std::span<T>(fc1_w_.grad) : std::span<T>(),
                         param_grads ? std::span<T>(fc1_b_.grad) : std::span<T>(), dfm.data);
  return trunk_.backward(cache.trunk, dfm, nullptr, param_grads);
}

template <typename T>
nn::ParamList<T> Discriminator<T>::params() {
  auto out = trunk_.params();
  out.push_back(&fc1_w_);
  out.push_back(&fc1_b_);
  out.push_back(&fc2_w_);
  out.push_back(&fc2_b_);
  return out;
}

template class Generator<float>;
template class Generator<double>;
template class Encoder<float>;
template class Encoder<double>;
template class Discriminator<float>;
template class Discriminator<double>;

// --- losses ------------------------------------------------------------------------------------------

void to_json(nlohmann::json& j, const PerceptualSpec& s) {
  j = {{"extractor", "classifier_trunk"}, {"depths", s.depths}, {"eps", s.eps}};
}

void from_json(const nlohmann::json& j, PerceptualSpec& s) {
  s.depths = j.value("depths", s.depths);
  s.eps = j.value("eps", s.eps);
  const auto ex = j.value("extractor", std::string("classifier_trunk"));
  if (ex != "classifier_trunk")
    throw std::invalid_argument("perceptual.extractor must be classifier_trunk");
}

template <typename T>
T perceptual_from_features(const std::vector<nn::Tensor<T>>& fa,
                           const std::vector<nn::Tensor<T>>& fb, const PerceptualSpec& spec,
                           std::vector<nn::Tensor<T>>* grads) {
  if (spec.depths.empty()) return T(0);
  if (grads) {
    grads->assign(fb.size(), nn::Tensor<T>());
  }
  const T eps = static_cast<T>(spec.eps);
  const T depth_norm = T(1) / static_cast<T>(spec.depths.size());
  T total = T(0);
  for (int d : spec.depths) {
    if (d < 0 || d >= static_cast<int>(fa.size()) || d >= static_cast<int>(fb.size()))
      throw std::invalid_argument("perceptual depth " + std::to_string(d) + " not available");
    const auto& A = fa[d];
    const auto& B = fb[d];
    if (!A.same_shape(B)) throw std::invalid_argument("perceptual feature shape mismatch");
    const std::size_t hw = A.plane_size();
    const T pos_norm = T(1) / static_cast<T>(hw);
    nn::Tensor<T>* G = nullptr;
    if (grads) {
      (*grads)[d] = nn::Tensor<T>(B.c, B.h, B.w);
      G = &(*grads)[d];
    }
    std::vector<T> u(A.c), v(B.c);
    T sum = T(0);
    for (std::size_t p = 0; p < hw; ++p) {
      T na = eps, nb = eps;
      for (int c = 0; c < A.c; ++c) {
        const T a = A.data[c * hw + p], b = B.data[c * hw + p];
        na += a * a;
        nb += b * b;
      }
      na = std::sqrt(na);
      nb = std::sqrt(nb);
      T proj = T(0);
      for (int c = 0; c < A.c; ++c) {
        u[c] = A.data[c * hw + p] / na;
        v[c] = B.data[c * hw + p] / nb;
        const T diff = u[c] - v[c];
        sum += diff * diff;
        proj += v[c] * (v[c] - u[c]);
      }
      if (G) {
        // d/dv of |u - v|^2 is 2 (v - u); project through v = b / |b|.
        const T k = T(2) * pos_norm * depth_norm / nb;
        for (int c = 0; c < A.c; ++c)
          G->data[c * hw + p] = k * ((v[c] - u[c]) - v[c] * proj);
      }
    }
    total += sum * pos_norm;
  }
  return total * depth_norm;
}

template <typename T>
T l1_mean(const nn::Tensor<T>& x, const nn::Tensor<T>& y, nn::Tensor<T>* dy) {
  if (!x.same_shape(y)) throw std::invalid_argument("l1: shape mismatch");
  const T inv = T(1) / static_cast<T>(x.size());
  T sum = T(0);
  if (dy) *dy = nn::Tensor<T>(y.c, y.h, y.w);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T d = y.data[i] - x.data[i];
    sum += std::abs(d);
    if (dy) dy->data[i] = d > T(0) ? inv : (d < T(0) ? -inv : T(0));
  }
  return sum * inv;
}

template <typename T>
T rec_loss(const clf::ClassifierNet<T>& extractor, const PerceptualSpec& spec,
           const nn::Tensor<T>& x, const nn::Tensor<T>& y) {
  if (!x.same_shape(y)) throw std::invalid_argument("rec_loss: shape mismatch");
  std::vector<nn::Tensor<T>> fx, fy;
  extractor.forward(x, nullptr, &fx);
  extractor.forward(y, nullptr, &fy);
  return l1_mean(x, y, static_cast<nn::Tensor<T>*>(nullptr)) +
         perceptual_from_features(fx, fy, spec, static_cast<std::vector<nn::Tensor<T>>*>(nullptr));
}

template <typename T>
T kl_from_logits(const std::vector<std::vector<T>>& p, const std::vector<std::vector<T>>& q_logits,
                 std::vector<std::vector<T>>* dlogits) {
  if (p.size() != q_logits.size()) throw std::invalid_argument("cls_loss: head count mismatch");
  const T floor = static_cast<T>(kProbFloor);
  T total = T(0);
  if (dlogits) dlogits->assign(p.size(), {});
  for (std::size_t h = 0; h < p.size(); ++h) {
    if (p[h].size() != q_logits[h].size())
      throw std::invalid_argument("cls_loss: class count mismatch");
    const auto q = clf::softmax(q_logits[h]);
    const std::size_t n = q.size();
    std::vector<T> qf(n);
    T z = T(0), psum = T(0);
    for (std::size_t i = 0; i < n; ++i) {
      qf[i] = std::max(q[i], floor);
      z += qf[i];
      psum += p[h][i];
    }
    for (std::size_t i = 0; i < n; ++i)
      if (p[h][i] > T(0)) total += p[h][i] * (std::log(p[h][i]) - std::log(qf[i] / z));
    if (dlogits) {
      std::vector<T> g(n);
      T qg = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        g[i] = q[i] > floor ? -p[h][i] / qf[i] + psum / z : T(0);
        qg += q[i] * g[i];
      }
      auto& d = (*dlogits)[h];
      d.resize(n);
      for (std::size_t j = 0; j < n; ++j) d[j] = q[j] * (g[j] - qg);
    }
  }
  return total;
}

double cls_loss(const clf::ClassifierOutput& p, const clf::ClassifierOutput& q) {
  if (p.heads.size() != q.heads.size()) throw std::invalid_argument("cls_loss: head count mismatch");
  double total = 0.0;
  for (std::size_t h = 0; h < p.heads.size(); ++h) {
    const auto& ph = p.heads[h];
    const auto& qh = q.head(ph.name);
    if (ph.probs.size() != qh.probs.size())
      throw std::invalid_argument("cls_loss: class count mismatch for head " + ph.name);
    double z = 0.0;
    for (double v : qh.probs) z += std::max(v, kProbFloor);
    for (std::size_t i = 0; i < ph.probs.size(); ++i)
      if (ph.probs[i] > 0)
        total += ph.probs[i] * (std::log(ph.probs[i]) - std::log(std::max(qh.probs[i], kProbFloor) / z));
  }
  return total;
}

template <typename T>
AdversarialLosses adversarial_losses(Discriminator<T>& d, const std::vector<nn::Tensor<T>>& real,
                                     const std::vector<nn::Tensor<T>>& fake, double gamma) {
  AdversarialLosses out;
  typename Discriminator<T>::Cache cache;
  double real_term = 0, r1 = 0;
  for (const auto& x : real) {
    const double logit = d.forward(x, &cache);
    real_term += softplus(-logit);
    if (gamma != 0.0) {
      const auto g = d.backward(cache, T(1), false);
      double sq = 0;
      for (T v : g.data) sq += static_cast<double>(v) * v;
      r1 += 0.5 * gamma * sq;
    }
  }
  double fake_d = 0, fake_g = 0;
  for (const auto& x : fake) {
    const double logit = d.forward(x, nullptr);
    fake_d += softplus(logit);
    fake_g += softplus(-logit);
  }
  const double nr = std::max<std::size_t>(real.size(), 1), nf = std::max<std::size_t>(fake.size(), 1);
  out.r1 = r1 / nr;
  out.d_loss = real_term / nr + fake_d / nf + out.r1;
  out.g_loss = fake_g / nf;
  return out;
}

template <typename T>
T r1_accumulate(Discriminator<T>& d, const nn::Tensor<T>& x, T weight) {
  typename Discriminator<T>::Cache cache;
  d.forward(x, &cache);
  const auto g = d.backward(cache, T(1), false);
  T sq = T(0), gmax = T(0);
  for (T v : g.data) {
    sq += v * v;
    gmax = std::max(gmax, std::abs(v));
  }
  if (gmax == T(0) || weight == T(0)) return T(0.5) * sq;
  // Step so the largest pixel moves by a small fixed amount.
  const T h = static_cast<T>(std::is_same_v<T, double> ? 1e-4 : 2e-2) / gmax;
  nn::Tensor<T> xp = x, xm = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xp.data[i] += h * g.data[i];
    xm.data[i] -= h * g.data[i];
  }
  d.forward(xp, &cache);
  d.backward(cache, weight / (T(2) * h), true);
  d.forward(xm, &cache);
  d.backward(cache, -weight / (T(2) * h), true);
  return T(0.5) * sq;
}

#define STYLEXLAB_LOSS_INSTANTIATE(T)                                                          \
  template T perceptual_from_features<T>(const std::vector<nn::Tensor<T>>&,                    \
                                         const std::vector<nn::Tensor<T>>&,                    \
                                         const PerceptualSpec&, std::vector<nn::Tensor<T>>*);  \
  template T l1_mean<T>(const nn::Tensor<T>&, const nn::Tensor<T>&, nn::Tensor<T>*);          \
  template T rec_loss<T>(const clf::ClassifierNet<T>&, const PerceptualSpec&,                 \
                         const nn::Tensor<T>&, const nn::Tensor<T>&);                         \
  template T kl_from_logits<T>(const std::vector<std::vector<T>>&,                            \
                               const std::vector<std::vector<T>>&, std::vector<std::vector<T>>*); \
  template AdversarialLosses adversarial_losses<T>(Discriminator<T>&,                          \
                                                   const std::vector<nn::Tensor<T>>&,          \
                                                   const std::vector<nn::Tensor<T>>&, double); \
  template T r1_accumulate<T>(Discriminator<T>&, const nn::Tensor<T>&, T);

STYLEXLAB_LOSS_INSTANTIATE(float)
STYLEXLAB_LOSS_INSTANTIATE(double)
#undef STYLEXLAB_LOSS_INSTANTIATE

// --- model-level operations ------------------------------------------------------------------------

nn::ParamList<float> StylexModels::all_params() {
  auto out = encoder.params();
  const auto g = generator.params();
  const auto d = discriminator.params();
  out.insert(out.end(), g.begin(), g.end());
  out.insert(out.end(), d.begin(), d.end());
  return out;
}

StylexModels make_models(const GeneratorSpec& gen, const TrunkSpec& enc, const TrunkSpec& disc,
                         std::uint64_t seed) {
  gen.validate();
  if (enc.resolution != gen.resolution || disc.resolution != gen.resolution)
    throw std::invalid_argument("encoder, generator and discriminator resolutions differ");
  StylexModels m{gen, enc, disc, Encoder<float>(enc, gen.d_w), Generator<float>(gen),
                 Discriminator<float>(disc)};
  std::mt19937_64 rng(seed);
  m.encoder.init(rng);
  m.generator.init(rng);
  m.discriminator.init(rng);
  return m;
}

LatentW encode(const StylexModels& m, const synth::Image& pixels) {
  return m.encoder.forward(pixels, nullptr);
}

ConditionVector build_condition(const clf::ClassifierOutput& output,
                                const std::vector<clf::HeadSpec>& heads) {
  ConditionVector c;
  for (const auto& h : heads) {
    const auto& ho = output.head(h.name);
    if (static_cast<int>(ho.probs.size()) != h.num_classes)
      throw std::invalid_argument("head " + h.name + " has the wrong number of classes");
    for (double p : ho.probs) c.push_back(static_cast<float>(p));
  }
  return c;
}

StyleVector style_map(const StylexModels& m, const LatentW& w, const ConditionVector& c) {
  return m.generator.style_map(w, c);
}

synth::Image synthesize(const StylexModels& m, const StyleVector& s) {
  return m.generator.synthesize(s);
}

StyleVector image_style(const StylexModels& m, const clf::ClassifierModel& c,
                        const synth::Image& pixels) {
  const auto w = encode(m, pixels);
  const auto cond = build_condition(clf::predict(c, pixels), c.heads);
  return style_map(m, w, cond);
}

synth::Image reconstruct(const StylexModels& m, const clf::ClassifierModel& c,
                         const synth::Image& pixels) {
  return synthesize(m, image_style(m, c, pixels));
}

// --- config ------------------------------------------------------------------------------------------

void StylexTrainConfig::validate() const {
  if (!(lambda_rec >= 0)) throw std::invalid_argument("stylex.lambda_rec must be >= 0");
  if (!(lambda_cls >= 0)) throw std::invalid_argument("stylex.lambda_cls must be >= 0");
  if (!(lr > 0)) throw std::invalid_argument("stylex.lr must be positive");
  if (steps <= 0) throw std::invalid_argument("stylex.steps must be positive");
  if (batch_size < 1) throw std::invalid_argument("stylex.batch_size must be >= 1");
  if (!(r1_gamma >= 0)) throw std::invalid_argument("stylex.r1_gamma must be >= 0");
  if (r1_interval < 1) throw std::invalid_argument("stylex.r1_interval must be >= 1");
  if (encoder.resolution != resolution || discriminator.resolution != resolution)
    throw std::invalid_argument("stylex encoder/discriminator resolution must equal resolution");
  GeneratorSpec g = generator;
  g.resolution = resolution;
  g.validate();
  encoder.validate();
  discriminator.validate();
}

void to_json(nlohmann::json& j, const StylexTrainConfig& c) {
  j = {{"lambda_rec", c.lambda_rec},
       {"lambda_cls", c.lambda_cls},
       {"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"steps", c.steps},
       {"batch_size", c.batch_size},
       {"resolution", c.resolution},
       {"r1_gamma", c.r1_gamma},
       {"r1_interval", c.r1_interval},
       {"perceptual", c.perceptual},
       {"generator", c.generator},
       {"encoder", c.encoder},
       {"discriminator", c.discriminator},
       {"log_every", c.log_every},
       {"checkpoint_every", c.checkpoint_every},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, StylexTrainConfig& c) {
  c.lambda_rec = j.value("lambda_rec", c.lambda_rec);
  c.lambda_cls = j.value("lambda_cls", c.lambda_cls);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.resolution = j.value("resolution", c.resolution);
  c.r1_gamma = j.value("r1_gamma", c.r1_gamma);
  c.r1_interval = j.value("r1_interval", c.r1_interval);
  if (j.contains("perceptual")) c.perceptual = j.at("perceptual").get<PerceptualSpec>();
  if (j.contains("generator")) c.generator = j.at("generator").get<GeneratorSpec>();
  if (j.contains("encoder")) c.encoder = j.at("encoder").get<TrunkSpec>();
  if (j.contains("discriminator")) c.discriminator = j.at("discriminator").get<TrunkSpec>();
  c.log_every = j.value("log_every", c.log_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.seed = j.value("seed", c.seed);
}

// --- training -----------------------------------------------------------------------------------------

namespace {

nlohmann::json step_json(const StepRecord& r) {
  return {{"step", r.step}, {"d_loss", r.d_loss}, {"g_adv", r.g_adv},
          {"rec", r.rec},   {"cls", r.cls},       {"r1", r.r1}};
}

}  // namespace

std::pair<StylexModels, StylexHistory> train_stylex(const std::vector<synth::LabeledImage>& data,
                                                    const clf::ClassifierModel& classifier,
                                                    const StylexTrainConfig& config,
                                                    const TrainOptions& options) {
  config.validate();
  if (clf::gate(options.classifier_tune_auc) == clf::GateResult::kFail) {
    if (!options.override_gate)
      throw GateRefusal("classifier tune AUC " + std::to_string(options.classifier_tune_auc) +
                        " is below the gate threshold " + std::to_string(clf::kGateThreshold) +
                        "; refusing to train (use --override-gate to force)");
    spdlog::warn("classifier gate failed (AUC {:.4f} < {}); continuing under override",
                 options.classifier_tune_auc, clf::kGateThreshold);
  }
  if (data.empty()) throw std::invalid_argument("stylex training set is empty");
  if (classifier.resolution() != config.resolution)
    throw nn::ShapeError("classifier resolution differs from stylex resolution");
  for (const auto& item : data)
    if (item.pixels.h != config.resolution || item.pixels.w != config.resolution)
      throw nn::ShapeError("training image resolution differs from stylex resolution");

  GeneratorSpec gen = config.generator;
  gen.resolution = config.resolution;
  gen.cond_dim = 0;
  for (const auto& h : classifier.heads) gen.cond_dim += h.num_classes;
  for (int d : config.perceptual.depths)
    if (d < 0 || d >= static_cast<int>(classifier.net.arch().widths.size()))
      throw std::invalid_argument("perceptual depth exceeds classifier trunk stages");

  StylexModels m = make_models(gen, config.encoder, config.discriminator, config.seed);
  const std::string clf_hash_before = clf::classifier_hash(classifier);
  clf::ClassifierNet<float> cnet = classifier.net;  // private copy; only its input grads are used

  // The classifier is frozen, so conditions and target probabilities are fixed per image.
  std::vector<ConditionVector> conds(data.size());
  std::vector<std::vector<std::vector<float>>> targets(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto out = clf::predict(classifier, data[i].pixels);
    conds[i] = build_condition(out, classifier.heads);
    for (const auto& h : out.heads) targets[i].emplace_back(h.probs.begin(), h.probs.end());
  }

  auto ge_params = m.generator.params();
  {
    const auto e = m.encoder.params();
    ge_params.insert(ge_params.end(), e.begin(), e.end());
  }
  const auto d_params = m.discriminator.params();
  optim::Adam opt_g(ge_params, config.lr, config.beta1, config.beta2);
  optim::Adam opt_d(d_params, config.lr, config.beta1, config.beta2);

  std::mt19937_64 rng(config.seed ^ 0x5eedba7c4ULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  std::ofstream log_file;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    log_file.open(options.out_dir / "stylex_log.jsonl", std::ios::trunc);
  }

  const int B = config.batch_size;
  const float inv_b = 1.0f / static_cast<float>(B);
  const float lrec = static_cast<float>(config.lambda_rec);
  const float lcls = static_cast<float>(config.lambda_cls);
  std::vector<std::size_t> batch(B);
  std::vector<Encoder<float>::Cache> ecache(B);
  std::vector<Generator<float>::Cache> gcache(B);
  std::vector<LatentW> ws(B);
  std::vector<StyleVector> ss(B);
  std::vector<synth::Image> fakes(B);
  Discriminator<float>::Cache dcache;
  clf::ClassifierNet<float>::Cache ccache;
  StylexHistory history;

  auto abort_numeric = [&](int step, const std::string& what) {
    if (!options.out_dir.empty()) {
      try {
        save_checkpoint(m, options.out_dir / "stylex_diagnostic.bin",
                        {{"step", step}, {"failure", what}});
      } catch (const std::exception& e) {
        spdlog::error("could not write diagnostic checkpoint: {}", e.what());
      }
    }
    throw NumericFailure("non-finite " + what + " at stylex step " + std::to_string(step));
  };

  for (int step = 1; step <= config.steps; ++step) {
    for (int b = 0; b < B; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch[b] = order[cursor++];
    }
    for (int b = 0; b < B; ++b) {
      const auto& x = data[batch[b]].pixels;
      ws[b] = m.encoder.forward(x, &ecache[b]);
      ss[b] = m.generator.style_map(ws[b], conds[batch[b]]);
      fakes[b] = m.generator.synthesize(ss[b], &gcache[b]);
    }

    StepRecord rec;
    rec.step = step;

    // Discriminator update.
    nn::zero_grads(d_params);
    for (int b = 0; b < B; ++b) {
      const double lr_ = m.discriminator.forward(data[batch[b]].pixels, &dcache);
      rec.d_loss += softplus(-lr_);
      m.discriminator.backward(dcache, static_cast<float>(-sigmoid(-lr_)), true);
      const double lf = m.discriminator.forward(fakes[b], &dcache);
      rec.d_loss += softplus(lf);
      m.discriminator.backward(dcache, static_cast<float>(sigmoid(lf)), true);
    }
    if (config.r1_gamma > 0 && step % config.r1_interval == 0) {
      const float weight = static_cast<float>(config.r1_gamma * config.r1_interval);
      double r1 = 0;
      for (int b = 0; b < B; ++b)
        r1 += r1_accumulate(m.discriminator, data[batch[b]].pixels, weight);
      rec.r1 = config.r1_gamma * r1 / B;
    }
    opt_d.step(inv_b);
    rec.d_loss /= B;

    // Encoder + generator update against the refreshed discriminator.
    nn::zero_grads(ge_params);
    for (int b = 0; b < B; ++b) {
      const auto& x = data[batch[b]].pixels;
      const double lf = m.discriminator.forward(fakes[b], &dcache);
      rec.g_adv += softplus(-lf);
      nn::Tensor<float> dx = m.discriminator.backward(dcache, static_cast<float>(-sigmoid(-lf)), false);

      std::vector<nn::Tensor<float>> fx, ff, dfeat;
      cnet.forward(x, nullptr, &fx);
      const auto logits = cnet.forward(fakes[b], &ccache, &ff);
      std::vector<std::vector<float>> dlogits;
      rec.cls += kl_from_logits(targets[batch[b]], logits, &dlogits);
      for (auto& hd : dlogits)
        for (auto& v : hd) v *= lcls;
      double rec_b = perceptual_from_features(fx, ff, config.perceptual, &dfeat);
      for (auto& t : dfeat)
        for (auto& v : t.data) v *= lrec;
      nn::Tensor<float> dl1;
      rec_b += l1_mean(x, fakes[b], &dl1);
      rec.rec += rec_b;
      const auto dxc = cnet.backward(ccache, dlogits, &dfeat, false);
      for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += dxc.data[i] + lrec * dl1.data[i];

      const auto ds = m.generator.synthesize_backward(gcache[b], ss[b], dx, true);
      const auto dwc = m.generator.style_map_backward(ws[b], conds[batch[b]], ds, true);
      m.encoder.backward(ecache[b], std::span<const float>(dwc).first(ws[b].size()), true);
    }
    opt_g.step(inv_b);
    rec.g_adv /= B;
    rec.rec /= B;
    rec.cls /= B;

    for (double v : {rec.d_loss, rec.g_adv, rec.rec, rec.cls, rec.r1})
      if (!std::isfinite(v)) abort_numeric(step, "loss");
    history.steps.push_back(rec);
    if (options.on_step) options.on_step(rec);
    if (step % config.log_every == 0 || step == 1 || step == config.steps) {
      spdlog::info("stylex step {} d {:.4f} g_adv {:.4f} rec {:.4f} cls {:.4f} r1 {:.4f}", step,
                   rec.d_loss, rec.g_adv, rec.rec, rec.cls, rec.r1);
      if (log_file) log_file << step_json(rec).dump() << "\n" << std::flush;
    }
    if (!options.out_dir.empty() && config.checkpoint_every > 0 &&
        step % config.checkpoint_every == 0 && step != config.steps)
      save_checkpoint(m, options.out_dir / "stylex_latest.bin", {{"step", step}});
  }

  if (clf::classifier_hash(classifier) != clf_hash_before)
    throw std::logic_error("classifier parameters changed during stylex training");
  return {std::move(m), std::move(history)};
}

// --- checkpoints ------------------------------------------------------------------------------------

std::string save_checkpoint(StylexModels& m, const std::filesystem::path& path,
                            const nlohmann::json& extra) {
  const std::string hash = ckpt::write_blob(path, "stylex", m.all_params());
  nlohmann::json side = {{"format_version", ckpt::kFormatVersion},
                         {"kind", "stylex"},
                         {"generator", m.gen_spec},
                         {"encoder", m.enc_spec},
                         {"discriminator", m.disc_spec},
                         {"layout", m.layout()},
                         {"style_size", m.layout().size()},
                         {"blob_sha256", hash}};
  if (extra.is_object())
    for (auto it = extra.begin(); it != extra.end(); ++it) side[it.key()] = it.value();
  auto side_path = path;
  side_path += ".json";
  ckpt::write_text(side_path, side.dump(2) + "\n");
  return hash;
}

StylexModels load_checkpoint(const std::filesystem::path& path, nlohmann::json* sidecar) {
  auto side_path = path;
  side_path += ".json";
  std::ifstream in(side_path);
  if (!in) throw std::runtime_error("missing checkpoint sidecar " + side_path.string());
  const auto side = nlohmann::json::parse(in);
  if (side.value("format_version", 0u) != ckpt::kFormatVersion)
    throw ckpt::VersionError("stylex sidecar has unsupported format version");
  StylexModels m = make_models(side.at("generator").get<GeneratorSpec>(),
                               side.at("encoder").get<TrunkSpec>(),
                               side.at("discriminator").get<TrunkSpec>(), 0);
  const auto stored = side.at("layout").get<StyleSpaceLayout>();
  if (!(stored == m.layout()))
    throw ckpt::CorruptError("checkpoint layout does not match its generator spec");
  for (std::size_t f = 0; f < m.layout().size(); ++f) {
    const auto [l, c] = m.layout().locate(f);
    if (m.layout().flat(l, c) != f) throw ckpt::CorruptError("layout bijection check failed");
  }
  const auto blob = ckpt::read_blob(path, "stylex");
  ckpt::load_params(blob, m.all_params());
  if (sidecar) *sidecar = side;
  return m;
}

}  // namespace stylexlab::sx
