#include "stylexlab/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <fstream>
#include <set>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "stylexlab/checkpoint.hpp"
#include "stylexlab/hash.hpp"
#include "stylexlab/optim.hpp"

namespace stylexlab::clf {

void to_json(nlohmann::json& j, const HeadSpec& h) {
  j = {{"name", h.name},
       {"num_classes", h.num_classes},
       {"role", h.role == HeadRole::kPrimary ? "primary" : "confounder"},
       {"positive_class", h.positive_class}};
}

void from_json(const nlohmann::json& j, HeadSpec& h) {
  h.name = j.at("name").get<std::string>();
  h.num_classes = j.value("num_classes", 2);
  const auto role = j.value("role", std::string("confounder"));
  if (role != "primary" && role != "confounder")
    throw std::invalid_argument("head role must be primary or confounder, got " + role);
  h.role = role == "primary" ? HeadRole::kPrimary : HeadRole::kConfounder;
  h.positive_class = j.value("positive_class", 1);
}

void validate_heads(const std::vector<HeadSpec>& heads) {
  int primaries = 0;
  std::set<std::string> names;
  for (const auto& h : heads) {
    if (h.name.empty()) throw std::invalid_argument("head name must not be empty");
    if (!names.insert(h.name).second) throw std::invalid_argument("duplicate head " + h.name);
    if (h.num_classes < 2) throw std::invalid_argument("head " + h.name + " needs >= 2 classes");
    if (h.positive_class < 0 || h.positive_class >= h.num_classes)
      throw std::invalid_argument("head " + h.name + ": positive_class out of range");
    if (h.role == HeadRole::kPrimary) ++primaries;
  }
  if (primaries != 1) throw std::invalid_argument("exactly one head must be primary");
}

std::size_t primary_index(const std::vector<HeadSpec>& heads) {
  for (std::size_t i = 0; i < heads.size(); ++i)
    if (heads[i].role == HeadRole::kPrimary) return i;
  throw std::invalid_argument("no primary head");
}

std::vector<HeadSpec> heads_for(const synth::SynthSpec& spec) {
  std::vector<HeadSpec> heads{{spec.label_rule.head, 2, HeadRole::kPrimary, 1}};
  for (const auto& rule : spec.confounder_heads)
    heads.push_back({rule.head, 2, HeadRole::kConfounder, 1});
  return heads;
}

const HeadOutput& ClassifierOutput::head(const std::string& name) const {
  for (const auto& h : heads)
    if (h.name == name) return h;
  throw std::invalid_argument("unknown head: " + name);
}

double cp(const ClassifierOutput& output, const std::string& head) {
  const auto& h = output.head(head);
  return h.probs.at(static_cast<std::size_t>(h.positive_class));
}

template <typename T>
std::vector<T> softmax(const std::vector<T>& logits) {
  const T mx = *std::max_element(logits.begin(), logits.end());
  std::vector<T> p(logits.size());
  T sum = 0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= sum;
  return p;
}

template <typename T>
T cross_entropy(const std::vector<std::vector<T>>& logits, const std::vector<int>& labels,
                std::vector<std::vector<T>>* dlogits) {
  if (logits.size() != labels.size()) throw std::invalid_argument("label count mismatch");
  T loss = 0;
  if (dlogits) dlogits->resize(logits.size());
  for (std::size_t h = 0; h < logits.size(); ++h) {
    const T mx = *std::max_element(logits[h].begin(), logits[h].end());
    T sum = 0;
    for (T z : logits[h]) sum += std::exp(z - mx);
    const T lse = mx + std::log(sum);
    loss += lse - logits[h].at(static_cast<std::size_t>(labels[h]));
    if (dlogits) {
      auto& d = (*dlogits)[h];
      d.resize(logits[h].size());
      for (std::size_t k = 0; k < d.size(); ++k) d[k] = std::exp(logits[h][k] - lse);
      d[static_cast<std::size_t>(labels[h])] -= T(1);
    }
  }
  return loss;
}

template <typename T>
ClassifierNet<T>::ClassifierNet(const TrunkSpec& arch, const std::vector<HeadSpec>& heads)
    : trunk_("trunk", arch) {
  const int feat = arch.out_channels();
  for (const auto& h : heads) {
    head_w_.emplace_back("head." + h.name + ".w", static_cast<std::size_t>(h.num_classes) * feat);
    head_b_.emplace_back("head." + h.name + ".b", h.num_classes);
    classes_.push_back(h.num_classes);
  }
}

template <typename T>
void ClassifierNet<T>::init(std::mt19937_64& rng) {
  trunk_.init(rng);
  for (auto& w : head_w_) nn::init_normal(w, rng);
  for (auto& b : head_b_) std::fill(b.value.begin(), b.value.end(), T(0));
}

template <typename T>
std::vector<std::vector<T>> ClassifierNet<T>::forward(
    const nn::Tensor<T>& x, Cache* cache, std::vector<nn::Tensor<T>>* stage_features) const {
  nn::Tensor<T> fm = trunk_.forward(x, cache ? &cache->trunk : nullptr, stage_features);
  std::vector<T> pooled(fm.c);
  const T inv = T(1) / static_cast<T>(fm.plane_size());
  for (int c = 0; c < fm.c; ++c) {
    T s = 0;
    const T* p = fm.plane(c);
    for (std::size_t i = 0; i < fm.plane_size(); ++i) s += p[i];
    pooled[c] = s * inv;
  }
  const T scale = T(1) / std::sqrt(static_cast<T>(fm.c));
  std::vector<std::vector<T>> logits(classes_.size());
  for (std::size_t h = 0; h < classes_.size(); ++h) {
    logits[h].resize(classes_[h]);
    nn::linear_forward<T>(pooled, head_w_[h].value, head_b_[h].value, scale, logits[h]);
  }
  if (cache) {
    cache->final_map = std::move(fm);
    cache->pooled = std::move(pooled);
  }
  return logits;
}

template <typename T>
nn::Tensor<T> ClassifierNet<T>::backward(const Cache& cache,
                                         const std::vector<std::vector<T>>& dlogits,
                                         const std::vector<nn::Tensor<T>>* stage_feature_grads,
                                         bool param_grads) {
  const auto& fm = cache.final_map;
  const T scale = T(1) / std::sqrt(static_cast<T>(fm.c));
  std::vector<T> dpooled(fm.c, T(0));
  for (std::size_t h = 0; h < classes_.size(); ++h) {
    if (h >= dlogits.size() || dlogits[h].empty()) continue;
    std::vector<T> dx(fm.c, T(0));
    nn::linear_backward<T>(cache.pooled, head_w_[h].value, scale, dlogits[h],
                           param_grads ? std::span<T>(head_w_[h].grad) : std::span<T>(),
                           param_grads ? std::span<T>(head_b_[h].grad) : std::span<T>(), dx);
    for (int c = 0; c < fm.c; ++c) dpooled[c] += dx[c];
  }
  nn::Tensor<T> dfm(fm.c, fm.h, fm.w);
  const T inv = T(1) / static_cast<T>(fm.plane_size());
  for (int c = 0; c < fm.c; ++c) std::fill_n(dfm.plane(c), fm.plane_size(), dpooled[c] * inv);
  return trunk_.backward(cache.trunk, dfm, stage_feature_grads, param_grads);
}

template <typename T>
nn::ParamList<T> ClassifierNet<T>::params() {
  nn::ParamList<T> out = trunk_.params();
  for (std::size_t h = 0; h < head_w_.size(); ++h) {
    out.push_back(&head_w_[h]);
    out.push_back(&head_b_[h]);
  }
  return out;
}

template class ClassifierNet<float>;
template class ClassifierNet<double>;
template std::vector<float> softmax(const std::vector<float>&);
template std::vector<double> softmax(const std::vector<double>&);
template float cross_entropy(const std::vector<std::vector<float>>&, const std::vector<int>&,
                             std::vector<std::vector<float>>*);
template double cross_entropy(const std::vector<std::vector<double>>&, const std::vector<int>&,
                              std::vector<std::vector<double>>*);

// --- config ---------------------------------------------------------------------

void ClassifierTrainConfig::validate() const {
  arch.validate();
  if (optimizer != "adam" && optimizer != "sgd_momentum")
    throw std::invalid_argument("classifier.optimizer must be adam or sgd_momentum");
  if (!(lr > 0)) throw std::invalid_argument("classifier.lr must be positive");
  if (steps <= 0) throw std::invalid_argument("classifier.steps must be positive");
  if (batch_size < 2) throw std::invalid_argument("classifier.batch_size must be >= 2");
  if (eval_every <= 0) throw std::invalid_argument("classifier.eval_every must be positive");
  if (patience <= 0) throw std::invalid_argument("classifier.patience must be positive");
}

void to_json(nlohmann::json& j, const ClassifierTrainConfig& c) {
  j = {{"arch", c.arch},         {"optimizer", c.optimizer},   {"lr", c.lr},
       {"momentum", c.momentum}, {"steps", c.steps},           {"batch_size", c.batch_size},
       {"eval_every", c.eval_every}, {"patience", c.patience}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ClassifierTrainConfig& c) {
  if (j.contains("arch")) c.arch = j.at("arch").get<TrunkSpec>();
  c.optimizer = j.value("optimizer", c.optimizer);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.patience = j.value("patience", c.patience);
  c.seed = j.value("seed", c.seed);
}

// --- AUC ----------------------------------------------------------------------

double auc_score(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("scores/labels size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks, so tied pairs contribute one half.
  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j + 1);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) {
        rank_sum_pos += midrank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("AUC undefined: single-class data");
  const double u = rank_sum_pos - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * n_neg);
}

AucResult auc_with_ci(const std::vector<double>& scores, const std::vector<int>& labels,
                      int n_bootstrap, std::uint64_t seed) {
  AucResult r;
  r.auc = auc_score(scores, labels);
  r.ci_low = r.ci_high = r.auc;
  if (n_bootstrap <= 0) return r;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, scores.size() - 1);
  std::vector<double> samples;
  samples.reserve(n_bootstrap);
  std::vector<double> s(scores.size());
  std::vector<int> l(scores.size());
  for (int b = 0; b < n_bootstrap; ++b) {
    int pos = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const std::size_t k = pick(rng);
      s[i] = scores[k];
      l[i] = labels[k];
      pos += l[i];
    }
    if (pos == 0 || pos == static_cast<int>(s.size())) continue;  // resample lost a class
    samples.push_back(auc_score(s, l));
  }
  if (samples.empty()) return r;
  std::sort(samples.begin(), samples.end());
  auto quantile = [&](double q) {
    const double idx = q * static_cast<double>(samples.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(idx));
    const std::size_t hi = std::min(lo + 1, samples.size() - 1);
    return samples[lo] + (idx - lo) * (samples[hi] - samples[lo]);
  };
  r.ci_low = quantile(0.025);
  r.ci_high = quantile(0.975);
  return r;
}

namespace {

const HeadSpec& find_head(const std::vector<HeadSpec>& heads, const std::string& name) {
  for (const auto& h : heads)
    if (h.name == name) return h;
  throw std::invalid_argument("unknown head: " + name);
}

std::vector<int> label_vector(const synth::LabeledImage& item, const std::vector<HeadSpec>& heads) {
  std::vector<int> out;
  for (const auto& h : heads) out.push_back(item.labels.at(h.name));
  return out;
}

void check_labels(const std::vector<synth::LabeledImage>& data, const std::vector<HeadSpec>& heads,
                  const std::string& which) {
  std::vector<std::string> problems;
  for (std::size_t i = 0; i < data.size(); ++i)
    for (const auto& h : heads) {
      auto it = data[i].labels.find(h.name);
      if (it == data[i].labels.end())
        problems.push_back(which + "[" + std::to_string(i) + "] lacks a label for head " + h.name);
      else if (it->second < 0 || it->second >= h.num_classes)
        problems.push_back(which + "[" + std::to_string(i) + "] has out-of-range label for " +
                           h.name);
    }
  if (!problems.empty()) {
    std::string msg = "invalid labels:";
    for (std::size_t i = 0; i < std::min<std::size_t>(problems.size(), 10); ++i)
      msg += "\n  " + problems[i];
    if (problems.size() > 10) msg += "\n  ... " + std::to_string(problems.size() - 10) + " more";
    throw std::invalid_argument(msg);
  }
}

std::vector<double> primary_scores(const ClassifierModel& model,
                                   const std::vector<synth::LabeledImage>& data,
                                   const HeadSpec& head, std::vector<int>* labels) {
  std::vector<double> scores;
  scores.reserve(data.size());
  if (labels) labels->clear();
  for (const auto& item : data) {
    scores.push_back(cp(predict(model, item.pixels), head.name));
    if (labels) labels->push_back(item.labels.at(head.name) == head.positive_class ? 1 : 0);
  }
  return scores;
}

}  // namespace

AucResult evaluate_auc(const ClassifierModel& model, const std::vector<synth::LabeledImage>& data,
                       const std::string& head, int n_bootstrap, std::uint64_t seed) {
  const auto& spec = find_head(model.heads, head);
  std::vector<int> labels;
  const auto scores = primary_scores(model, data, spec, &labels);
  return auc_with_ci(scores, labels, n_bootstrap, seed);
}

GateResult gate(double auc, double threshold) {
  return auc >= threshold ? GateResult::kPass : GateResult::kFail;
}

// --- inference --------------------------------------------------------------------

ClassifierOutput to_output(const std::vector<HeadSpec>& heads,
                           const std::vector<std::vector<float>>& logits) {
  ClassifierOutput out;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    std::vector<double> z(logits[h].begin(), logits[h].end());
    out.heads.push_back({heads[h].name, heads[h].positive_class, softmax(z)});
  }
  return out;
}

ClassifierOutput predict(const ClassifierModel& model, const synth::Image& pixels) {
  return to_output(model.heads, model.net.forward(pixels, nullptr));
}

std::string classifier_hash(const ClassifierModel& model) {
  auto& net = const_cast<ClassifierNet<float>&>(model.net);
  Sha256 h;
  h.update(nlohmann::json(model.heads).dump());
  h.update(nlohmann::json(model.net.arch()).dump());
  h.update(params_hash(net.params()));
  return h.hex_digest();
}

// --- training ------------------------------------------------------------------------

std::pair<ClassifierModel, TrainHistory> train_classifier(
    const std::vector<synth::LabeledImage>& train, const std::vector<synth::LabeledImage>& tune,
    const std::vector<HeadSpec>& heads, const ClassifierTrainConfig& config) {
  validate_heads(heads);
  config.validate();
  if (train.empty()) throw std::invalid_argument("empty training set");
  check_labels(train, heads, "train");
  check_labels(tune, heads, "tune");
  for (const auto& item : train)
    if (item.pixels.h != config.arch.resolution || item.pixels.w != config.arch.resolution)
      throw nn::ShapeError("training image resolution does not match classifier");

  ClassifierModel model{heads, ClassifierNet<float>(config.arch, heads),
                        sha256_hex(nlohmann::json(config).dump())};
  std::mt19937_64 rng(config.seed);
  model.net.init(rng);
  auto params = model.net.params();

  optim::Adam adam;
  optim::SgdMomentum sgd;
  if (config.optimizer == "adam")
    adam = optim::Adam(params, config.lr);
  else
    sgd = optim::SgdMomentum(params, config.lr, config.momentum);

  std::vector<std::vector<int>> labels;
  for (const auto& item : train) labels.push_back(label_vector(item, heads));

  const HeadSpec& primary = heads[primary_index(heads)];
  TrainHistory history;
  history.best_auc = -1.0;
  std::vector<std::vector<float>> best_values;
  auto snapshot = [&] {
    best_values.clear();
    for (auto* p : params) best_values.push_back(p->value);
  };

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  int since_best = 0;
  ClassifierNet<float>::Cache cache;
  std::vector<std::vector<float>> dlogits;

  for (int step = 1; step <= config.steps; ++step) {
    nn::zero_grads(params);
    double batch_loss = 0.0;
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      const auto logits = model.net.forward(train[idx].pixels, &cache);
      batch_loss += cross_entropy(logits, labels[idx], &dlogits);
      model.net.backward(cache, dlogits, nullptr, true);
    }
    const float inv = 1.0f / static_cast<float>(config.batch_size);
    if (config.optimizer == "adam")
      adam.step(inv);
    else
      sgd.step(inv);
    batch_loss *= inv;
    if (!std::isfinite(batch_loss))
      throw std::runtime_error("classifier loss became non-finite at step " + std::to_string(step));
    history.loss.push_back(batch_loss);
    history.steps_run = step;

    const bool last = step == config.steps;
    if (!tune.empty() && (step % config.eval_every == 0 || last)) {
      std::vector<int> tl;
      const auto scores = primary_scores(model, tune, primary, &tl);
      double auc = 0.5;
      try {
        auc = auc_score(scores, tl);
      } catch (const std::invalid_argument&) {
      }
      history.tune_auc.emplace_back(step, auc);
      spdlog::info("classifier step {} loss {:.4f} tune AUC {:.4f}", step, batch_loss, auc);
      if (auc > history.best_auc) {
        history.best_auc = auc;
        history.best_step = step;
        snapshot();
        since_best = 0;
      } else if (++since_best >= config.patience) {
        spdlog::info("classifier early stop at step {} (best {:.4f} at {})", step,
                     history.best_auc, history.best_step);
        break;
      }
    }
  }
  if (!best_values.empty())
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
  else
    history.best_step = history.steps_run;
  return {std::move(model), std::move(history)};
}

// --- persistence ------------------------------------------------------------------------

std::string save_classifier(const ClassifierModel& model, const std::filesystem::path& path) {
  auto& net = const_cast<ClassifierNet<float>&>(model.net);
  const std::string blob_hash = ckpt::write_blob(path, "classifier", net.params());
  nlohmann::json side = {{"format_version", ckpt::kFormatVersion},
                         {"kind", "classifier"},
                         {"arch", model.net.arch()},
                         {"heads", model.heads},
                         {"resolution", model.resolution()},
                         {"train_config_hash", model.config_hash},
                         {"blob_sha256", blob_hash}};
  auto side_path = path;
  side_path += ".json";
  ckpt::write_text(side_path, side.dump(2) + "\n");
  return blob_hash;
}

ClassifierModel load_classifier(const std::filesystem::path& path) {
  auto side_path = path;
  side_path += ".json";
  std::ifstream in(side_path);
  if (!in) throw std::runtime_error("missing checkpoint sidecar " + side_path.string());
  const auto side = nlohmann::json::parse(in);
  if (side.value("format_version", 0u) != ckpt::kFormatVersion)
    throw ckpt::VersionError("classifier sidecar has unsupported format version");
  const auto arch = side.at("arch").get<TrunkSpec>();
  const auto heads = side.at("heads").get<std::vector<HeadSpec>>();
  validate_heads(heads);
  ClassifierModel model{heads, ClassifierNet<float>(arch, heads),
                        side.value("train_config_hash", std::string())};
  const auto blob = ckpt::read_blob(path, "classifier");
  ckpt::load_params(blob, model.net.params());
  return model;
}

}  // namespace stylexlab::clf
