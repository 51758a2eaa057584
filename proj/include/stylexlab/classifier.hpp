#pragma once
// Multi-head convolutional classifier: a shared conv trunk, global average
// pooling, and one linear softmax head per task.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "stylexlab/nn.hpp"
#include "stylexlab/synthdata.hpp"
#include "stylexlab/trunk.hpp"

namespace stylexlab::clf {

enum class HeadRole { kPrimary, kConfounder };

struct HeadSpec {
  std::string name;
  int num_classes = 2;
  HeadRole role = HeadRole::kConfounder;
  int positive_class = 1;
};

void to_json(nlohmann::json& j, const HeadSpec& h);
void from_json(const nlohmann::json& j, HeadSpec& h);

// Exactly one primary head, unique names, positive_class < num_classes.
void validate_heads(const std::vector<HeadSpec>& heads);
std::size_t primary_index(const std::vector<HeadSpec>& heads);

// Binary heads for every rule of a synthetic spec, primary first.
std::vector<HeadSpec> heads_for(const synth::SynthSpec& spec);

struct HeadOutput {
  std::string name;
  int positive_class = 1;
  std::vector<double> probs;
};

struct ClassifierOutput {
  std::vector<HeadOutput> heads;

  const HeadOutput& head(const std::string& name) const;
};

// Probability of the head's positive class (one-vs-rest for multiclass heads).
double cp(const ClassifierOutput& output, const std::string& head);

template <typename T>
std::vector<T> softmax(const std::vector<T>& logits);

// Sum over heads of the cross-entropy of softmax(logits) against labels.
// Writes d loss / d logits when dlogits is set.
template <typename T>
T cross_entropy(const std::vector<std::vector<T>>& logits, const std::vector<int>& labels,
                std::vector<std::vector<T>>* dlogits);

template <typename T>
class ClassifierNet {
 public:
  struct Cache {
    typename ConvTrunk<T>::Cache trunk;
    nn::Tensor<T> final_map;
    std::vector<T> pooled;
  };

  ClassifierNet() = default;
  ClassifierNet(const TrunkSpec& arch, const std::vector<HeadSpec>& heads);

  void init(std::mt19937_64& rng);

  // Returns per-head logits.
  std::vector<std::vector<T>> forward(const nn::Tensor<T>& x, Cache* cache,
                                      std::vector<nn::Tensor<T>>* stage_features = nullptr) const;
  // Accumulates parameter grads when param_grads is set; returns d loss / d x.
  nn::Tensor<T> backward(const Cache& cache, const std::vector<std::vector<T>>& dlogits,
                         const std::vector<nn::Tensor<T>>* stage_feature_grads, bool param_grads);

  nn::ParamList<T> params();
  const TrunkSpec& arch() const { return trunk_.spec(); }

 private:
  ConvTrunk<T> trunk_;
  std::vector<nn::Param<T>> head_w_;
  std::vector<nn::Param<T>> head_b_;
  std::vector<int> classes_;
};

struct ClassifierTrainConfig {
  TrunkSpec arch;
  std::string optimizer = "adam";  // adam | sgd_momentum
  double lr = 0.001;
  double momentum = 0.9;
  int steps = 3000;
  int batch_size = 32;
  int eval_every = 100;
  int patience = 8;  // evaluations without tune-AUC improvement
  std::uint64_t seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const ClassifierTrainConfig& c);
void from_json(const nlohmann::json& j, ClassifierTrainConfig& c);

struct ClassifierModel {
  std::vector<HeadSpec> heads;
  ClassifierNet<float> net;
  std::string config_hash;

  int resolution() const { return net.arch().resolution; }
  std::size_t primary() const { return primary_index(heads); }
  const std::string& primary_name() const { return heads[primary()].name; }
};

struct TrainHistory {
  std::vector<double> loss;                        // per step, batch mean
  std::vector<std::pair<int, double>> tune_auc;    // (step, primary-head AUC)
  int best_step = 0;
  double best_auc = 0.0;
  int steps_run = 0;
};

std::pair<ClassifierModel, TrainHistory> train_classifier(
    const std::vector<synth::LabeledImage>& train, const std::vector<synth::LabeledImage>& tune,
    const std::vector<HeadSpec>& heads, const ClassifierTrainConfig& config);

ClassifierOutput predict(const ClassifierModel& model, const synth::Image& pixels);
ClassifierOutput to_output(const std::vector<HeadSpec>& heads,
                           const std::vector<std::vector<float>>& logits);

struct AucResult {
  double auc = 0.5;
  double ci_low = 0.0;
  double ci_high = 1.0;
};

// Mann-Whitney AUC of scores against binary labels; ties count one half.
double auc_score(const std::vector<double>& scores, const std::vector<int>& labels);
AucResult auc_with_ci(const std::vector<double>& scores, const std::vector<int>& labels,
                      int n_bootstrap, std::uint64_t seed);

AucResult evaluate_auc(const ClassifierModel& model, const std::vector<synth::LabeledImage>& data,
                       const std::string& head, int n_bootstrap = 1000, std::uint64_t seed = 0);

enum class GateResult { kPass, kFail };
inline constexpr double kGateThreshold = 0.8;
GateResult gate(double auc, double threshold = kGateThreshold);

// Writes `path` (binary blob) and `path`.json (sidecar). Returns the blob hash.
std::string save_classifier(const ClassifierModel& model, const std::filesystem::path& path);
ClassifierModel load_classifier(const std::filesystem::path& path);

std::string classifier_hash(const ClassifierModel& model);

}  // namespace stylexlab::clf
