#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "stylexlab/checkpoint.hpp"
#include "stylexlab/classifier.hpp"

using namespace stylexlab;
using namespace stylexlab::clf;

namespace {

ClassifierOutput make_output(std::vector<std::pair<std::string, std::vector<double>>> heads,
                             int positive = 1) {
  ClassifierOutput out;
  for (auto& [name, probs] : heads) out.heads.push_back({name, positive, probs});
  return out;
}

// Pairwise concordance count, the definition the rank formula must agree with.
double brute_force_auc(const std::vector<double>& s, const std::vector<int>& l) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (l[i] != 1 || l[j] != 0) continue;
      den += 1;
      if (s[i] > s[j]) num += 1;
      if (s[i] == s[j]) num += 0.5;
    }
  return num / den;
}

synth::SynthSpec small_spec() {
  synth::SynthSpec spec;
  spec.resolution = 32;
  spec.ranges[synth::Factor::kSpotCount] = {0, 6};
  spec.confounder_heads = {{"ring_bright", synth::Factor::kRingIntensity, 0.5}};
  return spec;
}

ClassifierTrainConfig small_config() {
  ClassifierTrainConfig cfg;
  cfg.arch.resolution = 32;
  cfg.arch.widths = {8, 16, 16};
  cfg.steps = 1;
  cfg.batch_size = 4;
  cfg.eval_every = 1;
  return cfg;
}

}  // namespace

TEST_CASE("cp projects the positive class") {
  CHECK(cp(make_output({{"a", {0.3, 0.7}}}), "a") == 0.7);
  CHECK(cp(make_output({{"a", {1.0, 0.0}}}), "a") == 0.0);
  CHECK(cp(make_output({{"race", {0.1, 0.2, 0.3, 0.4}}}, 0), "race") == 0.1);
  CHECK_THROWS_AS(cp(make_output({{"a", {0.5, 0.5}}}), "b"), std::invalid_argument);
}

TEST_CASE("cp ignores other heads") {
  auto a = make_output({{"p", {0.2, 0.8}}, {"q", {0.6, 0.4}}, {"r", {0.1, 0.9}}});
  auto b = make_output({{"r", {0.9, 0.1}}, {"p", {0.2, 0.8}}, {"q", {0.4, 0.6}}});
  CHECK(cp(a, "p") == cp(b, "p"));
}

TEST_CASE("auc closed cases") {
  CHECK(auc_score({0, 1, 0, 1, 1}, {0, 1, 0, 1, 1}) == 1.0);
  CHECK(auc_score({0.3, 0.3, 0.3, 0.3}, {0, 1, 0, 1}) == 0.5);
  CHECK(auc_score({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == doctest::Approx(0.75));
  CHECK_THROWS_WITH_AS(auc_score({0.1, 0.2}, {1, 1}), doctest::Contains("AUC undefined"),
                       std::invalid_argument);
}

TEST_CASE("auc equals brute-force concordance on random sets with ties") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 199);
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (int i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % 20) / 20.0;  // coarse grid forces ties
      l[i] = static_cast<int>(rng() % 2);
    }
    l[0] = 0;
    l[1] = 1;
    CHECK(auc_score(s, l) == doctest::Approx(brute_force_auc(s, l)).epsilon(1e-12));
  }
}

TEST_CASE("bootstrap interval brackets the point estimate") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> s;
  std::vector<int> l;
  for (int i = 0; i < 300; ++i) {
    l.push_back(i % 2);
    s.push_back(n(rng) + l.back());
  }
  const auto r = auc_with_ci(s, l, 1000, 9);
  CHECK(r.ci_low <= r.auc);
  CHECK(r.auc <= r.ci_high);
  CHECK(r.ci_high - r.ci_low < 0.2);
  const auto again = auc_with_ci(s, l, 1000, 9);
  CHECK(again.ci_low == r.ci_low);
}

TEST_CASE("gate threshold is inclusive") {
  CHECK(gate(0.873) == GateResult::kPass);
  CHECK(gate(0.79) == GateResult::kFail);
  CHECK(gate(0.8) == GateResult::kPass);
}

TEST_CASE("head validation") {
  CHECK_THROWS(validate_heads({{"a", 2, HeadRole::kConfounder, 1}}));
  CHECK_THROWS(validate_heads({{"a", 2, HeadRole::kPrimary, 2}}));
  CHECK_THROWS(validate_heads({{"a", 2, HeadRole::kPrimary, 1}, {"a", 2, HeadRole::kConfounder, 1}}));
  CHECK_NOTHROW(validate_heads({{"a", 2, HeadRole::kPrimary, 1}, {"b", 4, HeadRole::kConfounder, 0}}));
}

TEST_CASE("cross-entropy gradient on a tiny two-layer net") {
  TrunkSpec arch;
  arch.resolution = 8;
  arch.widths = {4, 6};
  const std::vector<HeadSpec> heads{{"p", 2, HeadRole::kPrimary, 1}, {"m", 3, HeadRole::kConfounder, 0}};
  ClassifierNet<double> net(arch, heads);
  std::mt19937_64 rng(17);
  net.init(rng);
  nn::Tensor<double> x(3, 8, 8);
  std::normal_distribution<double> n(0, 1);
  for (auto& v : x.data) v = n(rng);
  const std::vector<int> labels{1, 2};

  auto params = net.params();
  nn::zero_grads(params);
  ClassifierNet<double>::Cache cache;
  std::vector<std::vector<double>> dlogits;
  cross_entropy(net.forward(x, &cache), labels, &dlogits);
  const auto dx = net.backward(cache, dlogits, nullptr, true);

  auto loss = [&] { return cross_entropy<double>(net.forward(x, nullptr), labels, nullptr); };
  auto check = [&](double& v, double analytic) {
    const double h = 1e-6, saved = v;
    v = saved + h;
    const double lp = loss();
    v = saved - h;
    const double lm = loss();
    v = saved;
    const double numeric = (lp - lm) / (2 * h);
    const double rel = std::abs(numeric - analytic) / std::max(1e-6, std::abs(numeric) + std::abs(analytic));
    CHECK(rel < 1e-3);
  };
  std::uniform_int_distribution<int> pick_param(0, static_cast<int>(params.size()) - 1);
  for (int probe = 0; probe < 100; ++probe) {
    auto* p = params[pick_param(rng)];
    const std::size_t i = rng() % p->size();
    check(p->value[i], p->grad[i]);
  }
  auto x_copy = x;
  for (int probe = 0; probe < 20; ++probe) {
    const std::size_t i = rng() % x.size();
    double& v = x.data[i];
    check(v, dx.data[i]);
  }
  CHECK(x_copy.data == x.data);
}

TEST_CASE("predict contract") {
  const auto spec = small_spec();
  const auto heads = heads_for(spec);
  const auto data = synth::sample_dataset(spec, 8, 2);
  auto cfg = small_config();
  auto [model, history] = train_classifier(data, {}, heads, cfg);

  for (const auto& item : data) {
    const auto out = predict(model, item.pixels);
    REQUIRE(out.heads.size() == heads.size());
    for (const auto& h : out.heads) {
      double sum = 0;
      for (double p : h.probs) {
        CHECK(p >= 0.0);
        sum += p;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    }
  }
  const auto a = predict(model, data[0].pixels);
  const auto b = predict(model, data[0].pixels);
  CHECK(a.heads[0].probs == b.heads[0].probs);

  auto nudged = data[0].pixels;
  nudged.data[100] += 1e-7f;
  CHECK(std::abs(cp(predict(model, nudged), "vessel_wide") - cp(a, "vessel_wide")) < 1e-3);

  synth::Image wrong(3, 64, 64);
  CHECK_THROWS_AS(predict(model, wrong), nn::ShapeError);
}

TEST_CASE("training contract") {
  const auto spec = small_spec();
  const auto heads = heads_for(spec);
  auto data = synth::sample_dataset(spec, 16, 3);
  auto cfg = small_config();

  SUBCASE("one step changes parameters") {
    ClassifierNet<float> fresh(cfg.arch, heads);
    std::mt19937_64 rng(cfg.seed);
    fresh.init(rng);
    auto [model, history] = train_classifier(data, {}, heads, cfg);
    double norm = 0;
    auto before = fresh.params();
    auto after = model.net.params();
    for (std::size_t i = 0; i < before.size(); ++i)
      for (std::size_t j = 0; j < before[i]->size(); ++j) {
        const double d = after[i]->value[j] - before[i]->value[j];
        norm += d * d;
      }
    CHECK(norm > 0);
    CHECK(history.loss.size() == 1);
    CHECK(std::isfinite(history.loss[0]));
  }
  SUBCASE("missing head label is rejected before training") {
    data[5].labels.erase("ring_bright");
    CHECK_THROWS_WITH_AS(train_classifier(data, {}, heads, cfg), doctest::Contains("train[5]"),
                         std::invalid_argument);
  }
}

TEST_CASE("permuted labels give a chance-level tune AUC") {
  const auto spec = small_spec();
  const auto heads = heads_for(spec);
  auto data = synth::sample_dataset(spec, 1756, 11);
  // Permute labels across the whole dataset, then split off the tune set.
  std::mt19937_64 rng(5);
  std::vector<std::map<std::string, int>> labels;
  for (const auto& t : data) labels.push_back(t.labels);
  std::shuffle(labels.begin(), labels.end(), rng);
  for (std::size_t i = 0; i < data.size(); ++i) data[i].labels = labels[i];
  const std::vector<synth::LabeledImage> train(data.begin(), data.begin() + 256);
  const std::vector<synth::LabeledImage> tune(data.begin() + 256, data.end());

  auto cfg = small_config();
  cfg.steps = 150;
  cfg.batch_size = 16;
  cfg.eval_every = 1000;
  auto [model, history] = train_classifier(train, {}, heads, cfg);
  const auto auc = evaluate_auc(model, tune, "vessel_wide", 0);
  CHECK(auc.auc >= 0.45);
  CHECK(auc.auc <= 0.55);
}

TEST_CASE("checkpoint round trip") {
  const auto spec = small_spec();
  const auto heads = heads_for(spec);
  const auto data = synth::sample_dataset(spec, 8, 4);
  auto [model, history] = train_classifier(data, {}, heads, small_config());
  const auto dir = std::filesystem::temp_directory_path() / "stylexlab_clf_ckpt";
  std::filesystem::remove_all(dir);
  const auto path = dir / "classifier.bin";
  save_classifier(model, path);

  const auto loaded = load_classifier(path);
  CHECK(classifier_hash(loaded) == classifier_hash(model));
  CHECK(predict(loaded, data[1].pixels).heads[1].probs == predict(model, data[1].pixels).heads[1].probs);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(load_classifier(path), ckpt::CorruptError);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const char v[4] = {9, 0, 0, 0};
    f.write(v, 4);
  }
  CHECK_THROWS_AS(load_classifier(path), ckpt::VersionError);
}
