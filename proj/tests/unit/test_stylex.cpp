#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>

#include "doctest.h"
#include "stylexlab/checkpoint.hpp"
#include "stylexlab/hash.hpp"
#include "stylexlab/stylex.hpp"

using namespace stylexlab;
using namespace stylexlab::sx;

namespace {

GeneratorSpec micro_gen() {
  GeneratorSpec g;
  g.resolution = 8;
  g.d_w = 5;
  g.cond_dim = 3;
  g.channels = {4, 3};
  return g;
}

TrunkSpec micro_trunk() { return TrunkSpec{8, 3, {4, 6}, 1}; }

template <typename T>
nn::Tensor<T> random_image(std::mt19937_64& rng, int res, double scale = 0.5) {
  nn::Tensor<T> x(3, res, res);
  std::normal_distribution<double> n(0, scale);
  for (auto& v : x.data) v = static_cast<T>(std::tanh(n(rng)));
  return x;
}

std::vector<double> random_vec(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> d(0, 1);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-6, std::abs(a) + std::abs(b)); }

// Central difference of `loss` along one scalar.
double numeric(double& v, const std::function<double()>& loss, double h = 1e-6) {
  const double saved = v;
  v = saved + h;
  const double lp = loss();
  v = saved - h;
  const double lm = loss();
  v = saved;
  return (lp - lm) / (2 * h);
}

synth::SynthSpec small_spec() {
  synth::SynthSpec spec;
  spec.resolution = 32;
  spec.ranges[synth::Factor::kSpotCount] = {0, 6};
  spec.confounder_heads = {{"ring_bright", synth::Factor::kRingIntensity, 0.5}};
  return spec;
}

clf::ClassifierModel small_classifier(const std::vector<synth::LabeledImage>& data) {
  clf::ClassifierTrainConfig cfg;
  cfg.arch = TrunkSpec{32, 3, {8, 16, 16}, 1};
  cfg.steps = 20;
  cfg.batch_size = 8;
  cfg.eval_every = 1000;
  return train_classifier(data, {}, clf::heads_for(small_spec()), cfg).first;
}

StylexTrainConfig small_stylex_config() {
  StylexTrainConfig cfg;
  cfg.resolution = 32;
  cfg.generator.d_w = 16;
  cfg.generator.channels = {16, 16, 12, 8};
  cfg.encoder = TrunkSpec{32, 3, {8, 16, 16}, 1};
  cfg.discriminator = TrunkSpec{32, 3, {8, 16, 16}, 1};
  cfg.batch_size = 4;
  cfg.steps = 100;
  cfg.r1_interval = 4;
  cfg.log_every = 1000;
  cfg.checkpoint_every = 0;
  return cfg;
}

}  // namespace

TEST_CASE("default layout sizes") {
  GeneratorSpec g;
  const auto layout = g.layout();
  CHECK(layout.num_layers() == 14);
  CHECK(layout.size() == 576);
  // coordinates left after dropping the two 4x4 layers
  CHECK(layout.size() - layout.offset(2) == 448);
}

TEST_CASE("layout flat index is a bijection") {
  const auto layout = GeneratorSpec{}.layout();
  for (std::size_t f = 0; f < layout.size(); ++f) {
    const auto [l, c] = layout.locate(f);
    REQUIRE(layout.flat(l, c) == f);
  }
  for (int l = 0; l < layout.num_layers(); ++l)
    for (int c = 0; c < layout.layer(l).dim; ++c) REQUIRE(layout.locate(layout.flat(l, c)) == std::pair{l, c});
  CHECK_THROWS_AS(layout.locate(layout.size()), std::out_of_range);
  CHECK_THROWS_AS(layout.flat(0, layout.layer(0).dim), std::out_of_range);

  const nlohmann::json j = layout;
  CHECK(j.get<StyleSpaceLayout>() == layout);
}

TEST_CASE("generator spec validation") {
  GeneratorSpec g;
  g.channels = {64, 64, 32};
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
  g = GeneratorSpec{};
  g.resolution = 48;
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
}

TEST_CASE("style map is affine in [w; c]") {
  Generator<double> gen(micro_gen());
  std::mt19937_64 rng(1);
  gen.init(rng);
  const auto w = random_vec(rng, 5), c = random_vec(rng, 3);

  // Direct oracle from the raw parameters.
  auto mp = gen.mapping_params();
  std::vector<double> wc = w;
  wc.insert(wc.end(), c.begin(), c.end());
  std::vector<double> expect;
  for (std::size_t l = 0; l < mp.size(); l += 2) {
    const auto& A = mp[l]->value;
    const auto& b = mp[l + 1]->value;
    for (std::size_t r = 0; r < b.size(); ++r) {
      double acc = 0;
      for (std::size_t k = 0; k < wc.size(); ++k) acc += A[r * wc.size() + k] * wc[k];
      expect.push_back(acc / std::sqrt(8.0) + b[r]);
    }
  }
  const auto s = gen.style_map(w, c);
  REQUIRE(s.size() == expect.size());
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(s[i] == doctest::Approx(expect[i]).epsilon(1e-12));

  // zero input gives the biases, which start at one
  const auto s0 = gen.style_map(std::vector<double>(5, 0.0), std::vector<double>(3, 0.0));
  for (double v : s0) CHECK(v == 1.0);

  // s(2 wc) - b == 2 (s(wc) - b)
  std::vector<double> w2 = w, c2 = c;
  for (auto& v : w2) v *= 2;
  for (auto& v : c2) v *= 2;
  const auto s2 = gen.style_map(w2, c2);
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(s2[i] - s0[i] == doctest::Approx(2 * (s[i] - s0[i])).epsilon(1e-5));

  CHECK_THROWS_AS(gen.style_map(std::vector<double>(4), c), std::invalid_argument);
}

TEST_CASE("synthesis is deterministic, bounded, and resumable from any layer") {
  Generator<float> gen(micro_gen());
  std::mt19937_64 rng(2);
  gen.init(rng);
  std::vector<float> s(gen.layout().size());
  std::normal_distribution<float> n(1.0f, 2.0f);
  for (auto& v : s) v = n(rng);

  std::vector<Generator<float>::State> states;
  const auto a = gen.synthesize(s, nullptr, &states);
  const auto b = gen.synthesize(s);
  CHECK(a.data == b.data);
  CHECK(a.c == 3);
  CHECK(a.h == 8);
  for (float v : a.data) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
  REQUIRE(static_cast<int>(states.size()) == gen.layout().num_layers());
  for (int l = 0; l < gen.layout().num_layers(); ++l) {
    CHECK(gen.synthesize_from(l, states[l], s).data == a.data);
    // Editing layer l leaves the captured prefix valid.
    auto edited = s;
    edited[gen.layout().offset(l)] += 3.0f;
    CHECK(gen.synthesize_from(l, states[l], edited).data == gen.synthesize(edited).data);
  }
  CHECK_THROWS_AS(gen.synthesize(std::vector<float>(s.size() + 1)), std::invalid_argument);
}

TEST_CASE("generator gradients match finite differences") {
  GeneratorSpec spec = micro_gen();
  Generator<double> gen(spec);
  std::mt19937_64 rng(3);
  gen.init(rng);
  // non-zero noise strengths and biases so their grads are exercised
  for (auto* p : gen.synthesis_params())
    if (p->name.find("noise") != std::string::npos || p->name.ends_with(".b"))
      for (auto& v : p->value) v = 0.3 * random_vec(rng, 1)[0];
  const auto w = random_vec(rng, 5), c = random_vec(rng, 3);
  const auto target = random_image<double>(rng, 8);

  auto loss_of = [&](const nn::Tensor<double>& y) {
    double acc = 0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += 0.5 * (y.data[i] - target.data[i]) * (y.data[i] - target.data[i]) * (1 + 0.01 * i);
    return acc;
  };
  auto loss = [&] { return loss_of(gen.synthesize(gen.style_map(w, c))); };

  auto params = gen.params();
  nn::zero_grads(params);
  const auto s = gen.style_map(w, c);
  Generator<double>::Cache cache;
  const auto y = gen.synthesize(s, &cache);
  nn::Tensor<double> dy(y.c, y.h, y.w);
  for (std::size_t i = 0; i < y.size(); ++i) dy.data[i] = (y.data[i] - target.data[i]) * (1 + 0.01 * i);
  const auto ds = gen.synthesize_backward(cache, s, dy, true);
  const auto dwc = gen.style_map_backward(w, c, ds, true);

  std::uniform_int_distribution<int> pick(0, static_cast<int>(params.size()) - 1);
  for (int probe = 0; probe < 100; ++probe) {
    auto* p = params[pick(rng)];
    const std::size_t i = rng() % p->size();
    INFO(p->name << "[" << i << "]");
    CHECK(rel_err(numeric(p->value[i], loss), p->grad[i]) < 1e-3);
  }
  auto wm = w;
  auto loss_w = [&] { return loss_of(gen.synthesize(gen.style_map(wm, c))); };
  for (std::size_t i = 0; i < wm.size(); ++i) CHECK(rel_err(numeric(wm[i], loss_w), dwc[i]) < 1e-3);
  auto sm = s;
  auto loss_s = [&] { return loss_of(gen.synthesize(sm)); };
  for (std::size_t i = 0; i < sm.size(); i += 3) CHECK(rel_err(numeric(sm[i], loss_s), ds[i]) < 1e-3);
}

TEST_CASE("encoder and discriminator gradients match finite differences") {
  std::mt19937_64 rng(4);
  Encoder<double> enc(micro_trunk(), 5);
  Discriminator<double> disc(micro_trunk());
  enc.init(rng);
  disc.init(rng);
  auto x = random_image<double>(rng, 8);
  const auto coef = random_vec(rng, 5);

  auto enc_loss = [&] {
    const auto w = enc.forward(x, nullptr);
    double acc = 0;
    for (std::size_t i = 0; i < w.size(); ++i) acc += coef[i] * w[i] + 0.5 * w[i] * w[i];
    return acc;
  };
  auto ep = enc.params();
  nn::zero_grads(ep);
  Encoder<double>::Cache ec;
  const auto w = enc.forward(x, &ec);
  std::vector<double> dw(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) dw[i] = coef[i] + w[i];
  enc.backward(ec, dw, true);
  for (int probe = 0; probe < 50; ++probe) {
    auto* p = ep[rng() % ep.size()];
    const std::size_t i = rng() % p->size();
    CHECK(rel_err(numeric(p->value[i], enc_loss), p->grad[i]) < 1e-3);
  }

  auto disc_loss = [&] { return softplus(-disc.forward(x, nullptr)); };
  auto dp = disc.params();
  nn::zero_grads(dp);
  Discriminator<double>::Cache dc;
  const double logit = disc.forward(x, &dc);
  const auto dx = disc.backward(dc, -sigmoid(-logit), true);
  for (int probe = 0; probe < 50; ++probe) {
    auto* p = dp[rng() % dp.size()];
    const std::size_t i = rng() % p->size();
    CHECK(rel_err(numeric(p->value[i], disc_loss), p->grad[i]) < 1e-3);
  }
  for (int probe = 0; probe < 20; ++probe) {
    const std::size_t i = rng() % x.size();
    CHECK(rel_err(numeric(x.data[i], disc_loss), dx.data[i]) < 1e-3);
  }
}

TEST_CASE("reconstruction and classifier losses: gradients through the frozen classifier") {
  std::mt19937_64 rng(5);
  const std::vector<clf::HeadSpec> heads{{"p", 2, clf::HeadRole::kPrimary, 1}, {"m", 3, clf::HeadRole::kConfounder, 0}};
  clf::ClassifierNet<double> cnet(TrunkSpec{8, 3, {4, 6, 5}, 1}, heads);
  cnet.init(rng);
  const auto x = random_image<double>(rng, 8);
  auto y = random_image<double>(rng, 8);
  const std::vector<std::vector<double>> p{{0.3, 0.7}, {0.2, 0.5, 0.3}};
  PerceptualSpec ps;

  auto total = [&] {
    std::vector<nn::Tensor<double>> fx, fy;
    cnet.forward(x, nullptr, &fx);
    const auto logits = cnet.forward(y, nullptr, &fy);
    return kl_from_logits<double>(p, logits, nullptr) +
           perceptual_from_features<double>(fx, fy, ps, nullptr) + l1_mean<double>(x, y, nullptr);
  };

  std::vector<nn::Tensor<double>> fx, fy, dfeat;
  cnet.forward(x, nullptr, &fx);
  clf::ClassifierNet<double>::Cache cc;
  const auto logits = cnet.forward(y, &cc, &fy);
  std::vector<std::vector<double>> dlogits;
  kl_from_logits(p, logits, &dlogits);
  perceptual_from_features(fx, fy, ps, &dfeat);
  nn::Tensor<double> dl1;
  l1_mean(x, y, &dl1);
  auto dy = cnet.backward(cc, dlogits, &dfeat, false);
  for (std::size_t i = 0; i < dy.size(); ++i) dy.data[i] += dl1.data[i];

  for (int probe = 0; probe < 60; ++probe) {
    const std::size_t i = rng() % y.size();
    CHECK(rel_err(numeric(y.data[i], total), dy.data[i]) < 1e-3);
  }
}

TEST_CASE("reconstruction loss identities") {
  std::mt19937_64 rng(6);
  clf::ClassifierNet<double> cnet(TrunkSpec{8, 3, {4, 6, 5}, 1}, {{"p", 2, clf::HeadRole::kPrimary, 1}});
  cnet.init(rng);
  const auto x = random_image<double>(rng, 8, 0.3);
  const auto y = random_image<double>(rng, 8, 0.3);
  PerceptualSpec ps;
  CHECK(rec_loss(cnet, ps, x, x) == 0.0);
  CHECK(rec_loss(cnet, ps, x, y) == rec_loss(cnet, ps, y, x));
  auto shifted = x;
  for (auto& v : shifted.data) v += 0.5;
  CHECK(l1_mean<double>(x, shifted, nullptr) == doctest::Approx(0.5));
  PerceptualSpec none;
  none.depths = {};
  CHECK(rec_loss(cnet, none, x, shifted) == doctest::Approx(0.5));
}

TEST_CASE("classifier loss closed forms") {
  auto out = [](std::vector<double> a, std::vector<double> b) {
    clf::ClassifierOutput o;
    o.heads.push_back({"p", 1, std::move(a)});
    o.heads.push_back({"m", 1, std::move(b)});
    return o;
  };
  const auto p = out({1, 0}, {0.5, 0.5});
  CHECK(cls_loss(p, p) == doctest::Approx(0.0));
  CHECK(cls_loss(out({1, 0}, {0.5, 0.5}), out({0.5, 0.5}, {0.5, 0.5})) == doctest::Approx(std::log(2.0)));
  CHECK(cls_loss(out({1, 0}, {1, 0}), out({0.5, 0.5}, {0.5, 0.5})) == doctest::Approx(2 * std::log(2.0)));
  // q below the floor is clamped, so the loss stays finite
  const double capped = cls_loss(out({1, 0}, {0.5, 0.5}), out({0, 1}, {0.5, 0.5}));
  CHECK(std::isfinite(capped));
  CHECK(capped == doctest::Approx(-std::log(kProbFloor / (1 + kProbFloor))));

  // logits form agrees
  const std::vector<std::vector<double>> pl{{1, 0}}, ql{{0, 0}};
  CHECK(kl_from_logits<double>(pl, ql, nullptr) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("adversarial loss closed forms") {
  std::mt19937_64 rng(7);
  Discriminator<double> disc(micro_trunk());
  disc.init(rng);
  std::vector<nn::Tensor<double>> real{random_image<double>(rng, 8)}, fake{random_image<double>(rng, 8)};

  // A constant discriminator: zero final weights and a chosen bias.
  auto params = disc.params();
  for (auto* p : params)
    if (p->name == "disc.fc2.w") std::fill(p->value.begin(), p->value.end(), 0.0);
  auto set_bias = [&](double b) {
    for (auto* p : params)
      if (p->name == "disc.fc2.b") p->value[0] = b;
  };
  set_bias(0.0);
  auto l = adversarial_losses(disc, real, fake, 1.0);
  CHECK(l.d_loss == doctest::Approx(2 * std::log(2.0)));
  CHECK(l.g_loss == doctest::Approx(std::log(2.0)));
  CHECK(l.r1 == 0.0);
  // A perfect discriminator drives its loss to zero.
  set_bias(20.0);
  CHECK(adversarial_losses(disc, real, {}, 0.0).d_loss < 1e-8);
  set_bias(-20.0);
  CHECK(adversarial_losses(disc, {}, fake, 0.0).d_loss < 1e-8);
}

TEST_CASE("r1 parameter gradient matches finite differences of the penalty") {
  std::mt19937_64 rng(8);
  Discriminator<double> disc(micro_trunk());
  disc.init(rng);
  const auto x = random_image<double>(rng, 8);
  auto penalty = [&] {
    Discriminator<double>::Cache c;
    disc.forward(x, &c);
    const auto g = disc.backward(c, 1.0, false);
    double sq = 0;
    for (double v : g.data) sq += v * v;
    return 0.5 * sq;
  };
  auto params = disc.params();
  nn::zero_grads(params);
  const double value = r1_accumulate(disc, x, 1.0);
  CHECK(value == doctest::Approx(penalty()));
  for (int probe = 0; probe < 60; ++probe) {
    auto* p = params[rng() % params.size()];
    const std::size_t i = rng() % p->size();
    INFO(p->name << "[" << i << "]");
    CHECK(rel_err(numeric(p->value[i], penalty), p->grad[i]) < 1e-3);
  }
}

TEST_CASE("condition vector concatenates heads in model order") {
  clf::ClassifierOutput o;
  o.heads.push_back({"m", 1, {0.1, 0.9}});
  o.heads.push_back({"p", 1, {0.25, 0.75}});
  const std::vector<clf::HeadSpec> heads{{"p", 2, clf::HeadRole::kPrimary, 1}, {"m", 2, clf::HeadRole::kConfounder, 1}};
  CHECK(build_condition(o, heads) == ConditionVector{0.25f, 0.75f, 0.1f, 0.9f});
  const std::vector<clf::HeadSpec> missing{{"q", 2, clf::HeadRole::kPrimary, 1}};
  CHECK_THROWS_AS(build_condition(o, missing), std::invalid_argument);
}

TEST_CASE("training run: smoke, frozen classifier, checkpoints, gate") {
  const auto spec = small_spec();
  const auto data = synth::sample_dataset(spec, 64, 21);
  const auto classifier = small_classifier(data);
  const auto hash = clf::classifier_hash(classifier);
  auto cfg = small_stylex_config();

  SUBCASE("gate refusal and override") {
    TrainOptions opts;
    opts.classifier_tune_auc = 0.7;
    CHECK_THROWS_AS(train_stylex(data, classifier, cfg, opts), GateRefusal);
    opts.override_gate = true;
    cfg.steps = 1;
    CHECK_NOTHROW(train_stylex(data, classifier, cfg, opts));
  }

  SUBCASE("non-finite input aborts with a diagnostic checkpoint") {
    auto bad = data;
    bad[0].pixels.data[0] = std::nanf("");
    std::vector<synth::LabeledImage> only_bad(4, bad[0]);
    const auto dir = std::filesystem::temp_directory_path() / "stylexlab_sx_nan";
    std::filesystem::remove_all(dir);
    TrainOptions opts;
    opts.out_dir = dir;
    cfg.steps = 2;
    CHECK_THROWS_AS(train_stylex(only_bad, classifier, cfg, opts), NumericFailure);
    CHECK(std::filesystem::exists(dir / "stylex_diagnostic.bin"));
  }

  SUBCASE("100 steps") {
    const auto dir = std::filesystem::temp_directory_path() / "stylexlab_sx_smoke";
    std::filesystem::remove_all(dir);
    TrainOptions opts;
    opts.out_dir = dir;
    auto [models, history] = train_stylex(data, classifier, cfg, opts);
    REQUIRE(history.steps.size() == 100);
    for (const auto& r : history.steps) {
      CHECK(std::isfinite(r.d_loss));
      CHECK(std::isfinite(r.g_adv));
      CHECK(std::isfinite(r.rec));
      CHECK(std::isfinite(r.cls));
      CHECK(std::isfinite(r.r1));
    }
    double early = 0, late = 0;
    for (int i = 0; i < 10; ++i) {
      early += history.steps[i].rec;
      late += history.steps[90 + i].rec;
    }
    CHECK(late < early);
    CHECK(clf::classifier_hash(classifier) == hash);
    CHECK(std::filesystem::exists(dir / "stylex_log.jsonl"));

    const auto path = dir / "stylex.bin";
    save_checkpoint(models, path, {{"step", 100}});
    nlohmann::json side;
    const auto loaded = load_checkpoint(path, &side);
    CHECK(side.at("step") == 100);
    CHECK(loaded.layout() == models.layout());
    CHECK(reconstruct(loaded, classifier, data[3].pixels).data ==
          reconstruct(models, classifier, data[3].pixels).data);

    {
      std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(200);
      f.put('\x55');
    }
    CHECK_THROWS_AS(load_checkpoint(path), ckpt::CorruptError);
    {
      std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(4);
      const char v[4] = {9, 0, 0, 0};
      f.write(v, 4);
    }
    CHECK_THROWS_AS(load_checkpoint(path), ckpt::VersionError);
  }
}

TEST_CASE("seeded style map regression") {
  Generator<double> gen(micro_gen());
  std::mt19937_64 rng(11);
  gen.init(rng);
  const std::vector<double> w{0.1, -0.2, 0.3, -0.4, 0.5}, c{0.2, 0.3, 0.5};
  const auto s = gen.style_map(w, c);
  REQUIRE(s.size() == 18);
  CHECK(s[0] == doctest::Approx(0.61624261871009822).epsilon(1e-12));
  CHECK(s[5] == doctest::Approx(0.54409729721311395).epsilon(1e-12));
  CHECK(s[17] == doctest::Approx(1.1166235995714928).epsilon(1e-12));
}

TEST_CASE("reconstruct chains encode, condition, style map and synthesis") {
  const auto spec = small_spec();
  const auto data = synth::sample_dataset(spec, 24, 31);
  const auto classifier = small_classifier(data);
  auto cfg = small_stylex_config();
  cfg.generator.cond_dim = 4;
  cfg.generator.resolution = 32;
  const auto m = make_models(cfg.generator, cfg.encoder, cfg.discriminator, 5);
  const auto& x = data[2].pixels;
  const auto manual = synthesize(
      m, style_map(m, encode(m, x), build_condition(clf::predict(classifier, x), classifier.heads)));
  CHECK(reconstruct(m, classifier, x).data == manual.data);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto spec = small_spec();
  const auto data = synth::sample_dataset(spec, 32, 41);
  const auto classifier = small_classifier(data);
  auto cfg = small_stylex_config();
  cfg.steps = 12;
  auto a = train_stylex(data, classifier, cfg).first;
  auto b = train_stylex(data, classifier, cfg).first;
  CHECK(params_hash<float>(a.all_params()) == params_hash<float>(b.all_params()));
  cfg.seed = 2;
  auto c = train_stylex(data, classifier, cfg).first;
  CHECK(params_hash<float>(a.all_params()) != params_hash<float>(c.all_params()));
}

TEST_CASE("smoke run at 64x64 with the default networks") {
  synth::SynthSpec spec;
  const auto data = synth::sample_dataset(spec, 48, 51);
  clf::ClassifierTrainConfig cc;
  cc.arch.widths = {8, 16, 16, 16};
  cc.steps = 10;
  cc.batch_size = 8;
  cc.eval_every = 1000;
  const auto classifier = train_classifier(data, {}, clf::heads_for(spec), cc).first;
  StylexTrainConfig cfg;
  cfg.steps = 100;
  cfg.batch_size = 2;
  cfg.log_every = 1000;
  cfg.checkpoint_every = 0;
  const auto [models, history] = train_stylex(data, classifier, cfg);
  REQUIRE(history.steps.size() == 100);
  double early = 0, late = 0;
  for (int i = 0; i < 10; ++i) {
    early += history.steps[i].rec;
    late += history.steps[90 + i].rec;
  }
  for (const auto& r : history.steps) CHECK(std::isfinite(r.d_loss + r.g_adv + r.rec + r.cls + r.r1));
  CHECK(late < early);
}
