#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "stylexlab/image_io.hpp"
#include "stylexlab/rng.hpp"
#include "stylexlab/synthdata.hpp"

using namespace stylexlab;
using namespace stylexlab::synth;

namespace {

FactorVector midpoints(const SynthSpec& spec) {
  FactorVector f;
  for (Factor k : kAllFactors) f.set(k, spec.ranges[k].mid());
  return f;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("stylexlab_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("render is deterministic in (factors, spec, seed)") {
  SynthSpec spec;
  const auto f = midpoints(spec);
  const auto a = render_synthetic(f, spec, 42);
  const auto b = render_synthetic(f, spec, 42);
  CHECK(a.data == b.data);
  const auto c = render_synthetic(f, spec, 43);
  CHECK(a.data != c.data);
  for (float p : a.data) {
    CHECK(p >= -1.0f);
    CHECK(p <= 1.0f);
  }
}

TEST_CASE("out-of-range factor raises a range error naming the factor") {
  SynthSpec spec;
  auto f = midpoints(spec);
  f.vessel_width = 9.0;
  try {
    render_synthetic(f, spec, 1);
    FAIL("expected RangeError");
  } catch (const RangeError& e) {
    CHECK(e.factor == Factor::kVesselWidth);
    CHECK(std::string(e.what()).find("vessel_width") != std::string::npos);
  }
}

TEST_CASE("absent ring measures near zero") {
  SynthSpec spec;
  auto f = midpoints(spec);
  f.ring_intensity = 0.0;
  const auto m = measure_factors(render_synthetic(f, spec, 5), spec);
  REQUIRE(m.is_valid(Factor::kRingIntensity));
  CHECK(m.get(Factor::kRingIntensity) < 0.02);
}

TEST_CASE("midpoint factors round-trip within oracle tolerances") {
  SynthSpec spec;
  const auto f = midpoints(spec);
  const auto m = measure_factors(render_synthetic(f, spec, 3), spec);
  CHECK(std::abs(m.get(Factor::kBgLevel) - f.bg_level) <= 0.05);
  CHECK(std::abs(m.get(Factor::kDiscRadius) - f.disc_radius) <= 0.03);
  CHECK(std::abs(m.get(Factor::kRingIntensity) - f.ring_intensity) <= 0.08);
  CHECK(m.get(Factor::kSpotCount) == f.spot_count);
  CHECK(std::abs(m.get(Factor::kVesselWidth) - f.vessel_width) <= 1.0);
}

TEST_CASE("empty scene has no spots") {
  FactorVector f;
  f.disc_radius = 0.0;
  f.spot_count = 0;
  SynthSpec spec;
  const auto m = measure_factors(render_unchecked(f, spec.resolution, 9), spec);
  CHECK(m.get(Factor::kSpotCount) == 0);
  CHECK(std::abs(m.get(Factor::kBgLevel) - f.bg_level) <= 0.05);
}

TEST_CASE("bg shift of +0.3 is measured as 0.3 +- 0.05") {
  SynthSpec spec;
  auto f = midpoints(spec);
  f.bg_level = 0.3;
  const auto lo = measure_factors(render_synthetic(f, spec, 17), spec);
  f.bg_level = 0.6;
  const auto hi = measure_factors(render_synthetic(f, spec, 17), spec);
  CHECK(std::abs((hi.get(Factor::kBgLevel) - lo.get(Factor::kBgLevel)) - 0.3) <= 0.05);
}

TEST_CASE("wider vessels measure wider") {
  SynthSpec spec;
  auto f = midpoints(spec);
  f.vessel_width = 2.0;
  const auto a = measure_factors(render_synthetic(f, spec, 21), spec);
  f.vessel_width = 6.0;
  const auto b = measure_factors(render_synthetic(f, spec, 21), spec);
  CHECK(b.get(Factor::kVesselWidth) > a.get(Factor::kVesselWidth));
}

TEST_CASE("saturated image is reported invalid rather than throwing") {
  SynthSpec spec;
  Image img(3, spec.resolution, spec.resolution, 1.0f);
  FactorMeasurement m;
  CHECK_NOTHROW(m = measure_factors(img, spec));
  for (Factor f : kAllFactors) CHECK_FALSE(m.is_valid(f));
}

TEST_CASE("oracle fidelity over 500 random factor draws") {
  SynthSpec spec;
  std::vector<FactorVector> draws;
  std::vector<double> vessel_est;
  int failures = 0;
  for (std::uint64_t i = 0; i < 500; ++i) {
    CounterRng rng(2024, i);
    FactorVector f;
    f.bg_level = rng.uniform(0, 1);
    f.disc_radius = rng.uniform(0.2, 0.45);
    f.vessel_width = rng.uniform(1, 7);
    f.spot_count = static_cast<int>(rng.uniform() * 13);
    f.ring_intensity = rng.uniform(0, 1);
    const auto m = measure_factors(render_synthetic(f, spec, rng()), spec);
    bool ok = std::abs(m.get(Factor::kBgLevel) - f.bg_level) <= 0.05 &&
              std::abs(m.get(Factor::kDiscRadius) - f.disc_radius) <= 0.03 &&
              std::abs(m.get(Factor::kRingIntensity) - f.ring_intensity) <= 0.08 &&
              m.is_valid(Factor::kVesselWidth);
    if (f.spot_count <= 8) ok = ok && m.get(Factor::kSpotCount) == f.spot_count;
    if (!ok) {
      ++failures;
      MESSAGE("draw " << i << ": bg " << f.bg_level << "/" << m.get(Factor::kBgLevel) << " disc "
                      << f.disc_radius << "/" << m.get(Factor::kDiscRadius) << " ring "
                      << f.ring_intensity << "/" << m.get(Factor::kRingIntensity) << " spots "
                      << f.spot_count << "/" << m.get(Factor::kSpotCount));
    }
    draws.push_back(f);
    vessel_est.push_back(m.get(Factor::kVesselWidth));
  }
  CHECK(failures == 0);
  int order_violations = 0;
  for (std::size_t i = 0; i < draws.size(); ++i)
    for (std::size_t j = i + 1; j < draws.size(); ++j) {
      const double d = draws[i].vessel_width - draws[j].vessel_width;
      if (std::abs(d) < 2.0) continue;
      if ((d > 0) != (vessel_est[i] > vessel_est[j])) ++order_violations;
    }
  CHECK(order_violations == 0);
}

TEST_CASE("sample_dataset basics") {
  SynthSpec spec;
  CHECK(sample_dataset(spec, 0, 1).empty());

  const auto data = sample_dataset(spec, 64, 5);
  std::set<std::string> ids;
  for (const auto& item : data) {
    ids.insert(item.subject_id);
    REQUIRE(item.factors.has_value());
    CHECK(item.labels.at("vessel_wide") == (item.factors->vessel_width > 4.0 ? 1 : 0));
    CHECK(item.labels.at("ring_bright") == (item.factors->ring_intensity > 0.5 ? 1 : 0));
    CHECK(item.labels.size() == spec.head_names().size());
    CHECK_NOTHROW(check_factors(*item.factors, spec));
  }
  CHECK(ids.size() == data.size());

  // Generation is keyed by (seed, index), so a prefix of a larger draw matches.
  const auto prefix = sample_dataset(spec, 8, 5);
  for (std::size_t i = 0; i < prefix.size(); ++i) CHECK(prefix[i].pixels.data == data[i].pixels.data);
}

TEST_CASE("confound mixing weight reproduces the requested correlation (Monte Carlo)") {
  // Independent check of the closed form by direct simulation of
  // u = (1-a) eps + a L with L ~ Bernoulli(p).
  for (double p : {0.5, 0.3}) {
    for (double rho : {0.2, 0.5, 0.8, 0.95}) {
      const double a = confound_mixing_weight(rho, p);
      std::mt19937_64 rng(99);
      std::uniform_real_distribution<double> u01(0, 1);
      std::vector<double> u, l;
      for (int i = 0; i < 200000; ++i) {
        const double lab = u01(rng) < p ? 1.0 : 0.0;
        u.push_back((1 - a) * u01(rng) + a * lab);
        l.push_back(lab);
      }
      CHECK(pearson(u, l) == doctest::Approx(rho).epsilon(0.01));
    }
  }
  CHECK(confound_mixing_weight(0.0, 0.5) == 0.0);
  CHECK(confound_mixing_weight(1.0, 0.5) == 1.0);
}

TEST_CASE("confound correlation at n = 2000") {
  SynthSpec spec;
  SUBCASE("rho = 0") {
    spec.confound_rule.rho = 0.0;
    const auto data = sample_dataset(spec, 2000, 77);
    std::vector<double> c, l;
    for (const auto& item : data) {
      c.push_back(item.factors->ring_intensity);
      l.push_back(item.labels.at("vessel_wide"));
    }
    CHECK(std::abs(pearson(c, l)) < 0.07);
  }
  SUBCASE("rho = 0.8") {
    spec.confound_rule.rho = 0.8;
    const auto data = sample_dataset(spec, 2000, 78);
    std::vector<double> c, l;
    for (const auto& item : data) {
      c.push_back(item.factors->ring_intensity);
      l.push_back(item.labels.at("vessel_wide"));
    }
    const double r = pearson(c, l);
    CHECK(r >= 0.72);
    CHECK(r <= 0.88);
  }
}

TEST_CASE("spec validation") {
  SynthSpec spec;
  CHECK_NOTHROW(spec.validate());
  spec.confound_rule.factor = Factor::kVesselWidth;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = SynthSpec{};
  spec.confound_rule.rho = 1.5;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = SynthSpec{};
  spec.resolution = 16;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);

  SynthSpec round;
  round.seed = 1234;
  round.confound_rule.rho = -0.4;
  nlohmann::json j = round;
  const auto back = j.get<SynthSpec>();
  CHECK(nlohmann::json(back) == j);
}

TEST_CASE("ingest_folder") {
  const auto dir = temp_dir("ingest");
  SUBCASE("empty manifest") {
    std::ofstream(dir / "m.csv") << "file,subject_id,a,b\n";
    CHECK(ingest_folder(dir, dir / "m.csv", 32).empty());
  }
  SUBCASE("nonexistent file names the row") {
    std::ofstream(dir / "m.csv") << "file,subject_id,a\nnope.png,s1,1\n";
    try {
      ingest_folder(dir, dir / "m.csv", 32);
      FAIL("expected IngestError");
    } catch (const IngestError& e) {
      REQUIRE(e.offending_rows.size() == 1);
      CHECK(e.offending_rows[0].find("row 2") != std::string::npos);
      CHECK(e.offending_rows[0].find("nope.png") != std::string::npos);
    }
  }
  SUBCASE("ten valid rows with two heads") {
    SynthSpec spec;
    std::ofstream m(dir / "m.csv");
    m << "file,subject_id,h1,h2\n";
    for (int i = 0; i < 10; ++i) {
      auto f = midpoints(spec);
      const auto img = render_synthetic(f, spec, static_cast<std::uint64_t>(i));
      auto rgb = io::to_rgb8(img);
      // Non-square input exercises the center crop.
      io::Rgb8 wide{rgb.width + 6, rgb.height, {}};
      wide.pixels.assign(static_cast<std::size_t>(wide.width) * wide.height * 3, 0);
      for (int y = 0; y < rgb.height; ++y)
        std::copy_n(rgb.pixels.begin() + static_cast<std::ptrdiff_t>(y) * rgb.width * 3,
                    rgb.width * 3,
                    wide.pixels.begin() + (static_cast<std::ptrdiff_t>(y) * wide.width + 3) * 3);
      io::write_png(dir / ("img" + std::to_string(i) + ".png"), wide);
      m << "img" << i << ".png,subj" << i / 2 << "," << i % 2 << "," << (i + 1) % 3 << "\n";
    }
    m.close();
    const auto data = ingest_folder(dir, dir / "m.csv", 32);
    REQUIRE(data.size() == 10);
    for (const auto& item : data) {
      CHECK(item.labels.size() == 2);
      CHECK(item.pixels.h == 32);
      CHECK(item.pixels.w == 32);
      for (float p : item.pixels.data) {
        CHECK(p >= -1.0f);
        CHECK(p <= 1.0f);
      }
    }
    CHECK(data[3].labels.at("h2") == 1);
  }
  SUBCASE("unlabeled head is an error") {
    io::write_png(dir / "x.png", io::Rgb8{4, 4, std::vector<std::uint8_t>(48, 128)});
    std::ofstream(dir / "m.csv") << "file,subject_id,a,b\nx.png,s1,1,\n";
    CHECK_THROWS_AS(ingest_folder(dir, dir / "m.csv", 32), IngestError);
  }
}

TEST_CASE("split_dataset partitions by subject") {
  SynthSpec spec;
  std::vector<LabeledImage> data;
  const auto base = sample_dataset(spec, 4, 1);
  SUBCASE("single subject goes to train") {
    for (auto item : base) {
      item.subject_id = "only";
      data.push_back(item);
    }
    const auto s = split_dataset(data, {1, 0, 0}, 3);
    CHECK(s.train.size() == data.size());
    CHECK(s.tune.empty());
    CHECK(s.eval.empty());
  }
  SUBCASE("100 subjects with repeated images never straddle splits") {
    for (int subj = 0; subj < 100; ++subj)
      for (int k = 0; k < 2; ++k) {
        auto item = base[k];
        item.subject_id = "s" + std::to_string(subj);
        data.push_back(item);
      }
    const auto s = split_dataset(data, {0.8, 0.1, 0.1}, 11);
    auto ids = [](const std::vector<LabeledImage>& v) {
      std::set<std::string> out;
      for (const auto& i : v) out.insert(i.subject_id);
      return out;
    };
    const auto a = ids(s.train), b = ids(s.tune), c = ids(s.eval);
    for (const auto& id : a) {
      CHECK(b.count(id) == 0);
      CHECK(c.count(id) == 0);
    }
    for (const auto& id : b) CHECK(c.count(id) == 0);
    CHECK(a.size() == 80);
    CHECK(s.train.size() + s.tune.size() + s.eval.size() == data.size());

    const auto again = split_dataset(data, {0.8, 0.1, 0.1}, 11);
    CHECK(ids(again.train) == a);
    CHECK(ids(again.eval) == c);
  }
  SUBCASE("bad fractions") {
    CHECK_THROWS_AS(split_dataset(base, {0.5, 0.2, 0.2}, 1), std::invalid_argument);
  }
}
