#pragma once
// Procedural image domain with planted, analytically measurable factors.
//
// Each image is a bright central disc crossed by two dark vessel-like curves,
// sprinkled with small bright spots and surrounded by a blue ring band, over a
// gray background. Every factor is recoverable by fixed estimators in
// measure_factors(), which serves as the ground-truth oracle for everything
// learned downstream.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "stylexlab/nn.hpp"

namespace stylexlab::synth {

enum class Factor : int { kBgLevel = 0, kDiscRadius, kVesselWidth, kSpotCount, kRingIntensity };
inline constexpr int kNumFactors = 5;
inline constexpr std::array<Factor, kNumFactors> kAllFactors{
    Factor::kBgLevel, Factor::kDiscRadius, Factor::kVesselWidth, Factor::kSpotCount,
    Factor::kRingIntensity};

std::string_view factor_name(Factor f);
Factor factor_from_name(std::string_view name);

struct FactorVector {
  double bg_level = 0.5;        // unitless, [0, 1]
  double disc_radius = 0.325;   // fraction of image width
  double vessel_width = 4.0;    // pixels
  int spot_count = 6;
  double ring_intensity = 0.5;  // unitless, [0, 1]

  double get(Factor f) const;
  void set(Factor f, double value);
};

struct Range {
  double lo = 0.0;
  double hi = 1.0;
  double width() const { return hi - lo; }
  double mid() const { return 0.5 * (lo + hi); }
};

struct FactorRanges {
  std::array<Range, kNumFactors> bounds{
      Range{0.0, 1.0}, Range{0.2, 0.45}, Range{1.0, 7.0}, Range{0.0, 12.0}, Range{0.0, 1.0}};
  const Range& operator[](Factor f) const { return bounds[static_cast<int>(f)]; }
  Range& operator[](Factor f) { return bounds[static_cast<int>(f)]; }
};

struct ThresholdRule {
  std::string head;
  Factor factor = Factor::kVesselWidth;
  double threshold = 4.0;
  // label = factor > threshold
  int label_for(const FactorVector& f) const { return f.get(factor) > threshold ? 1 : 0; }
};

struct ConfoundRule {
  Factor factor = Factor::kRingIntensity;
  double rho = 0.8;
};

struct SynthSpec {
  int resolution = 64;
  FactorRanges ranges;
  ThresholdRule label_rule{"vessel_wide", Factor::kVesselWidth, 4.0};
  ConfoundRule confound_rule;
  std::vector<ThresholdRule> confounder_heads{{"ring_bright", Factor::kRingIntensity, 0.5},
                                              {"spotty", Factor::kSpotCount, 6.0}};
  std::uint64_t seed = 1;

  void validate() const;
  std::vector<std::string> head_names() const;  // primary first
};

void to_json(nlohmann::json& j, const SynthSpec& s);
void from_json(const nlohmann::json& j, SynthSpec& s);

using Image = nn::Tensor<float>;  // 3 x R x R, values in [-1, 1]

struct LabeledImage {
  Image pixels;
  std::map<std::string, int> labels;
  std::string subject_id;
  std::optional<FactorVector> factors;
};

struct FactorMeasurement {
  std::array<double, kNumFactors> estimate{};
  std::array<bool, kNumFactors> valid{};
  double get(Factor f) const { return estimate[static_cast<int>(f)]; }
  bool is_valid(Factor f) const { return valid[static_cast<int>(f)]; }
};

class RangeError : public std::out_of_range {
 public:
  RangeError(Factor f, const std::string& what) : std::out_of_range(what), factor(f) {}
  Factor factor;
};

class IngestError : public std::runtime_error {
 public:
  IngestError(const std::string& what, std::vector<std::string> rows)
      : std::runtime_error(what), offending_rows(std::move(rows)) {}
  std::vector<std::string> offending_rows;
};

// Throws RangeError naming the first factor outside spec.ranges.
void check_factors(const FactorVector& f, const SynthSpec& spec);

Image render_synthetic(const FactorVector& factors, const SynthSpec& spec,
                       std::uint64_t noise_seed);

// Same renderer without range validation; lets tests build degenerate scenes
// (e.g. an empty disc).
Image render_unchecked(const FactorVector& factors, int resolution, std::uint64_t noise_seed);

FactorMeasurement measure_factors(const Image& pixels, const SynthSpec& spec);

std::vector<LabeledImage> sample_dataset(const SynthSpec& spec, std::size_t n,
                                         std::uint64_t seed);

// Mixing weight a for u = (1-a) * eps + a * label so that corr(u, label) = rho
// exactly when P(label = 1) = p and eps ~ U(0, 1).
double confound_mixing_weight(double rho, double p);
// P(label = 1) under uniform draws of the causal factor.
double positive_rate(const SynthSpec& spec);

std::vector<LabeledImage> ingest_folder(const std::filesystem::path& image_dir,
                                        const std::filesystem::path& manifest,
                                        int resolution);

struct Split {
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> tune;
  std::vector<LabeledImage> eval;
};

Split split_dataset(const std::vector<LabeledImage>& dataset, std::array<double, 3> fractions,
                    std::uint64_t seed);

}  // namespace stylexlab::synth
