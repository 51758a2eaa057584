#pragma once
// Counterfactual strips, planted-factor attribution, animated GIF assets and
// the static HTML review artifact.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "stylexlab/attrsearch.hpp"
#include "stylexlab/image_io.hpp"
#include "stylexlab/synthdata.hpp"

namespace stylexlab::report {

inline const std::vector<double> kDefaultMagnitudes{-4, -2, 0, 2, 4};
inline constexpr int kDefaultExamples = 5;

struct Frame {
  double magnitude = 0;      // multiple of sigma
  synth::Image pixels;
  std::vector<double> cps;   // per explainee head
};

struct CounterfactualStrip {
  std::string image_id;
  std::size_t coord = 0;
  std::vector<Frame> frames;  // ascending magnitude
};

CounterfactualStrip render_strip(const attr::Explainee& ex, const synth::Image& image,
                                 std::string image_id, std::size_t coord,
                                 const std::vector<double>& magnitudes,
                                 const attr::CoordinateStats& stats);

// rows: attributes; columns: factors. `delta` is the mean measured change,
// `normalized` divides it by the factor's sampling range.
struct RecoveryMatrix {
  std::vector<std::size_t> coords;
  std::vector<std::string> factors;
  std::vector<std::vector<double>> delta;
  std::vector<std::vector<double>> normalized;
  std::vector<std::vector<int>> valid_pairs;

  // Column with the largest |normalized| entry, and its ratio to the runner-up.
  std::pair<int, double> dominant(std::size_t row) const;
};

// Null spec means the data has no planted factors to measure.
RecoveryMatrix factor_attribution(const attr::Explainee& ex,
                                  const std::vector<attr::AttributeEffect>& selected,
                                  const std::vector<synth::Image>& images,
                                  const synth::SynthSpec* spec, const attr::CoordinateStats& stats,
                                  double magnitude = 4.0);

void to_json(nlohmann::json& j, const RecoveryMatrix& m);

struct AttributeReportEntry {
  attr::AttributeEffect effect;
  std::vector<CounterfactualStrip> strips;
  std::vector<std::pair<std::string, double>> cross;  // sorted by |dCP|
  std::string notes;                                  // left empty for reviewers
};

// Candidate indices ordered by |primary dCP| under the canonical perturbation
// (ties: lower index), truncated to n.
std::vector<std::size_t> pick_examples(const attr::Explainee& ex, const attr::AttributeEffect& e,
                                       const std::vector<synth::Image>& candidates,
                                       const attr::CoordinateStats& stats, double factor,
                                       std::size_t n);

// Animated GIF cycling the frames; pixels are nearest-upscaled by `scale`.
std::vector<std::uint8_t> encode_gif(const std::vector<io::Rgb8>& frames, int delay_cs);
io::Rgb8 upscale(const io::Rgb8& img, int scale);

struct ReportContext {
  std::string title = "Attribute review";
  std::vector<std::string> heads;
  nlohmann::json dataset = nlohmann::json::object();  // shown in the context block
  nlohmann::json manifest = nlohmann::json::object();
  int gif_scale = 3;
  int frame_delay_cs = 40;
};

// Writes index.html, assets/, tables/ and manifest.json under output_dir.
void emit_report(const std::vector<AttributeReportEntry>& entries, const ReportContext& context,
                 const std::filesystem::path& output_dir);

// tables/attributes.csv and tables/attributes.json under dir.
void emit_tables(const std::vector<AttributeReportEntry>& entries, const std::filesystem::path& dir);

nlohmann::json entries_to_json(const std::vector<AttributeReportEntry>& entries);
// Pixels are not serialized; frames come back with empty images.
std::vector<AttributeReportEntry> entries_from_json(const nlohmann::json& j);

std::string html_escape(const std::string& s);

}  // namespace stylexlab::report
