#pragma once
// Search of StyleSpace coordinates that move the classifier: per-coordinate
// statistics, single-coordinate counterfactuals, class-level effect tables,
// filtering and selection.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "stylexlab/classifier.hpp"
#include "stylexlab/stylex.hpp"
#include "stylexlab/synthdata.hpp"

namespace stylexlab::attr {

// What the search needs from a (generator, classifier) pair. Heads are
// reported in a fixed order with the primary head first.
class Explainee {
 public:
  struct ProbeCache {
    virtual ~ProbeCache() = default;
  };
  struct Probe {
    std::vector<float> style;
    std::vector<double> base_cp;  // CPs of the unedited rendering
    std::shared_ptr<const ProbeCache> cache;
  };

  virtual ~Explainee() = default;
  virtual const sx::StyleSpaceLayout& layout() const = 0;
  virtual const std::vector<std::string>& heads() const = 0;
  virtual std::vector<float> style_of(const synth::Image& image) const = 0;
  virtual synth::Image render(std::span<const float> style) const = 0;
  virtual std::vector<double> cps(const synth::Image& image) const = 0;

  virtual Probe probe(const synth::Image& image) const;
  // CPs after adding delta to one coordinate of the probe's style.
  virtual std::vector<double> edited_cps(const Probe& probe, std::size_t coord, float delta) const;
};

// Trained encoder/generator with the frozen classifier. Edits resume synthesis
// at the edited layer from cached activations.
class StylexExplainee final : public Explainee {
 public:
  StylexExplainee(const sx::StylexModels& models, const clf::ClassifierModel& classifier);

  const sx::StyleSpaceLayout& layout() const override { return models_.layout(); }
  const std::vector<std::string>& heads() const override { return heads_; }
  std::vector<float> style_of(const synth::Image& image) const override;
  synth::Image render(std::span<const float> style) const override;
  std::vector<double> cps(const synth::Image& image) const override;
  Probe probe(const synth::Image& image) const override;
  std::vector<double> edited_cps(const Probe& probe, std::size_t coord, float delta) const override;

 private:
  const sx::StylexModels& models_;
  const clf::ClassifierModel& classifier_;
  std::vector<std::string> heads_;
};

struct SearchConfig {
  double perturb_factor = 4.0;
  double cp_threshold = 0.15;
  int images_per_class = 500;
  int skip_layers = 2;
  int top_k = 10;                 // image-specific ranking length
  double selection_x = 10.0;      // percent; used when tune_threshold is off
  int target_attribute_count = 10;
  bool tune_threshold = true;
  std::uint64_t seed = 1;         // which images are drawn per class

  void validate() const;
};

void to_json(nlohmann::json& j, const SearchConfig& c);
void from_json(const nlohmann::json& j, SearchConfig& c);

struct CoordinateStats {
  std::vector<double> mean;
  std::vector<double> sigma;  // population standard deviation
  std::size_t count = 0;
};

CoordinateStats coordinate_stats(const Explainee& ex, const std::vector<synth::Image>& images);

// First flat index outside the skipped layers.
std::size_t first_searchable(const sx::StyleSpaceLayout& layout, int skip_layers);
// Coordinates searched: past the skipped layers with non-zero sigma, ascending.
std::vector<std::size_t> searchable_coords(const sx::StyleSpaceLayout& layout,
                                           const CoordinateStats& stats, int skip_layers);

struct Counterfactual {
  synth::Image base;
  synth::Image edited;
  std::vector<double> cp_before;
  std::vector<double> cp_after;
};

Counterfactual perturbed_counterfactual(const Explainee& ex, const synth::Image& image,
                                        std::size_t coord, double signed_delta);

struct RankedCoord {
  std::size_t coord = 0;
  int direction = 1;
  double abs_dcp = 0;
};

std::vector<RankedCoord> per_image_topk(const Explainee& ex, const synth::Image& image,
                                        const CoordinateStats& stats, const SearchConfig& config);

enum Dir { kPlus = 0, kMinus = 1 };

struct DirStats {
  double mean_dcp = 0;  // signed
  double exceed = 0;    // fraction with |dCP| > threshold
  bool operator==(const DirStats&) const = default;
};

struct HeadEffect {
  std::string head;
  std::array<std::array<DirStats, 2>, 2> by_class{};  // [class][Dir]
  std::array<double, 2> mean_dcp{};                   // [Dir], pooled over classes
  bool operator==(const HeadEffect&) const = default;
};

struct AttributeEffect {
  std::size_t coord = 0;
  int layer = 0;
  int channel = 0;
  double sigma = 0;
  int direction = 1;                // +1 or -1; the sign that raises primary CP
  std::array<double, 2> p{};        // P(att, class) in percent, primary head
  std::vector<HeadEffect> heads;    // primary first
  std::vector<std::pair<std::string, double>> cross;  // other heads, canonical direction

  const HeadEffect& primary() const { return heads.front(); }
  // pooled mean dCP on a head in the canonical direction
  double canonical_dcp(std::size_t head) const;
  bool operator==(const AttributeEffect&) const = default;
};

struct EffectTable {
  std::vector<AttributeEffect> entries;  // ascending coord
  std::vector<std::string> heads;
  std::array<std::size_t, 2> class_sizes{};
  SearchConfig config;
  nlohmann::json provenance = nlohmann::json::object();

  const AttributeEffect* find(std::size_t coord) const;
};

void to_json(nlohmann::json& j, const AttributeEffect& e);
void from_json(const nlohmann::json& j, AttributeEffect& e);
void to_json(nlohmann::json& j, const EffectTable& t);
void from_json(const nlohmann::json& j, EffectTable& t);

// images_by_class[c] holds images whose primary label is c.
EffectTable class_effect_table(const Explainee& ex,
                               const std::array<std::vector<synth::Image>, 2>& images_by_class,
                               const CoordinateStats& stats, const SearchConfig& config);

// Keeps coordinates whose two directions move primary CP oppositely on both
// classes, with the same signs in both classes.
bool is_consistent(const AttributeEffect& e);
EffectTable consistency_filter(const EffectTable& table);

bool selection_predicate(const std::array<double, 2>& p, double x);
std::vector<std::size_t> select_attributes(const EffectTable& table, double x);

struct ThresholdChoice {
  double x = 0;
  std::size_t count = 0;
  bool reached = false;  // false when even a vanishing X selects too few
};

ThresholdChoice tune_selection_threshold(const EffectTable& table, std::size_t target_count);

struct CrossEffect {
  std::size_t coord = 0;
  std::vector<std::pair<std::string, double>> heads;  // sorted by |dCP| descending
};

// Mean signed dCP on every non-primary head under each attribute's canonical
// perturbation. Empty for single-head classifiers.
std::vector<CrossEffect> confounder_cross_effects(const Explainee& ex, const EffectTable& table,
                                                  const std::vector<std::size_t>& selected,
                                                  const std::vector<synth::Image>& images,
                                                  const CoordinateStats& stats,
                                                  const SearchConfig& config);

// One row per (coordinate, head).
inline constexpr const char* kEffectCsvHeader =
    "coord,layer,channel,head,P_class0,P_class1,mean_dcp_plus,mean_dcp_minus,cross_dcp";
std::string effect_csv(const std::vector<AttributeEffect>& entries);

// Deterministic shortest round-trip formatting used by all tables.
std::string format_number(double v);

}  // namespace stylexlab::attr
