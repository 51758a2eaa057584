#include "stylexlab/attrsearch.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <spdlog/spdlog.h>

namespace stylexlab::attr {

// --- explainees -------------------------------------------------------------------------------

Explainee::Probe Explainee::probe(const synth::Image& image) const {
  Probe p;
  p.style = style_of(image);
  p.base_cp = cps(render(p.style));
  return p;
}

std::vector<double> Explainee::edited_cps(const Probe& probe, std::size_t coord,
                                          float delta) const {
  auto s = probe.style;
  s.at(coord) += delta;
  return cps(render(s));
}

namespace {

struct StateCache final : Explainee::ProbeCache {
  std::vector<sx::Generator<float>::State> states;
};

}  // namespace

StylexExplainee::StylexExplainee(const sx::StylexModels& models,
                                 const clf::ClassifierModel& classifier)
    : models_(models), classifier_(classifier) {
  heads_.push_back(classifier.primary_name());
  for (const auto& h : classifier.heads)
    if (h.name != classifier.primary_name()) heads_.push_back(h.name);
}

std::vector<float> StylexExplainee::style_of(const synth::Image& image) const {
  return sx::image_style(models_, classifier_, image);
}

synth::Image StylexExplainee::render(std::span<const float> style) const {
  return models_.generator.synthesize(style);
}

std::vector<double> StylexExplainee::cps(const synth::Image& image) const {
  const auto out = clf::predict(classifier_, image);
  std::vector<double> v;
  v.reserve(heads_.size());
  for (const auto& h : heads_) v.push_back(clf::cp(out, h));
  return v;
}

Explainee::Probe StylexExplainee::probe(const synth::Image& image) const {
  Probe p;
  p.style = style_of(image);
  auto cache = std::make_shared<StateCache>();
  p.base_cp = cps(models_.generator.synthesize(p.style, nullptr, &cache->states));
  p.cache = std::move(cache);
  return p;
}

std::vector<double> StylexExplainee::edited_cps(const Probe& probe, std::size_t coord,
                                                float delta) const {
  const auto* cache = dynamic_cast<const StateCache*>(probe.cache.get());
  if (!cache) return Explainee::edited_cps(probe, coord, delta);
  const int layer = layout().locate(coord).first;
  auto s = probe.style;
  s[coord] += delta;
  return cps(models_.generator.synthesize_from(layer, cache->states[layer], s));
}

// --- config ----------------------------------------------------------------------------------------

void SearchConfig::validate() const {
  if (!(perturb_factor > 0)) throw std::invalid_argument("search.perturb_factor must be > 0");
  if (!(cp_threshold > 0 && cp_threshold < 1))
    throw std::invalid_argument("search.cp_threshold must lie in (0, 1)");
  if (images_per_class < 1) throw std::invalid_argument("search.images_per_class must be >= 1");
  if (skip_layers < 0) throw std::invalid_argument("search.skip_layers must be >= 0");
  if (top_k < 0) throw std::invalid_argument("search.top_k must be >= 0");
  if (!(selection_x > 0)) throw std::invalid_argument("search.selection_x must be > 0");
  if (target_attribute_count < 1)
    throw std::invalid_argument("search.target_attribute_count must be >= 1");
}

void to_json(nlohmann::json& j, const SearchConfig& c) {
  j = {{"perturb_factor", c.perturb_factor},
       {"cp_threshold", c.cp_threshold},
       {"images_per_class", c.images_per_class},
       {"skip_layers", c.skip_layers},
       {"top_k", c.top_k},
       {"selection_x", c.selection_x},
       {"target_attribute_count", c.target_attribute_count},
       {"tune_threshold", c.tune_threshold},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SearchConfig& c) {
  c.perturb_factor = j.value("perturb_factor", c.perturb_factor);
  c.cp_threshold = j.value("cp_threshold", c.cp_threshold);
  c.images_per_class = j.value("images_per_class", c.images_per_class);
  c.skip_layers = j.value("skip_layers", c.skip_layers);
  c.top_k = j.value("top_k", c.top_k);
  c.selection_x = j.value("selection_x", c.selection_x);
  c.target_attribute_count = j.value("target_attribute_count", c.target_attribute_count);
  c.tune_threshold = j.value("tune_threshold", c.tune_threshold);
  c.seed = j.value("seed", c.seed);
}

// --- statistics and single counterfactuals --------------------------------------------------------

CoordinateStats coordinate_stats(const Explainee& ex, const std::vector<synth::Image>& images) {
  if (images.size() < 2)
    throw std::invalid_argument("coordinate statistics need at least 2 images, got " +
                                std::to_string(images.size()));
  const std::size_t S = ex.layout().size();
  CoordinateStats st;
  st.count = images.size();
  st.mean.assign(S, 0.0);
  st.sigma.assign(S, 0.0);
  std::vector<std::vector<float>> styles;
  styles.reserve(images.size());
  for (const auto& img : images) {
    styles.push_back(ex.style_of(img));
    if (styles.back().size() != S) throw std::logic_error("style vector does not match layout");
  }
  const double n = static_cast<double>(images.size());
  for (const auto& s : styles)
    for (std::size_t i = 0; i < S; ++i) st.mean[i] += s[i];
  for (auto& m : st.mean) m /= n;
  for (const auto& s : styles)
    for (std::size_t i = 0; i < S; ++i) {
      const double d = s[i] - st.mean[i];
      st.sigma[i] += d * d;
    }
  for (auto& v : st.sigma) v = std::sqrt(v / n);
  return st;
}

std::size_t first_searchable(const sx::StyleSpaceLayout& layout, int skip_layers) {
  if (skip_layers >= layout.num_layers())
    throw std::invalid_argument("skip_layers (" + std::to_string(skip_layers) +
                                ") leaves no searchable layers out of " +
                                std::to_string(layout.num_layers()));
  return skip_layers <= 0 ? 0 : layout.offset(skip_layers);
}

std::vector<std::size_t> searchable_coords(const sx::StyleSpaceLayout& layout,
                                           const CoordinateStats& stats, int skip_layers) {
  if (stats.sigma.size() != layout.size())
    throw std::invalid_argument("coordinate statistics do not match the layout");
  std::vector<std::size_t> out;
  for (std::size_t f = first_searchable(layout, skip_layers); f < layout.size(); ++f)
    if (stats.sigma[f] > 0) out.push_back(f);
  return out;
}

Counterfactual perturbed_counterfactual(const Explainee& ex, const synth::Image& image,
                                        std::size_t coord, double signed_delta) {
  if (coord >= ex.layout().size())
    throw std::out_of_range("coordinate " + std::to_string(coord) + " outside the style space");
  const auto s = ex.style_of(image);
  auto edited = s;
  edited[coord] += static_cast<float>(signed_delta);
  Counterfactual cf;
  cf.base = ex.render(s);
  cf.edited = ex.render(edited);
  cf.cp_before = ex.cps(cf.base);
  cf.cp_after = ex.cps(cf.edited);
  return cf;
}

std::vector<RankedCoord> per_image_topk(const Explainee& ex, const synth::Image& image,
                                        const CoordinateStats& stats, const SearchConfig& config) {
  if (config.top_k <= 0) return {};
  const auto coords = searchable_coords(ex.layout(), stats, config.skip_layers);
  const auto probe = ex.probe(image);
  std::vector<RankedCoord> ranked;
  ranked.reserve(coords.size());
  for (std::size_t f : coords) {
    const float delta = static_cast<float>(config.perturb_factor * stats.sigma[f]);
    const double up = std::abs(ex.edited_cps(probe, f, delta)[0] - probe.base_cp[0]);
    const double down = std::abs(ex.edited_cps(probe, f, -delta)[0] - probe.base_cp[0]);
    ranked.push_back({f, down > up ? -1 : 1, std::max(up, down)});
  }
  std::sort(ranked.begin(), ranked.end(), [](const RankedCoord& a, const RankedCoord& b) {
    if (a.abs_dcp != b.abs_dcp) return a.abs_dcp > b.abs_dcp;
    return a.coord < b.coord;
  });
  if (ranked.size() > static_cast<std::size_t>(config.top_k)) ranked.resize(config.top_k);
  return ranked;
}

// --- class-level table --------------------------------------------------------------------------------

double AttributeEffect::canonical_dcp(std::size_t head) const {
  return heads.at(head).mean_dcp[direction > 0 ? kPlus : kMinus];
}

const AttributeEffect* EffectTable::find(std::size_t coord) const {
  const auto it = std::lower_bound(entries.begin(), entries.end(), coord,
                                   [](const AttributeEffect& e, std::size_t c) { return e.coord < c; });
  return it != entries.end() && it->coord == coord ? &*it : nullptr;
}

EffectTable class_effect_table(const Explainee& ex,
                               const std::array<std::vector<synth::Image>, 2>& images_by_class,
                               const CoordinateStats& stats, const SearchConfig& config) {
  config.validate();
  for (int c = 0; c < 2; ++c)
    if (images_by_class[c].empty())
      throw std::invalid_argument("class " + std::to_string(c) + " has no images");
  const auto& layout = ex.layout();
  const auto coords = searchable_coords(layout, stats, config.skip_layers);
  const std::size_t H = ex.heads().size();
  const std::size_t N = coords.size();

  // sums[((coord * H + head) * 2 + class) * 2 + dir], reduced in image order
  std::vector<double> sums(N * H * 4, 0.0), exceed(N * H * 4, 0.0);
  auto idx = [H](std::size_t k, std::size_t h, int c, int d) { return ((k * H + h) * 2 + c) * 2 + d; };
  std::size_t done = 0;
  const std::size_t total = images_by_class[0].size() + images_by_class[1].size();
  for (int c = 0; c < 2; ++c) {
    for (const auto& img : images_by_class[c]) {
      const auto probe = ex.probe(img);
      for (std::size_t k = 0; k < N; ++k) {
        const std::size_t f = coords[k];
        const float delta = static_cast<float>(config.perturb_factor * stats.sigma[f]);
        for (int d = 0; d < 2; ++d) {
          const auto cp = ex.edited_cps(probe, f, d == kPlus ? delta : -delta);
          for (std::size_t h = 0; h < H; ++h) {
            const double dcp = cp[h] - probe.base_cp[h];
            sums[idx(k, h, c, d)] += dcp;
            if (std::abs(dcp) > config.cp_threshold) exceed[idx(k, h, c, d)] += 1.0;
          }
        }
      }
      if (++done % 50 == 0 || done == total)
        spdlog::info("attribute search: {}/{} images", done, total);
    }
  }

  EffectTable table;
  table.heads = ex.heads();
  table.config = config;
  table.class_sizes = {images_by_class[0].size(), images_by_class[1].size()};
  const double n0 = static_cast<double>(table.class_sizes[0]);
  const double n1 = static_cast<double>(table.class_sizes[1]);
  for (std::size_t k = 0; k < N; ++k) {
    AttributeEffect e;
    e.coord = coords[k];
    std::tie(e.layer, e.channel) = layout.locate(e.coord);
    e.sigma = stats.sigma[e.coord];
    for (std::size_t h = 0; h < H; ++h) {
      HeadEffect he;
      he.head = table.heads[h];
      for (int c = 0; c < 2; ++c)
        for (int d = 0; d < 2; ++d) {
          const double n = c == 0 ? n0 : n1;
          he.by_class[c][d] = {sums[idx(k, h, c, d)] / n, exceed[idx(k, h, c, d)] / n};
        }
      for (int d = 0; d < 2; ++d)
        he.mean_dcp[d] = (sums[idx(k, h, 0, d)] + sums[idx(k, h, 1, d)]) / (n0 + n1);
      e.heads.push_back(std::move(he));
    }
    const auto& prim = e.heads.front();
    e.direction = (prim.mean_dcp[kMinus] > 0 && prim.mean_dcp[kMinus] > prim.mean_dcp[kPlus]) ? -1 : 1;
    const int d = e.direction > 0 ? kPlus : kMinus;
    for (int c = 0; c < 2; ++c) e.p[c] = 100.0 * prim.by_class[c][d].exceed;
    for (std::size_t h = 1; h < H; ++h) e.cross.emplace_back(table.heads[h], e.canonical_dcp(h));
    table.entries.push_back(std::move(e));
  }
  return table;
}

namespace {

int sgn(double v) { return (v > 0) - (v < 0); }

}  // namespace

bool is_consistent(const AttributeEffect& e) {
  const auto& bc = e.primary().by_class;
  const int p0 = sgn(bc[0][kPlus].mean_dcp), m0 = sgn(bc[0][kMinus].mean_dcp);
  const int p1 = sgn(bc[1][kPlus].mean_dcp), m1 = sgn(bc[1][kMinus].mean_dcp);
  if (p0 == 0 || p1 == 0 || m0 == 0 || m1 == 0) return false;
  return p0 == -m0 && p1 == -m1 && p0 == p1;
}

EffectTable consistency_filter(const EffectTable& table) {
  EffectTable out = table;
  out.entries.clear();
  for (const auto& e : table.entries)
    if (is_consistent(e)) out.entries.push_back(e);
  return out;
}

bool selection_predicate(const std::array<double, 2>& p, double x) {
  return (p[0] > x && p[1] > x) || p[0] > 2 * x || p[1] > 2 * x;
}

std::vector<std::size_t> select_attributes(const EffectTable& table, double x) {
  if (!(x > 0)) throw std::invalid_argument("selection threshold X must be > 0");
  std::vector<std::size_t> out;
  for (const auto& e : table.entries)
    if (selection_predicate(e.p, x)) out.push_back(e.coord);
  return out;
}

ThresholdChoice tune_selection_threshold(const EffectTable& table, std::size_t target_count) {
  if (table.entries.empty()) throw std::invalid_argument("cannot tune X on an empty table");
  constexpr double kMinX = 1e-9;
  auto count = [&](double x) { return select_attributes(table, x).size(); };
  ThresholdChoice choice;
  if (count(kMinX) < target_count) {
    choice.x = kMinX;
    choice.count = count(kMinX);
    spdlog::warn("only {} attributes pass even at X -> 0 (target {})", choice.count, target_count);
    return choice;
  }
  // count is non-increasing in X; keep lo feasible and hi infeasible.
  double lo = kMinX, hi = 100.0;
  if (count(hi) >= target_count) lo = hi;
  for (int it = 0; it < 200 && hi - lo > 1e-9; ++it) {
    const double mid = 0.5 * (lo + hi);
    (count(mid) >= target_count ? lo : hi) = mid;
  }
  choice.x = lo;
  choice.count = count(lo);
  choice.reached = true;
  return choice;
}

std::vector<CrossEffect> confounder_cross_effects(const Explainee& ex, const EffectTable& table,
                                                  const std::vector<std::size_t>& selected,
                                                  const std::vector<synth::Image>& images,
                                                  const CoordinateStats& stats,
                                                  const SearchConfig& config) {
  const std::size_t H = ex.heads().size();
  if (H < 2) return {};
  if (images.empty()) throw std::invalid_argument("cross effects need at least one image");
  std::vector<const AttributeEffect*> effects;
  for (std::size_t f : selected) {
    const auto* e = table.find(f);
    if (!e) throw std::invalid_argument("coordinate " + std::to_string(f) + " is not in the table");
    effects.push_back(e);
  }
  std::vector<std::vector<double>> sums(selected.size(), std::vector<double>(H, 0.0));
  for (const auto& img : images) {
    const auto probe = ex.probe(img);
    for (std::size_t a = 0; a < selected.size(); ++a) {
      const float delta = static_cast<float>(effects[a]->direction * config.perturb_factor *
                                             stats.sigma[selected[a]]);
      const auto cp = ex.edited_cps(probe, selected[a], delta);
      for (std::size_t h = 1; h < H; ++h) sums[a][h] += cp[h] - probe.base_cp[h];
    }
  }
  std::vector<CrossEffect> out;
  for (std::size_t a = 0; a < selected.size(); ++a) {
    CrossEffect ce;
    ce.coord = selected[a];
    for (std::size_t h = 1; h < H; ++h)
      ce.heads.emplace_back(ex.heads()[h], sums[a][h] / static_cast<double>(images.size()));
    std::stable_sort(ce.heads.begin(), ce.heads.end(),
                     [](const auto& x, const auto& y) { return std::abs(x.second) > std::abs(y.second); });
    out.push_back(std::move(ce));
  }
  return out;
}

// --- serialization ------------------------------------------------------------------------------------

std::string format_number(double v) {
  if (v == 0) return "0";
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string effect_csv(const std::vector<AttributeEffect>& entries) {
  std::ostringstream out;
  out << kEffectCsvHeader << "\n";
  for (const auto& e : entries) {
    const int d = e.direction > 0 ? kPlus : kMinus;
    for (std::size_t h = 0; h < e.heads.size(); ++h) {
      const auto& he = e.heads[h];
      out << e.coord << ',' << e.layer << ',' << e.channel << ',' << he.head << ','
          << format_number(100.0 * he.by_class[0][d].exceed) << ','
          << format_number(100.0 * he.by_class[1][d].exceed) << ','
          << format_number(he.mean_dcp[kPlus]) << ',' << format_number(he.mean_dcp[kMinus]) << ','
          << format_number(e.canonical_dcp(h)) << "\n";
    }
  }
  return out.str();
}

void to_json(nlohmann::json& j, const AttributeEffect& e) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : e.heads) {
    nlohmann::json by_class = nlohmann::json::array();
    for (int c = 0; c < 2; ++c)
      by_class.push_back({{"plus", {{"mean_dcp", h.by_class[c][kPlus].mean_dcp},
                                    {"exceed", h.by_class[c][kPlus].exceed}}},
                          {"minus", {{"mean_dcp", h.by_class[c][kMinus].mean_dcp},
                                     {"exceed", h.by_class[c][kMinus].exceed}}}});
    heads.push_back({{"head", h.head},
                     {"by_class", by_class},
                     {"mean_dcp_plus", h.mean_dcp[kPlus]},
                     {"mean_dcp_minus", h.mean_dcp[kMinus]}});
  }
  nlohmann::json cross = nlohmann::json::array();
  for (const auto& [name, v] : e.cross) cross.push_back({{"head", name}, {"mean_dcp", v}});
  j = {{"coord", e.coord},     {"layer", e.layer}, {"channel", e.channel},
       {"sigma", e.sigma},     {"direction", e.direction},
       {"P", {e.p[0], e.p[1]}}, {"heads", heads},  {"cross", cross}};
}

void from_json(const nlohmann::json& j, AttributeEffect& e) {
  e.coord = j.at("coord").get<std::size_t>();
  e.layer = j.at("layer").get<int>();
  e.channel = j.at("channel").get<int>();
  e.sigma = j.at("sigma").get<double>();
  e.direction = j.at("direction").get<int>();
  e.p = {j.at("P").at(0).get<double>(), j.at("P").at(1).get<double>()};
  e.heads.clear();
  for (const auto& hj : j.at("heads")) {
    HeadEffect h;
    h.head = hj.at("head").get<std::string>();
    for (int c = 0; c < 2; ++c) {
      const auto& bc = hj.at("by_class").at(c);
      h.by_class[c][kPlus] = {bc.at("plus").at("mean_dcp").get<double>(),
                              bc.at("plus").at("exceed").get<double>()};
      h.by_class[c][kMinus] = {bc.at("minus").at("mean_dcp").get<double>(),
                               bc.at("minus").at("exceed").get<double>()};
    }
    h.mean_dcp = {hj.at("mean_dcp_plus").get<double>(), hj.at("mean_dcp_minus").get<double>()};
    e.heads.push_back(std::move(h));
  }
  e.cross.clear();
  for (const auto& cj : j.at("cross"))
    e.cross.emplace_back(cj.at("head").get<std::string>(), cj.at("mean_dcp").get<double>());
}

void to_json(nlohmann::json& j, const EffectTable& t) {
  j = {{"heads", t.heads},
       {"class_sizes", {t.class_sizes[0], t.class_sizes[1]}},
       {"config", t.config},
       {"provenance", t.provenance},
       {"entries", t.entries}};
}

void from_json(const nlohmann::json& j, EffectTable& t) {
  t.heads = j.at("heads").get<std::vector<std::string>>();
  t.class_sizes = {j.at("class_sizes").at(0).get<std::size_t>(),
                   j.at("class_sizes").at(1).get<std::size_t>()};
  t.config = j.at("config").get<SearchConfig>();
  t.provenance = j.value("provenance", nlohmann::json::object());
  t.entries = j.at("entries").get<std::vector<AttributeEffect>>();
}

}  // namespace stylexlab::attr
