#include "stylexlab/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "stylexlab/image_io.hpp"
#include "stylexlab/rng.hpp"

namespace stylexlab::synth {
namespace {

// Channel intensities in [0, 1] before mapping to [-1, 1]. Disc, vessel and
// spot colors share R - G = 0.3 so the disc footprint is measurable by that
// difference alone; the ring only lives in the blue channel.
constexpr double kBgBase = 0.08, kBgSpan = 0.42;
constexpr double kDisc[3] = {0.78, 0.48, 0.25};
constexpr double kVessel[3] = {0.48, 0.18, 0.15};
constexpr double kSpot[3] = {0.98, 0.68, 0.55};
constexpr double kRingBase = 0.06, kRingSpan = 0.88;
constexpr double kRingWidth = 3.0;
constexpr double kSpotRadius = 1.3;
constexpr double kSpotSeparation = 4.0;
constexpr double kTextureSigma = 0.012;
constexpr int kSuper = 4;

constexpr std::array<Range, kNumFactors> kDomain{Range{0.0, 1.0}, Range{0.2, 0.45},
                                                 Range{1.0, 7.0}, Range{0.0, 12.0},
                                                 Range{0.0, 1.0}};

struct Scene {
  double cx = 0, cy = 0, radius = 0;
  double half_width = 0;
  double spot_radius = kSpotRadius, spot_separation = kSpotSeparation;
  double amp = 0, wavelength = 1, phase = 0;
  double offsets[2] = {0, 0};
  std::vector<std::array<double, 2>> spots;
};

double vessel_center(const Scene& s, int k, double px) {
  return s.cy + s.offsets[k] +
         s.amp * std::sin(2.0 * std::numbers::pi * (px - s.cx) / s.wavelength + s.phase);
}

double vessel_slope(const Scene& s, double px) {
  const double w = 2.0 * std::numbers::pi / s.wavelength;
  return s.amp * w * std::cos(w * (px - s.cx) + s.phase);
}

Scene build_scene(const FactorVector& f, int res, std::uint64_t noise_seed) {
  Scene s;
  s.cx = s.cy = res / 2.0;
  s.radius = f.disc_radius * res;
  s.half_width = 0.5 * f.vessel_width;
  CounterRng rng(noise_seed, 0, 1);
  s.amp = rng.uniform(1.0, 3.0);
  s.wavelength = rng.uniform(30.0, 50.0);
  s.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double jitter = rng.uniform(-1.0, 1.0);
  s.offsets[0] = -0.42 * s.radius + jitter;
  s.offsets[1] = 0.42 * s.radius + jitter;

  // Spot geometry is specified at 64 px and shrinks with smaller images.
  const double geo = std::min(1.0, res / 64.0);
  s.spot_radius = kSpotRadius * geo;
  s.spot_separation = kSpotSeparation * geo;
  const double place_r = s.radius - 2.2 * geo;
  for (int attempt = 0; attempt < 64 && static_cast<int>(s.spots.size()) < f.spot_count; ++attempt) {
    s.spots.clear();
    CounterRng srng(noise_seed, static_cast<std::uint64_t>(attempt), 2);
    for (int tries = 0; tries < 20000 && static_cast<int>(s.spots.size()) < f.spot_count; ++tries) {
      const double x = srng.uniform(-place_r, place_r);
      const double y = srng.uniform(-place_r, place_r);
      if (x * x + y * y > place_r * place_r) continue;
      bool ok = true;
      for (const auto& p : s.spots) {
        const double dx = p[0] - (s.cx + x), dy = p[1] - (s.cy + y);
        if (dx * dx + dy * dy < s.spot_separation * s.spot_separation) {
          ok = false;
          break;
        }
      }
      if (ok) s.spots.push_back({s.cx + x, s.cy + y});
    }
  }
  if (static_cast<int>(s.spots.size()) < f.spot_count)
    throw std::runtime_error("could not place " + std::to_string(f.spot_count) + " spots");
  return s;
}

void sample_color(const Scene& s, double bg, double ring, double px, double py, double out[3]) {
  const double dx = px - s.cx, dy = py - s.cy;
  const double d = std::sqrt(dx * dx + dy * dy);
  if (d < s.radius) {
    for (const auto& p : s.spots) {
      const double sx = px - p[0], sy = py - p[1];
      if (sx * sx + sy * sy < s.spot_radius * s.spot_radius) {
        std::copy(kSpot, kSpot + 3, out);
        return;
      }
    }
    const double slope = vessel_slope(s, px);
    const double reach = s.half_width * std::sqrt(1.0 + slope * slope);
    for (int k = 0; k < 2; ++k) {
      if (std::abs(py - vessel_center(s, k, px)) < reach) {
        std::copy(kVessel, kVessel + 3, out);
        return;
      }
    }
    std::copy(kDisc, kDisc + 3, out);
    return;
  }
  const double v = kBgBase + kBgSpan * bg;
  out[0] = v;
  out[1] = v;
  out[2] = (s.radius > 0 && d < s.radius + kRingWidth) ? kRingBase + kRingSpan * ring : v;
}

}  // namespace

std::string_view factor_name(Factor f) {
  switch (f) {
    case Factor::kBgLevel: return "bg_level";
    case Factor::kDiscRadius: return "disc_radius";
    case Factor::kVesselWidth: return "vessel_width";
    case Factor::kSpotCount: return "spot_count";
    case Factor::kRingIntensity: return "ring_intensity";
  }
  return "unknown";
}

Factor factor_from_name(std::string_view name) {
  for (Factor f : kAllFactors)
    if (factor_name(f) == name) return f;
  throw std::invalid_argument("unknown factor: " + std::string(name));
}

double FactorVector::get(Factor f) const {
  switch (f) {
    case Factor::kBgLevel: return bg_level;
    case Factor::kDiscRadius: return disc_radius;
    case Factor::kVesselWidth: return vessel_width;
    case Factor::kSpotCount: return spot_count;
    case Factor::kRingIntensity: return ring_intensity;
  }
  return 0.0;
}

void FactorVector::set(Factor f, double value) {
  switch (f) {
    case Factor::kBgLevel: bg_level = value; break;
    case Factor::kDiscRadius: disc_radius = value; break;
    case Factor::kVesselWidth: vessel_width = value; break;
    case Factor::kSpotCount: spot_count = static_cast<int>(std::lround(value)); break;
    case Factor::kRingIntensity: ring_intensity = value; break;
  }
}

void SynthSpec::validate() const {
  if (resolution < 32 || (resolution & (resolution - 1)) != 0)
    throw std::invalid_argument("synth resolution must be a power of two >= 32");
  for (Factor f : kAllFactors) {
    const Range& r = ranges[f];
    const Range& dom = kDomain[static_cast<int>(f)];
    if (!(r.lo <= r.hi) || r.lo < dom.lo || r.hi > dom.hi)
      throw std::invalid_argument("factor range out of domain: " + std::string(factor_name(f)));
  }
  if (label_rule.factor == confound_rule.factor)
    throw std::invalid_argument("causal factor and confound factor must differ");
  if (!(std::abs(confound_rule.rho) <= 1.0)) throw std::invalid_argument("|rho| must be <= 1");
  std::set<std::string> names{label_rule.head};
  for (const auto& h : confounder_heads)
    if (!names.insert(h.head).second) throw std::invalid_argument("duplicate head: " + h.head);
}

std::vector<std::string> SynthSpec::head_names() const {
  std::vector<std::string> out{label_rule.head};
  for (const auto& h : confounder_heads) out.push_back(h.head);
  return out;
}

namespace {
nlohmann::json rule_json(const ThresholdRule& r) {
  return {{"head", r.head}, {"factor", factor_name(r.factor)}, {"threshold", r.threshold}};
}
ThresholdRule rule_from(const nlohmann::json& j) {
  ThresholdRule r;
  r.head = j.at("head").get<std::string>();
  r.factor = factor_from_name(j.at("factor").get<std::string>());
  r.threshold = j.at("threshold").get<double>();
  return r;
}
}  // namespace

void to_json(nlohmann::json& j, const SynthSpec& s) {
  nlohmann::json ranges = nlohmann::json::object();
  for (Factor f : kAllFactors) ranges[std::string(factor_name(f))] = {s.ranges[f].lo, s.ranges[f].hi};
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : s.confounder_heads) heads.push_back(rule_json(h));
  j = {{"resolution", s.resolution},
       {"factor_ranges", ranges},
       {"label_rule", rule_json(s.label_rule)},
       {"confound_rule",
        {{"factor", factor_name(s.confound_rule.factor)}, {"rho", s.confound_rule.rho}}},
       {"confounder_heads", heads},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SynthSpec& s) {
  s = SynthSpec{};
  s.resolution = j.value("resolution", s.resolution);
  if (j.contains("factor_ranges")) {
    for (const auto& [name, r] : j.at("factor_ranges").items()) {
      Range& dst = s.ranges[factor_from_name(name)];
      dst.lo = r.at(0).get<double>();
      dst.hi = r.at(1).get<double>();
    }
  }
  if (j.contains("label_rule")) s.label_rule = rule_from(j.at("label_rule"));
  if (j.contains("confound_rule")) {
    const auto& c = j.at("confound_rule");
    s.confound_rule.factor = factor_from_name(c.at("factor").get<std::string>());
    s.confound_rule.rho = c.at("rho").get<double>();
  }
  if (j.contains("confounder_heads")) {
    s.confounder_heads.clear();
    for (const auto& h : j.at("confounder_heads")) s.confounder_heads.push_back(rule_from(h));
  }
  s.seed = j.value("seed", s.seed);
}

void check_factors(const FactorVector& f, const SynthSpec& spec) {
  for (Factor k : kAllFactors) {
    const double v = f.get(k);
    const Range& r = spec.ranges[k];
    if (!(v >= r.lo && v <= r.hi)) {
      std::ostringstream msg;
      msg << "factor " << factor_name(k) << " = " << v << " outside [" << r.lo << ", " << r.hi
          << "]";
      throw RangeError(k, msg.str());
    }
  }
}

Image render_unchecked(const FactorVector& factors, int resolution, std::uint64_t noise_seed) {
  const Scene scene = build_scene(factors, resolution, noise_seed);
  Image img(3, resolution, resolution);
  std::mt19937_64 texture(CounterRng(noise_seed, 0, 3)());
  std::normal_distribution<double> noise(0.0, kTextureSigma);
  for (int y = 0; y < resolution; ++y) {
    for (int x = 0; x < resolution; ++x) {
      double acc[3] = {0, 0, 0};
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          double c[3];
          sample_color(scene, factors.bg_level, factors.ring_intensity, x + (sx + 0.5) / kSuper,
                       y + (sy + 0.5) / kSuper, c);
          for (int k = 0; k < 3; ++k) acc[k] += c[k];
        }
      for (int k = 0; k < 3; ++k) {
        const double v = std::clamp(acc[k] / (kSuper * kSuper) + noise(texture), 0.02, 0.98);
        img.at(k, y, x) = static_cast<float>(2.0 * v - 1.0);
      }
    }
  }
  return img;
}

Image render_synthetic(const FactorVector& factors, const SynthSpec& spec,
                       std::uint64_t noise_seed) {
  check_factors(factors, spec);
  return render_unchecked(factors, spec.resolution, noise_seed);
}

FactorMeasurement measure_factors(const Image& pixels, const SynthSpec& spec) {
  FactorMeasurement m;
  const int res = spec.resolution;
  if (pixels.c != 3 || pixels.h != res || pixels.w != res)
    throw std::invalid_argument("measure_factors: image does not match spec resolution");
  auto v = [&](int c, int y, int x) { return 0.5 * (pixels.at(c, y, x) + 1.0); };

  std::size_t saturated = 0;
  for (float p : pixels.data)
    if (std::abs(p) > 0.99f) ++saturated;
  if (saturated > pixels.size() * 95 / 100) return m;

  const double cx = res / 2.0, cy = res / 2.0;
  auto dist = [&](int y, int x) { return std::hypot(x + 0.5 - cx, y + 0.5 - cy); };

  // Disc footprint from the red-minus-green excess (fractional coverage).
  double area = 0.0;
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      const double cov = (v(0, y, x) - v(1, y, x)) / 0.3;
      if (cov > 0.15) area += cov;
    }
  const double radius_px = std::sqrt(area / std::numbers::pi);
  m.estimate[static_cast<int>(Factor::kDiscRadius)] = radius_px / res;
  m.valid[static_cast<int>(Factor::kDiscRadius)] = area > 0.0;

  // Background: gray level well outside the disc and ring.
  double bg_sum = 0.0;
  int bg_n = 0;
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x)
      if (dist(y, x) > radius_px + kRingWidth + 1.5) {
        bg_sum += v(1, y, x);
        ++bg_n;
      }
  if (bg_n >= 16) {
    m.estimate[static_cast<int>(Factor::kBgLevel)] = (bg_sum / bg_n - kBgBase) / kBgSpan;
    m.valid[static_cast<int>(Factor::kBgLevel)] = true;
  }

  // Ring: blue level inside the band just outside the disc edge.
  double ring_sum = 0.0;
  int ring_n = 0;
  if (radius_px > 0.0) {
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        const double d = dist(y, x);
        if (d > radius_px + 0.9 && d < radius_px + kRingWidth - 0.9) {
          ring_sum += v(2, y, x);
          ++ring_n;
        }
      }
  }
  if (ring_n >= 8) {
    m.estimate[static_cast<int>(Factor::kRingIntensity)] =
        (ring_sum / ring_n - kRingBase) / kRingSpan;
    m.valid[static_cast<int>(Factor::kRingIntensity)] = true;
  }

  // Spots: 8-connected components of bright-green pixels.
  {
    const double thr = 0.5 * (kDisc[1] + kSpot[1]);
    std::vector<int> mask(static_cast<std::size_t>(res) * res, 0);
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) mask[y * res + x] = v(1, y, x) > thr ? 1 : 0;
    int count = 0;
    std::vector<int> stack;
    for (int i = 0; i < res * res; ++i) {
      if (mask[i] != 1) continue;
      ++count;
      mask[i] = 2;
      stack.push_back(i);
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        const int yy = cur / res, xx = cur % res;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = yy + dy, nx = xx + dx;
            if (ny < 0 || nx < 0 || ny >= res || nx >= res) continue;
            int& cell = mask[ny * res + nx];
            if (cell == 1) {
              cell = 2;
              stack.push_back(ny * res + nx);
            }
          }
      }
    }
    m.estimate[static_cast<int>(Factor::kSpotCount)] = count;
    m.valid[static_cast<int>(Factor::kSpotCount)] = true;
  }

  // Vessel width: median over central columns of the summed vessel coverage
  // of each vertical crossing.
  if (radius_px > 4.0) {
    // Inside the disc each pixel is a convex mix of disc, vessel and spot
    // colors; G and B pin down the weights.
    const double a00 = kDisc[1] - kVessel[1], a01 = kSpot[1] - kVessel[1];
    const double a10 = kDisc[2] - kVessel[2], a11 = kSpot[2] - kVessel[2];
    const double det = a00 * a11 - a01 * a10;
    std::vector<double> w_vessel(static_cast<std::size_t>(res) * res, 0.0);
    std::vector<char> near_spot(static_cast<std::size_t>(res) * res, 0);
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        const double g = v(1, y, x) - kVessel[1], b = v(2, y, x) - kVessel[2];
        const double wd = (a11 * g - a01 * b) / det;
        const double ws = (a00 * b - a10 * g) / det;
        w_vessel[y * res + x] = 1.0 - wd - ws;
        if (ws <= 0.2 || dist(y, x) > radius_px) continue;
        for (int dy = -2; dy <= 2; ++dy)
          for (int dx = -2; dx <= 2; ++dx) {
            const int ny = y + dy, nx = x + dx;
            if (ny >= 0 && nx >= 0 && ny < res && nx < res) near_spot[ny * res + nx] = 1;
          }
      }
    std::vector<double> runs, tainted_runs;
    for (int x = 0; x < res; ++x) {
      if (std::abs(x + 0.5 - cx) > 0.6 * radius_px) continue;
      double run = 0.0, peak = 0.0;
      bool tainted = false;
      auto flush = [&] {
        if (run > 0.4 && peak > 0.35) (tainted ? tainted_runs : runs).push_back(run);
        run = 0.0;
        peak = 0.0;
        tainted = false;
      };
      for (int y = 0; y < res; ++y) {
        const bool inside = dist(y, x) < radius_px - 1.5;
        const double cov = w_vessel[y * res + x];
        if (inside && cov > 0.1) {
          run += std::min(cov, 1.2);
          peak = std::max(peak, cov);
          tainted = tainted || near_spot[y * res + x];
        } else {
          if (run > 0.0 && (!inside || near_spot[y * res + x])) tainted = true;
          flush();
        }
      }
      flush();
    }
    if (runs.empty()) runs = tainted_runs;
    if (!runs.empty()) {
      std::nth_element(runs.begin(), runs.begin() + runs.size() / 2, runs.end());
      m.estimate[static_cast<int>(Factor::kVesselWidth)] = runs[runs.size() / 2];
      m.valid[static_cast<int>(Factor::kVesselWidth)] = true;
    }
  }
  return m;
}

double positive_rate(const SynthSpec& spec) {
  const Range& r = spec.ranges[spec.label_rule.factor];
  const double thr = spec.label_rule.threshold;
  if (spec.label_rule.factor == Factor::kSpotCount) {
    const int lo = static_cast<int>(std::ceil(r.lo)), hi = static_cast<int>(std::floor(r.hi));
    int pos = 0;
    for (int k = lo; k <= hi; ++k) pos += k > thr ? 1 : 0;
    return hi >= lo ? static_cast<double>(pos) / (hi - lo + 1) : 0.0;
  }
  if (r.width() <= 0.0) return r.lo > thr ? 1.0 : 0.0;
  return std::clamp((r.hi - thr) / r.width(), 0.0, 1.0);
}

double confound_mixing_weight(double rho, double p) {
  const double a = std::abs(rho);
  if (a >= 1.0) return 1.0;
  const double var = p * (1.0 - p);
  if (a == 0.0 || var <= 0.0) return 0.0;
  return a / (a + std::sqrt(12.0 * var * (1.0 - a * a)));
}

std::vector<LabeledImage> sample_dataset(const SynthSpec& spec, std::size_t n,
                                         std::uint64_t seed) {
  spec.validate();
  const double mix = confound_mixing_weight(spec.confound_rule.rho, positive_rate(spec));
  std::vector<LabeledImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng(seed, i, 10);
    FactorVector f;
    for (Factor k : kAllFactors) {
      const Range& r = spec.ranges[k];
      if (k == Factor::kSpotCount) {
        const int lo = static_cast<int>(std::ceil(r.lo)), hi = static_cast<int>(std::floor(r.hi));
        f.spot_count = lo + static_cast<int>(rng.uniform() * (hi - lo + 1));
      } else {
        f.set(k, rng.uniform(r.lo, r.hi));
      }
    }
    const int label = spec.label_rule.label_for(f);
    if (mix > 0.0) {
      const double target = spec.confound_rule.rho >= 0 ? label : 1 - label;
      const double u = (1.0 - mix) * rng.uniform() + mix * target;
      const Range& r = spec.ranges[spec.confound_rule.factor];
      f.set(spec.confound_rule.factor, r.lo + r.width() * u);
    }
    LabeledImage item;
    item.pixels = render_synthetic(f, spec, CounterRng(seed, i, 11)());
    item.labels[spec.label_rule.head] = label;
    for (const auto& h : spec.confounder_heads) item.labels[h.head] = h.label_for(f);
    char id[32];
    std::snprintf(id, sizeof(id), "synth-%08zu", i);
    item.subject_id = id;
    item.factors = f;
    out.push_back(std::move(item));
  }
  return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

std::vector<LabeledImage> ingest_folder(const std::filesystem::path& image_dir,
                                        const std::filesystem::path& manifest, int resolution) {
  std::ifstream in(manifest);
  if (!in) throw IngestError("cannot open manifest: " + manifest.string(), {});
  std::string line;
  if (!std::getline(in, line)) return {};
  const auto header = split_csv_line(line);
  if (header.size() < 2 || header[0] != "file" || header[1] != "subject_id")
    throw IngestError("manifest header must start with file,subject_id", {line});
  const std::vector<std::string> heads(header.begin() + 2, header.end());

  std::vector<LabeledImage> out;
  std::vector<std::string> bad;
  int row_no = 1;
  while (std::getline(in, line)) {
    ++row_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    const std::string tag = "row " + std::to_string(row_no) + ": " + line;
    if (cells.size() != header.size()) {
      bad.push_back(tag + " (expected " + std::to_string(header.size()) + " columns)");
      continue;
    }
    const auto path = image_dir / cells[0];
    if (!std::filesystem::exists(path)) {
      bad.push_back(tag + " (missing file)");
      continue;
    }
    LabeledImage item;
    item.subject_id = cells[1];
    bool ok = !cells[1].empty();
    for (std::size_t h = 0; h < heads.size(); ++h) {
      const std::string& cell = cells[h + 2];
      if (cell.empty() || cell.find_first_not_of("0123456789") != std::string::npos) {
        bad.push_back(tag + " (head '" + heads[h] + "' unlabeled or not a class index)");
        ok = false;
        break;
      }
      item.labels[heads[h]] = std::stoi(cell);
    }
    if (!ok) continue;
    try {
      item.pixels = io::from_rgb8(io::center_crop_resize(io::read_png(path), resolution));
    } catch (const std::exception& e) {
      bad.push_back(tag + " (" + e.what() + ")");
      continue;
    }
    out.push_back(std::move(item));
  }
  if (!bad.empty()) {
    std::string msg = "manifest has " + std::to_string(bad.size()) + " invalid row(s):";
    for (const auto& b : bad) msg += "\n  " + b;
    throw IngestError(msg, bad);
  }
  return out;
}

Split split_dataset(const std::vector<LabeledImage>& dataset, std::array<double, 3> fractions,
                    std::uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  for (double f : fractions)
    if (!(f >= 0.0)) throw std::invalid_argument("split fractions must be non-negative");
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split fractions must sum to 1");

  std::vector<std::string> subjects;
  for (const auto& item : dataset) subjects.push_back(item.subject_id);
  std::sort(subjects.begin(), subjects.end());
  subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
  std::mt19937_64 rng(seed);
  std::shuffle(subjects.begin(), subjects.end(), rng);

  const std::size_t n = subjects.size();
  const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * n));
  const auto n_tune = std::min(n - std::min(n, n_train),
                               static_cast<std::size_t>(std::llround(fractions[1] * n)));
  std::map<std::string, int> assign;
  for (std::size_t i = 0; i < n; ++i)
    assign[subjects[i]] = i < n_train ? 0 : (i < n_train + n_tune ? 1 : 2);

  Split split;
  for (const auto& item : dataset) {
    switch (assign[item.subject_id]) {
      case 0: split.train.push_back(item); break;
      case 1: split.tune.push_back(item); break;
      default: split.eval.push_back(item); break;
    }
  }
  return split;
}

}  // namespace stylexlab::synth
