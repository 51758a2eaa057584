#include "stylexlab/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "stylexlab/checkpoint.hpp"

namespace stylexlab::report {

// --- strips and attribution ------------------------------------------------------------------

CounterfactualStrip render_strip(const attr::Explainee& ex, const synth::Image& image,
                                 std::string image_id, std::size_t coord,
                                 const std::vector<double>& magnitudes,
                                 const attr::CoordinateStats& stats) {
  if (std::find(magnitudes.begin(), magnitudes.end(), 0.0) == magnitudes.end())
    throw std::invalid_argument("strip magnitudes must include 0 (the reconstruction baseline)");
  if (coord >= ex.layout().size()) throw std::out_of_range("strip coordinate outside the style space");
  auto mags = magnitudes;
  std::sort(mags.begin(), mags.end());
  mags.erase(std::unique(mags.begin(), mags.end()), mags.end());
  const auto s = ex.style_of(image);
  CounterfactualStrip strip;
  strip.image_id = std::move(image_id);
  strip.coord = coord;
  for (double m : mags) {
    Frame f;
    f.magnitude = m;
    if (m == 0.0) {
      f.pixels = ex.render(s);
    } else {
      auto edited = s;
      edited[coord] += static_cast<float>(m * stats.sigma[coord]);
      f.pixels = ex.render(edited);
    }
    f.cps = ex.cps(f.pixels);
    strip.frames.push_back(std::move(f));
  }
  return strip;
}

std::pair<int, double> RecoveryMatrix::dominant(std::size_t row) const {
  const auto& r = normalized.at(row);
  int best = -1;
  double top = -1, second = 0;
  for (std::size_t c = 0; c < r.size(); ++c) {
    const double v = std::abs(r[c]);
    if (v > top) {
      second = std::max(second, top);
      top = v;
      best = static_cast<int>(c);
    } else {
      second = std::max(second, v);
    }
  }
  const double ratio = second > 0 ? top / second : (top > 0 ? INFINITY : 0.0);
  return {best, ratio};
}

RecoveryMatrix factor_attribution(const attr::Explainee& ex,
                                  const std::vector<attr::AttributeEffect>& selected,
                                  const std::vector<synth::Image>& images,
                                  const synth::SynthSpec* spec, const attr::CoordinateStats& stats,
                                  double magnitude) {
  if (!spec)
    throw std::invalid_argument("no oracle: factor attribution needs synthetic data with planted factors");
  if (images.empty()) throw std::invalid_argument("factor attribution needs images");
  RecoveryMatrix m;
  for (auto f : synth::kAllFactors) m.factors.emplace_back(synth::factor_name(f));
  const std::size_t F = m.factors.size();
  std::vector<std::vector<double>> sums(selected.size(), std::vector<double>(F, 0.0));
  std::vector<std::vector<int>> counts(selected.size(), std::vector<int>(F, 0));
  for (const auto& img : images) {
    const auto s = ex.style_of(img);
    const auto base = synth::measure_factors(ex.render(s), *spec);
    for (std::size_t a = 0; a < selected.size(); ++a) {
      const auto& e = selected[a];
      auto edited = s;
      edited.at(e.coord) += static_cast<float>(e.direction * magnitude * stats.sigma.at(e.coord));
      const auto after = synth::measure_factors(ex.render(edited), *spec);
      for (std::size_t f = 0; f < F; ++f) {
        const auto factor = synth::kAllFactors[f];
        if (!base.is_valid(factor) || !after.is_valid(factor)) continue;
        sums[a][f] += after.get(factor) - base.get(factor);
        counts[a][f] += 1;
      }
    }
  }
  for (std::size_t a = 0; a < selected.size(); ++a) {
    m.coords.push_back(selected[a].coord);
    std::vector<double> d(F), n(F);
    for (std::size_t f = 0; f < F; ++f) {
      d[f] = counts[a][f] > 0 ? sums[a][f] / counts[a][f] : 0.0;
      n[f] = d[f] / spec->ranges[synth::kAllFactors[f]].width();
    }
    m.delta.push_back(d);
    m.normalized.push_back(n);
    m.valid_pairs.push_back(counts[a]);
  }
  return m;
}

void to_json(nlohmann::json& j, const RecoveryMatrix& m) {
  j = nlohmann::json::array();
  for (std::size_t a = 0; a < m.coords.size(); ++a) {
    nlohmann::json raw, norm;
    for (std::size_t f = 0; f < m.factors.size(); ++f) {
      raw[m.factors[f]] = m.delta[a][f];
      norm[m.factors[f]] = m.normalized[a][f];
    }
    const auto [col, ratio] = m.dominant(a);
    j.push_back({{"coord", m.coords[a]},
                 {"delta", raw},
                 {"normalized", norm},
                 {"dominant_factor", col >= 0 ? m.factors[col] : ""},
                 {"dominance_ratio", std::isfinite(ratio) ? nlohmann::json(ratio) : nlohmann::json(nullptr)}});
  }
}

std::vector<std::size_t> pick_examples(const attr::Explainee& ex, const attr::AttributeEffect& e,
                                       const std::vector<synth::Image>& candidates,
                                       const attr::CoordinateStats& stats, double factor,
                                       std::size_t n) {
  std::vector<std::pair<double, std::size_t>> scored;
  const float delta = static_cast<float>(e.direction * factor * stats.sigma.at(e.coord));
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto probe = ex.probe(candidates[i]);
    const double d = ex.edited_cps(probe, e.coord, delta)[0] - probe.base_cp[0];
    scored.emplace_back(std::abs(d), i);
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < std::min(n, scored.size()); ++i) out.push_back(scored[i].second);
  return out;
}

// --- GIF ---------------------------------------------------------------------------------------------

namespace {

// 6 x 7 x 6 colour cube; the 4 spare entries stay black.
constexpr int kLevelsR = 6, kLevelsG = 7, kLevelsB = 6;

std::uint8_t quantize(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  const int ri = (r * (kLevelsR - 1) + 127) / 255;
  const int gi = (g * (kLevelsG - 1) + 127) / 255;
  const int bi = (b * (kLevelsB - 1) + 127) / 255;
  return static_cast<std::uint8_t>((ri * kLevelsG + gi) * kLevelsB + bi);
}

std::vector<std::uint8_t> palette() {
  std::vector<std::uint8_t> p(256 * 3, 0);
  for (int r = 0; r < kLevelsR; ++r)
    for (int g = 0; g < kLevelsG; ++g)
      for (int b = 0; b < kLevelsB; ++b) {
        const int i = (r * kLevelsG + g) * kLevelsB + b;
        p[i * 3 + 0] = static_cast<std::uint8_t>(r * 255 / (kLevelsR - 1));
        p[i * 3 + 1] = static_cast<std::uint8_t>(g * 255 / (kLevelsG - 1));
        p[i * 3 + 2] = static_cast<std::uint8_t>(b * 255 / (kLevelsB - 1));
      }
  return p;
}

class BitWriter {
 public:
  void put(int code, int bits) {
    acc_ |= static_cast<std::uint32_t>(code) << nbits_;
    nbits_ += bits;
    while (nbits_ >= 8) {
      bytes.push_back(static_cast<std::uint8_t>(acc_ & 0xff));
      acc_ >>= 8;
      nbits_ -= 8;
    }
  }
  void flush() {
    if (nbits_ > 0) bytes.push_back(static_cast<std::uint8_t>(acc_ & 0xff));
    acc_ = 0;
    nbits_ = 0;
  }
  std::vector<std::uint8_t> bytes;

 private:
  std::uint32_t acc_ = 0;
  int nbits_ = 0;
};

std::vector<std::uint8_t> lzw_encode(const std::vector<std::uint8_t>& indices) {
  constexpr int kMinCodeSize = 8, kClear = 256, kEnd = 257, kMaxCode = 4096;
  std::vector<std::int16_t> table(static_cast<std::size_t>(kMaxCode) * 256, -1);
  BitWriter out;
  int code_size = kMinCodeSize + 1;
  int next = kEnd + 1;
  auto reset = [&] {
    std::fill(table.begin(), table.end(), -1);
    code_size = kMinCodeSize + 1;
    next = kEnd + 1;
  };
  out.put(kClear, code_size);
  if (indices.empty()) {
    out.put(kEnd, code_size);
    out.flush();
    return out.bytes;
  }
  int prefix = indices[0];
  for (std::size_t i = 1; i < indices.size(); ++i) {
    const int k = indices[i];
    const std::size_t key = static_cast<std::size_t>(prefix) * 256 + k;
    if (table[key] >= 0) {
      prefix = table[key];
      continue;
    }
    out.put(prefix, code_size);
    if (next < kMaxCode) {
      table[key] = static_cast<std::int16_t>(next);
      if (next == (1 << code_size) && code_size < 12) ++code_size;
      ++next;
    } else {
      out.put(kClear, code_size);
      reset();
    }
    prefix = k;
  }
  out.put(prefix, code_size);
  out.put(kEnd, code_size);
  out.flush();
  return out.bytes;
}

void put16(std::vector<std::uint8_t>& b, int v) {
  b.push_back(static_cast<std::uint8_t>(v & 0xff));
  b.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
}

}  // namespace

io::Rgb8 upscale(const io::Rgb8& img, int scale) {
  if (scale <= 1) return img;
  io::Rgb8 out{img.width * scale, img.height * scale, {}};
  out.pixels.resize(static_cast<std::size_t>(out.width) * out.height * 3);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < 3; ++c)
        out.pixels[(static_cast<std::size_t>(y) * out.width + x) * 3 + c] =
            img.pixels[(static_cast<std::size_t>(y / scale) * img.width + x / scale) * 3 + c];
  return out;
}

std::vector<std::uint8_t> encode_gif(const std::vector<io::Rgb8>& frames, int delay_cs) {
  if (frames.empty()) throw std::invalid_argument("a GIF needs at least one frame");
  const int w = frames[0].width, h = frames[0].height;
  for (const auto& f : frames)
    if (f.width != w || f.height != h) throw std::invalid_argument("GIF frames differ in size");
  std::vector<std::uint8_t> b{'G', 'I', 'F', '8', '9', 'a'};
  put16(b, w);
  put16(b, h);
  b.push_back(0xF7);  // global table of 256 entries
  b.push_back(0);
  b.push_back(0);
  const auto pal = palette();
  b.insert(b.end(), pal.begin(), pal.end());
  // loop forever
  const char* app = "NETSCAPE2.0";
  b.insert(b.end(), {0x21, 0xFF, 0x0B});
  b.insert(b.end(), app, app + 11);
  b.insert(b.end(), {0x03, 0x01, 0x00, 0x00, 0x00});
  for (const auto& f : frames) {
    b.insert(b.end(), {0x21, 0xF9, 0x04, 0x04});
    put16(b, delay_cs);
    b.insert(b.end(), {0x00, 0x00});
    b.push_back(0x2C);
    put16(b, 0);
    put16(b, 0);
    put16(b, w);
    put16(b, h);
    b.push_back(0x00);
    std::vector<std::uint8_t> idx(static_cast<std::size_t>(w) * h);
    for (std::size_t i = 0; i < idx.size(); ++i)
      idx[i] = quantize(f.pixels[i * 3], f.pixels[i * 3 + 1], f.pixels[i * 3 + 2]);
    const auto data = lzw_encode(idx);
    b.push_back(8);
    for (std::size_t off = 0; off < data.size(); off += 255) {
      const std::size_t n = std::min<std::size_t>(255, data.size() - off);
      b.push_back(static_cast<std::uint8_t>(n));
      b.insert(b.end(), data.begin() + off, data.begin() + off + n);
    }
    b.push_back(0x00);
  }
  b.push_back(0x3B);
  return b;
}

// --- serialization ---------------------------------------------------------------------------------

nlohmann::json entries_to_json(const std::vector<AttributeReportEntry>& entries) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json strips = nlohmann::json::array();
    for (const auto& s : e.strips) {
      nlohmann::json frames = nlohmann::json::array();
      for (const auto& f : s.frames) frames.push_back({{"magnitude", f.magnitude}, {"cps", f.cps}});
      strips.push_back({{"image_id", s.image_id}, {"coord", s.coord}, {"frames", frames}});
    }
    nlohmann::json cross = nlohmann::json::array();
    for (const auto& [h, v] : e.cross) cross.push_back({{"head", h}, {"mean_dcp", v}});
    arr.push_back({{"effect", e.effect}, {"strips", strips}, {"cross", cross}, {"notes", e.notes}});
  }
  return arr;
}

std::vector<AttributeReportEntry> entries_from_json(const nlohmann::json& j) {
  std::vector<AttributeReportEntry> out;
  for (const auto& ej : j) {
    AttributeReportEntry e;
    e.effect = ej.at("effect").get<attr::AttributeEffect>();
    for (const auto& sj : ej.at("strips")) {
      CounterfactualStrip s;
      s.image_id = sj.at("image_id").get<std::string>();
      s.coord = sj.at("coord").get<std::size_t>();
      for (const auto& fj : sj.at("frames")) {
        Frame f;
        f.magnitude = fj.at("magnitude").get<double>();
        f.cps = fj.at("cps").get<std::vector<double>>();
        s.frames.push_back(std::move(f));
      }
      e.strips.push_back(std::move(s));
    }
    for (const auto& cj : ej.at("cross"))
      e.cross.emplace_back(cj.at("head").get<std::string>(), cj.at("mean_dcp").get<double>());
    e.notes = ej.value("notes", std::string());
    out.push_back(std::move(e));
  }
  return out;
}

void emit_tables(const std::vector<AttributeReportEntry>& entries, const std::filesystem::path& dir) {
  if (entries.empty()) throw std::invalid_argument("no attributes to tabulate");
  std::vector<attr::AttributeEffect> effects;
  for (const auto& e : entries) effects.push_back(e.effect);
  ckpt::write_text(dir / "attributes.csv", attr::effect_csv(effects));
  ckpt::write_text(dir / "attributes.json", entries_to_json(entries).dump(2) + "\n");
}

// --- HTML --------------------------------------------------------------------------------------------

std::string html_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

namespace {

std::string fixed(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  std::string s(buf);
  if (s == "-0.000") s = "0.000";
  return s;
}

std::string signed_mag(double m) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+g", m);
  return m == 0 ? "0" : buf;
}

const char* kStyle = R"(body { font-family: sans-serif; margin: 2em; max-width: 1100px; }
section.attribute { border-top: 2px solid #888; margin-top: 2em; padding-top: 1em; }
figure { display: inline-block; margin: 0 1em 1em 0; vertical-align: top; }
figure img { image-rendering: pixelated; border: 1px solid #ccc; }
table { border-collapse: collapse; font-size: 0.85em; }
td, th { border: 1px solid #ccc; padding: 2px 6px; text-align: right; }
.guidance { background: #f4f4f4; padding: 0.5em 1em; }
textarea { width: 100%; min-height: 4em; })";

const char* kGuidance[] = {
    "Watch each animation and write down, in plain words, what changes in the image as the attribute moves from the lowest to the highest setting.",
    "Check that the change you describe is the same across all five examples; note any example where it looks different.",
    "Say whether the change matches something you already know to matter for this task, or whether it is new to you.",
    "Note whether the change could be explained by something other than the task itself, such as image acquisition or a confounding trait.",
    "The captions list the classifier output for every frame; flag attributes where the visual change is hard to see but the output moves a lot."};

}  // namespace

void emit_report(const std::vector<AttributeReportEntry>& entries, const ReportContext& context,
                 const std::filesystem::path& output_dir) {
  if (entries.empty()) throw std::invalid_argument("report needs at least one attribute");
  std::filesystem::create_directories(output_dir / "assets");
  std::filesystem::create_directories(output_dir / "tables");

  std::ostringstream h;
  h << "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\"/>\n<title>"
    << html_escape(context.title) << "</title>\n<style>\n" << kStyle << "\n</style>\n</head>\n<body>\n";
  h << "<h1>" << html_escape(context.title) << "</h1>\n";

  h << "<div class=\"context\" id=\"dataset-context\">\n<h2>Dataset and model</h2>\n<table>\n";
  for (auto it = context.dataset.begin(); it != context.dataset.end(); ++it)
    h << "<tr><th>" << html_escape(it.key()) << "</th><td>"
      << html_escape(it.value().is_string() ? it.value().get<std::string>() : it.value().dump())
      << "</td></tr>\n";
  h << "</table>\n</div>\n";

  h << "<div class=\"guidance\" id=\"review-guidance\">\n<h2>How to review</h2>\n<ol>\n";
  for (const char* g : kGuidance) h << "<li>" << html_escape(g) << "</li>\n";
  h << "</ol>\n</div>\n";

  h << "<nav>\n<h2>Attributes</h2>\n<ul>\n";
  for (const auto& e : entries)
    h << "<li><a href=\"#att-" << e.effect.coord << "\">Attribute " << e.effect.coord << "</a></li>\n";
  h << "</ul>\n</nav>\n";

  for (const auto& e : entries) {
    const auto& ef = e.effect;
    h << "<section class=\"attribute\" id=\"att-" << ef.coord << "\">\n";
    h << "<h2>Attribute " << ef.coord << " (layer " << ef.layer << ", channel " << ef.channel
      << ")</h2>\n";
    h << "<p>Direction that raises the primary output: " << (ef.direction > 0 ? "+" : "-")
      << ". Images changed by more than the threshold: class 0 " << fixed(ef.p[0], 1)
      << "%, class 1 " << fixed(ef.p[1], 1) << "%.</p>\n";
    h << "<div class=\"examples\">\n";
    for (std::size_t j = 0; j < e.strips.size(); ++j) {
      const auto& strip = e.strips[j];
      std::vector<io::Rgb8> frames;
      for (const auto& f : strip.frames) frames.push_back(upscale(io::to_rgb8(f.pixels), context.gif_scale));
      // ping-pong so the animation sweeps both ways
      for (std::size_t k = strip.frames.size(); k-- > 1;)
        if (k + 1 < strip.frames.size()) frames.push_back(frames[k]);
      const std::string name = "att_" + std::to_string(ef.coord) + "_img_" + std::to_string(j) + ".gif";
      const auto gif = encode_gif(frames, context.frame_delay_cs);
      {
        std::ofstream out(output_dir / "assets" / name, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + (output_dir / "assets" / name).string());
        out.write(reinterpret_cast<const char*>(gif.data()), static_cast<std::streamsize>(gif.size()));
      }
      h << "<figure class=\"example\">\n<img src=\"assets/" << name << "\" alt=\"attribute "
        << ef.coord << " on image " << html_escape(strip.image_id) << "\"/>\n<figcaption>\n"
        << "<div>image " << html_escape(strip.image_id) << "</div>\n<table>\n<tr><th>step</th>";
      for (const auto& f : strip.frames) h << "<th>" << signed_mag(f.magnitude) << "&#963;</th>";
      h << "</tr>\n";
      for (std::size_t hd = 0; hd < context.heads.size(); ++hd) {
        h << "<tr><th>" << html_escape(context.heads[hd]) << "</th>";
        for (const auto& f : strip.frames) h << "<td>" << fixed(f.cps.at(hd)) << "</td>";
        h << "</tr>\n";
      }
      h << "</table>\n</figcaption>\n</figure>\n";
    }
    h << "</div>\n";
    h << "<h3>Effect on the other outputs</h3>\n<table class=\"cross\">\n<tr><th>head</th><th>mean change</th></tr>\n";
    for (const auto& [name, v] : e.cross)
      h << "<tr><td>" << html_escape(name) << "</td><td>" << fixed(v) << "</td></tr>\n";
    h << "</table>\n";
    h << "<div class=\"notes\">\n<h3>Panel notes</h3>\n<textarea name=\"notes-" << ef.coord << "\" rows=\"4\" cols=\"80\">"
      << html_escape(e.notes) << "</textarea>\n</div>\n</section>\n";
  }
  h << "</body>\n</html>\n";
  ckpt::write_text(output_dir / "index.html", h.str());

  emit_tables(entries, output_dir / "tables");

  nlohmann::json manifest = context.manifest;
  manifest["attribute_count"] = entries.size();
  nlohmann::json coords = nlohmann::json::array();
  for (const auto& e : entries) coords.push_back(e.effect.coord);
  manifest["attributes"] = coords;
  manifest["examples_per_attribute"] = entries.front().strips.size();
  manifest["example_selection"] = "largest |change in primary output| under the canonical perturbation";
  ckpt::write_text(output_dir / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace stylexlab::report
