#include "stylexlab/pipeline.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "stylexlab/checkpoint.hpp"
#include "stylexlab/hash.hpp"
#include "stylexlab/report.hpp"
#include "stylexlab/simd/kernels.hpp"

namespace stylexlab::pipe {

namespace fs = std::filesystem;
using nlohmann::json;

// --- configuration -----------------------------------------------------------------------------------

ConfigError::ConfigError(std::vector<std::string> errs)
    : std::runtime_error([&] {
        std::string s = "invalid configuration:";
        for (const auto& e : errs) s += "\n  - " + e;
        return s;
      }()),
      errors(std::move(errs)) {}

std::vector<clf::HeadSpec> PipelineConfig::resolved_heads() const {
  if (!heads.empty()) return heads;
  if (data.kind == "synthetic") return clf::heads_for(data.synth);
  return {};
}

int data_resolution(const PipelineConfig& c) {
  return c.data.kind == "synthetic" ? c.data.synth.resolution : c.data.resolution;
}

void apply_seed(PipelineConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.data.synth.seed = seed;
  c.classifier.seed = seed;
  c.stylex.seed = seed;
  c.search.seed = seed;
}

namespace {

json data_json(const DataSource& d) {
  json j = {{"kind", d.kind}, {"split", d.split}};
  if (d.kind == "synthetic") {
    j["synth"] = d.synth;
    j["num_images"] = d.num_images;
  } else {
    j["image_dir"] = d.image_dir.string();
    j["label_manifest"] = d.label_manifest.string();
    j["resolution"] = d.resolution;
  }
  return j;
}

json report_json(const ReportOptions& r) {
  return {{"title", r.title},
          {"examples", r.examples},
          {"magnitudes", r.magnitudes},
          {"candidates", r.candidates},
          {"attribution_images", r.attribution_images},
          {"eval_images", r.eval_images},
          {"gif_scale", r.gif_scale},
          {"frame_delay_cs", r.frame_delay_cs}};
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where,
                std::vector<std::string>& errors) {
  if (!j.is_object()) {
    errors.push_back(where + " must be an object");
    return;
  }
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) errors.push_back(where + "." + it.key() + " is not a known field");
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  return p.empty() || p.is_absolute() ? p : (base / p).lexically_normal();
}

}  // namespace

void to_json(json& j, const PipelineConfig& c) {
  j = {{"output_root", c.output_root.string()},
       {"seed", c.seed},
       {"deterministic", c.deterministic},
       {"data", data_json(c.data)},
       {"heads", c.heads},
       {"classifier", c.classifier},
       {"stylex", c.stylex},
       {"search", c.search},
       {"report", report_json(c.report)}};
}

PipelineConfig parse_config(const json& j, const fs::path& base_dir) {
  std::vector<std::string> errors;
  PipelineConfig c;
  check_keys(j, {"output_root", "seed", "deterministic", "data", "heads", "classifier", "stylex", "search", "report"},
             "config", errors);
  if (!errors.empty() && !j.is_object()) throw ConfigError(errors);

  auto field = [&](const char* name, auto& dst) {
    if (!j.contains(name)) return;
    try {
      dst = j.at(name).get<std::decay_t<decltype(dst)>>();
    } catch (const std::exception& e) {
      errors.push_back(std::string(name) + ": " + e.what());
    }
  };
  std::string root = c.output_root.string();
  field("output_root", root);
  c.output_root = resolve(root, base_dir);
  field("seed", c.seed);
  field("deterministic", c.deterministic);
  field("heads", c.heads);
  field("classifier", c.classifier);
  field("stylex", c.stylex);
  field("search", c.search);

  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, {"kind", "synth", "num_images", "image_dir", "label_manifest", "resolution", "split"},
               "data", errors);
    if (d.is_object()) {
      auto dfield = [&](const char* name, auto& dst) {
        if (!d.contains(name)) return;
        try {
          dst = d.at(name).get<std::decay_t<decltype(dst)>>();
        } catch (const std::exception& e) {
          errors.push_back(std::string("data.") + name + ": " + e.what());
        }
      };
      dfield("kind", c.data.kind);
      dfield("synth", c.data.synth);
      dfield("num_images", c.data.num_images);
      dfield("resolution", c.data.resolution);
      dfield("split", c.data.split);
      std::string dir, manifest;
      dfield("image_dir", dir);
      dfield("label_manifest", manifest);
      c.data.image_dir = resolve(dir, base_dir);
      c.data.label_manifest = resolve(manifest, base_dir);
    }
  }
  if (j.contains("report")) {
    const auto& r = j.at("report");
    check_keys(r, {"title", "examples", "magnitudes", "candidates", "attribution_images", "eval_images",
                   "gif_scale", "frame_delay_cs"},
               "report", errors);
    if (r.is_object()) {
      auto rfield = [&](const char* name, auto& dst) {
        if (!r.contains(name)) return;
        try {
          dst = r.at(name).get<std::decay_t<decltype(dst)>>();
        } catch (const std::exception& e) {
          errors.push_back(std::string("report.") + name + ": " + e.what());
        }
      };
      rfield("title", c.report.title);
      rfield("examples", c.report.examples);
      rfield("magnitudes", c.report.magnitudes);
      rfield("candidates", c.report.candidates);
      rfield("attribution_images", c.report.attribution_images);
      rfield("eval_images", c.report.eval_images);
      rfield("gif_scale", c.report.gif_scale);
      rfield("frame_delay_cs", c.report.frame_delay_cs);
    }
  }
  // one seed drives every stage
  apply_seed(c, c.seed);

  auto more = config_errors(c);
  errors.insert(errors.end(), more.begin(), more.end());
  if (!errors.empty()) throw ConfigError(errors);
  return c;
}

std::vector<std::string> config_errors(const PipelineConfig& c) {
  std::vector<std::string> errors;
  auto guard = [&](auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      if (std::find(errors.begin(), errors.end(), e.what()) == errors.end()) errors.emplace_back(e.what());
    }
  };
  if (c.output_root.empty()) errors.emplace_back("output_root must not be empty");

  const int res = data_resolution(c);
  if (c.data.kind == "synthetic") {
    guard([&] { c.data.synth.validate(); });
    if (c.data.num_images < 20) errors.emplace_back("data.num_images must be >= 20");
  } else if (c.data.kind == "folder") {
    if (!fs::is_directory(c.data.image_dir))
      errors.push_back("data.image_dir does not exist: " + c.data.image_dir.string());
    if (!fs::is_regular_file(c.data.label_manifest))
      errors.push_back("data.label_manifest does not exist: " + c.data.label_manifest.string());
    if (res < 8 || (res & (res - 1)) != 0) errors.emplace_back("data.resolution must be a power of two >= 8");
    if (c.heads.empty()) errors.emplace_back("heads must be listed for folder data");
  } else {
    errors.push_back("data.kind must be 'synthetic' or 'folder', got '" + c.data.kind + "'");
  }
  double sum = 0;
  for (double f : c.data.split) {
    if (!(f > 0)) errors.emplace_back("data.split fractions must be positive");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) errors.emplace_back("data.split fractions must sum to 1");

  const auto heads = c.resolved_heads();
  if (!heads.empty()) guard([&] { clf::validate_heads(heads); });
  if (c.data.kind == "synthetic" && !c.heads.empty()) {
    const auto names = c.data.synth.head_names();
    for (const auto& h : c.heads)
      if (std::find(names.begin(), names.end(), h.name) == names.end())
        errors.push_back("heads: '" + h.name + "' is not produced by the synthetic spec");
  }

  guard([&] { c.classifier.validate(); });
  if (c.classifier.arch.resolution != res)
    errors.push_back("classifier.arch.resolution (" + std::to_string(c.classifier.arch.resolution) +
                     ") must equal the data resolution (" + std::to_string(res) + ")");

  const auto& s = c.stylex;
  if (!(s.lambda_rec >= 0)) errors.emplace_back("stylex.lambda_rec must be >= 0");
  if (!(s.lambda_cls >= 0)) errors.emplace_back("stylex.lambda_cls must be >= 0");
  if (!(s.lr > 0)) errors.emplace_back("stylex.lr must be positive");
  if (s.steps <= 0) errors.emplace_back("stylex.steps must be positive");
  if (s.batch_size < 1) errors.emplace_back("stylex.batch_size must be >= 1");
  guard([&] { s.validate(); });
  if (s.resolution != res)
    errors.push_back("stylex.resolution (" + std::to_string(s.resolution) + ") must equal the data resolution (" +
                     std::to_string(res) + ")");
  for (int d : s.perceptual.depths)
    if (d < 0 || d >= static_cast<int>(c.classifier.arch.widths.size()))
      errors.push_back("stylex.perceptual.depths entry " + std::to_string(d) + " is not a classifier stage");

  guard([&] { c.search.validate(); });
  try {
    auto g = s.generator;
    g.resolution = s.resolution;
    const auto layers = static_cast<int>(g.layout().num_layers());
    if (c.search.skip_layers >= layers)
      errors.push_back("search.skip_layers (" + std::to_string(c.search.skip_layers) +
                       ") must be below the generator layer count (" + std::to_string(layers) +
                       "); no coordinates would be searched");
  } catch (const std::exception&) {
    // generator problems are already reported above
  }

  const auto& r = c.report;
  if (r.examples < 1) errors.emplace_back("report.examples must be >= 1");
  if (std::find(r.magnitudes.begin(), r.magnitudes.end(), 0.0) == r.magnitudes.end())
    errors.emplace_back("report.magnitudes must include 0");
  if (r.candidates < r.examples) errors.emplace_back("report.candidates must be >= report.examples");
  if (r.attribution_images < 1) errors.emplace_back("report.attribution_images must be >= 1");
  if (r.eval_images < 1) errors.emplace_back("report.eval_images must be >= 1");
  if (r.gif_scale < 1) errors.emplace_back("report.gif_scale must be >= 1");
  if (r.frame_delay_cs < 1) errors.emplace_back("report.frame_delay_cs must be >= 1");
  return errors;
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot read config file: " + path.string()});
  json j;
  try {
    j = json::parse(in);
  } catch (const std::exception& e) {
    throw ConfigError({"config is not valid JSON: " + std::string(e.what())});
  }
  return parse_config(j, path.parent_path());
}

std::vector<std::string> validate_config(const fs::path& path) {
  try {
    load_config(path);
    return {};
  } catch (const ConfigError& e) {
    return e.errors;
  }
}

int stage_index(const std::string& name) {
  for (std::size_t i = 0; i < kStages.size(); ++i)
    if (name == kStages[i]) return static_cast<int>(i);
  throw ConfigError({"unknown stage '" + name + "'"});
}

// --- manifest ----------------------------------------------------------------------------------------

StageRecord& RunManifest::stage(const std::string& name) { return stages.at(stage_index(name)); }
const StageRecord& RunManifest::stage(const std::string& name) const { return stages.at(stage_index(name)); }

void to_json(json& j, const StageRecord& s) {
  j = {{"name", s.name},       {"status", s.status},   {"config_hash", s.config_hash},
       {"inputs", s.inputs},   {"artifacts", s.artifacts}, {"metrics", s.metrics},
       {"started", s.started}, {"finished", s.finished},   {"error", s.error},
       {"override_gate", s.override_gate}};
}

void from_json(const json& j, StageRecord& s) {
  s.name = j.at("name").get<std::string>();
  s.status = j.at("status").get<std::string>();
  s.config_hash = j.value("config_hash", "");
  s.inputs = j.value("inputs", json::object());
  s.artifacts = j.value("artifacts", json::object());
  s.metrics = j.value("metrics", json::object());
  s.started = j.value("started", "");
  s.finished = j.value("finished", "");
  s.error = j.value("error", "");
  s.override_gate = j.value("override_gate", false);
}

void to_json(json& j, const RunManifest& m) {
  j = {{"format_version", m.format_version},
       {"tool_version", m.tool_version},
       {"config_hash", m.config_hash},
       {"seed", m.seed},
       {"deterministic", m.deterministic},
       {"stages", m.stages}};
}

void from_json(const json& j, RunManifest& m) {
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != kManifestVersion)
    throw ckpt::VersionError("manifest format " + std::to_string(m.format_version) + " is not supported");
  m.tool_version = j.value("tool_version", "");
  m.config_hash = j.value("config_hash", "");
  m.seed = j.value("seed", std::uint64_t{1});
  m.deterministic = j.value("deterministic", false);
  m.stages = j.at("stages").get<std::vector<StageRecord>>();
  if (m.stages.size() != kStages.size()) throw ckpt::CorruptError("manifest must hold one record per stage");
  for (std::size_t i = 0; i < kStages.size(); ++i)
    if (m.stages[i].name != kStages[i]) throw ckpt::CorruptError("manifest stage records out of order");
}

json without_timestamps(const RunManifest& m) {
  json j = m;
  for (auto& s : j["stages"]) {
    s["started"] = "";
    s["finished"] = "";
  }
  return j;
}

HashMismatch::HashMismatch(const std::string& what, std::vector<std::string> d)
    : std::runtime_error([&] {
        std::string s = what;
        for (const auto& l : d) s += "\n  " + l;
        return s;
      }()),
      diff(std::move(d)) {}

fs::path manifest_path(const PipelineConfig& c) { return c.output_root / "manifest.json"; }

namespace {

StageRecord blank_record(const std::string& name) {
  StageRecord r;
  r.name = name;
  return r;
}

std::string config_hash(const PipelineConfig& c) {
  json j = c;
  j.erase("output_root");
  return sha256_hex(j.dump());
}

// Hash of everything a stage depends on, including its upstream slices.
std::string stage_config_hash(const PipelineConfig& c, int stage) {
  json slice = {{"deterministic", c.deterministic}, {"data", data_json(c.data)}};
  if (stage >= 1) {
    slice["heads"] = c.resolved_heads();
    slice["classifier"] = c.classifier;
  }
  if (stage >= 2) slice["stylex"] = c.stylex;
  if (stage >= 3) slice["search"] = c.search;
  if (stage >= 4) slice["report"] = report_json(c.report);
  slice["stage"] = kStages[stage];
  return sha256_hex(slice.dump());
}

RunManifest fresh_manifest(const PipelineConfig& c) {
  RunManifest m;
  m.seed = c.seed;
  m.deterministic = c.deterministic;
  m.config_hash = config_hash(c);
  for (const char* s : kStages) m.stages.push_back(blank_record(s));
  return m;
}

void write_manifest(const PipelineConfig& c, RunManifest m) {
  m.config_hash = config_hash(c);
  m.seed = c.seed;
  m.deterministic = c.deterministic;
  ckpt::write_text(manifest_path(c), json(m).dump(2) + "\n");
}

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Files whose recorded hash no longer matches the disk.
std::vector<std::string> artifact_diff(const PipelineConfig& c, const StageRecord& s) {
  std::vector<std::string> diff;
  for (auto it = s.artifacts.begin(); it != s.artifacts.end(); ++it) {
    const auto path = c.output_root / it.key();
    const auto expected = it.value().get<std::string>();
    if (!fs::exists(path)) {
      diff.push_back(s.name + ": " + it.key() + " is missing (expected sha256 " + expected + ")");
      continue;
    }
    const auto actual = sha256_file(path);
    if (actual != expected)
      diff.push_back(s.name + ": " + it.key() + " expected sha256 " + expected + ", found " + actual);
  }
  return diff;
}

json hash_files(const PipelineConfig& c, const std::vector<fs::path>& rel) {
  json out = json::object();
  for (const auto& r : rel) out[r.generic_string()] = sha256_file(c.output_root / r);
  return out;
}

// --- data --------------------------------------------------------------------------------------------

std::string dataset_digest(const std::vector<synth::LabeledImage>& ds) {
  Sha256 h;
  for (const auto& item : ds) {
    h.update(item.subject_id);
    for (const auto& [k, v] : item.labels) {
      h.update(k);
      h.update(&v, sizeof v);
    }
    h.update(item.pixels.data.data(), item.pixels.data.size() * sizeof(float));
  }
  return h.hex_digest();
}

std::vector<synth::LabeledImage> materialize(const PipelineConfig& c) {
  if (c.data.kind == "synthetic") return synth::sample_dataset(c.data.synth, c.data.num_images, c.data.synth.seed);
  return synth::ingest_folder(c.data.image_dir, c.data.label_manifest, c.data.resolution);
}

synth::Split load_split(const PipelineConfig& c, const RunManifest& m) {
  const auto ds = materialize(c);
  const auto digest = dataset_digest(ds);
  const auto recorded = m.stage("synth").metrics.value("data_digest", "");
  if (digest != recorded)
    throw HashMismatch("dataset no longer matches the synth stage record",
                       {"synth: data digest expected " + recorded + ", found " + digest});
  return synth::split_dataset(ds, c.data.split, c.seed);
}

std::vector<synth::Image> pixels_of(const std::vector<synth::LabeledImage>& items, std::size_t limit) {
  std::vector<synth::Image> out;
  for (std::size_t i = 0; i < std::min(limit, items.size()); ++i) out.push_back(items[i].pixels);
  return out;
}

json stats_json(const attr::CoordinateStats& s) {
  return {{"mean", s.mean}, {"sigma", s.sigma}, {"count", s.count}};
}

attr::CoordinateStats stats_from(const json& j) {
  attr::CoordinateStats s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.sigma = j.at("sigma").get<std::vector<double>>();
  s.count = j.at("count").get<std::size_t>();
  return s;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return json::parse(in);
}

// --- stages ------------------------------------------------------------------------------------------

struct StageResult {
  std::vector<fs::path> artifacts;  // relative to the output root
  json metrics = json::object();
};

StageResult stage_synth(const PipelineConfig& c) {
  const auto ds = materialize(c);
  if (ds.empty()) throw std::runtime_error("the data source produced no images");
  const auto split = synth::split_dataset(ds, c.data.split, c.seed);
  const auto heads = c.resolved_heads();
  json balance = json::object();
  for (const auto& h : heads) {
    std::vector<int> counts(h.num_classes, 0);
    for (const auto& item : ds) {
      const auto it = item.labels.find(h.name);
      if (it == item.labels.end()) throw std::runtime_error("image " + item.subject_id + " lacks label " + h.name);
      if (it->second < 0 || it->second >= h.num_classes)
        throw std::runtime_error("image " + item.subject_id + " has class " + std::to_string(it->second) +
                                 " outside head " + h.name);
      counts[it->second] += 1;
    }
    balance[h.name] = counts;
  }
  const auto digest = dataset_digest(ds);
  json rec = {{"source", data_json(c.data)},
              {"images", ds.size()},
              {"split_sizes", {split.train.size(), split.tune.size(), split.eval.size()}},
              {"class_counts", balance},
              {"data_digest", digest}};
  ckpt::write_text(c.output_root / "data" / "dataset.json", rec.dump(2) + "\n");
  StageResult r;
  r.artifacts = {"data/dataset.json"};
  r.metrics = {{"images", ds.size()},
               {"train", split.train.size()},
               {"tune", split.tune.size()},
               {"eval", split.eval.size()},
               {"data_digest", digest}};
  return r;
}

StageResult stage_classifier(const PipelineConfig& c, const RunManifest& m) {
  const auto split = load_split(c, m);
  const auto heads = c.resolved_heads();
  auto [model, history] = clf::train_classifier(split.train, split.tune, heads, c.classifier);
  const auto dir = c.output_root / "classifier";
  fs::create_directories(dir);
  const auto blob_hash = clf::save_classifier(model, dir / "classifier.bin");
  json aucs = json::object();
  for (const auto& h : heads) {
    const auto tune = clf::evaluate_auc(model, split.tune, h.name, 1000, c.seed);
    const auto eval = clf::evaluate_auc(model, split.eval, h.name, 1000, c.seed);
    aucs[h.name] = {{"tune", tune.auc}, {"tune_ci", {tune.ci_low, tune.ci_high}}, {"eval", eval.auc},
                    {"eval_ci", {eval.ci_low, eval.ci_high}}};
  }
  const double tune_auc = aucs[model.primary_name()]["tune"].get<double>();
  const bool pass = clf::gate(tune_auc) == clf::GateResult::kPass;
  json metrics = {{"tune_auc", tune_auc},
                  {"gate", pass ? "pass" : "fail"},
                  {"gate_threshold", clf::kGateThreshold},
                  {"heads", aucs},
                  {"best_step", history.best_step},
                  {"steps_run", history.steps_run},
                  {"classifier_hash", clf::classifier_hash(model)},
                  {"blob_sha256", blob_hash}};
  ckpt::write_text(dir / "metrics.json", metrics.dump(2) + "\n");
  if (!pass)
    spdlog::warn("classifier tune AUC {:.4f} is below the {} gate; the stylex stage will refuse", tune_auc,
                 clf::kGateThreshold);
  return {{"classifier/classifier.bin", "classifier/classifier.bin.json", "classifier/metrics.json"}, metrics};
}

StageResult stage_stylex(const PipelineConfig& c, const RunManifest& m, const RunOptions& opt) {
  const double auc = m.stage("classifier").metrics.at("tune_auc").get<double>();
  if (clf::gate(auc) == clf::GateResult::kFail && !opt.override_gate) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "classifier tune AUC %.4f is below the gate threshold %.1f; refusing to train the "
                  "generator (pass --override-gate to proceed anyway)",
                  auc, clf::kGateThreshold);
    throw sx::GateRefusal(buf);
  }
  const auto split = load_split(c, m);
  const auto classifier = clf::load_classifier(c.output_root / "classifier" / "classifier.bin");
  const auto dir = c.output_root / "stylex";
  fs::create_directories(dir);
  sx::TrainOptions to;
  to.classifier_tune_auc = auc;
  to.override_gate = opt.override_gate;
  to.out_dir = dir;
  auto [models, history] = sx::train_stylex(split.train, classifier, c.stylex, to);
  const auto hash = sx::save_checkpoint(
      models, dir / "stylex.bin",
      {{"classifier_hash", clf::classifier_hash(classifier)}, {"steps", c.stylex.steps},
       {"override_gate", opt.override_gate}});

  // reconstruction quality on held-out images
  const auto eval = pixels_of(split.eval, static_cast<std::size_t>(c.report.eval_images));
  const auto primary = classifier.primary_name();
  double l1 = 0, cls = 0;
  int agree = 0;
  for (const auto& x : eval) {
    const auto xr = sx::reconstruct(models, classifier, x);
    l1 += sx::l1_mean<float>(x, xr, nullptr);
    const auto p = clf::predict(classifier, x);
    const auto q = clf::predict(classifier, xr);
    cls += sx::cls_loss(p, q);
    const auto& pp = p.head(primary).probs;
    const auto& qp = q.head(primary).probs;
    agree += std::max_element(pp.begin(), pp.end()) - pp.begin() ==
             std::max_element(qp.begin(), qp.end()) - qp.begin();
  }
  const double n = static_cast<double>(eval.size());
  json last = json::object();
  if (!history.steps.empty()) {
    const auto& s = history.steps.back();
    last = {{"step", s.step}, {"d", s.d_loss}, {"g_adv", s.g_adv}, {"rec", s.rec}, {"cls", s.cls}, {"r1", s.r1}};
  }
  json metrics = {{"final_losses", last},
                  {"eval_images", eval.size()},
                  {"eval_l1", l1 / n},
                  {"eval_agreement", agree / n},
                  {"eval_cls_loss", cls / n},
                  {"stylex_hash", hash},
                  {"classifier_tune_auc", auc}};
  ckpt::write_text(dir / "metrics.json", metrics.dump(2) + "\n");
  return {{"stylex/stylex.bin", "stylex/stylex.bin.json", "stylex/metrics.json"}, metrics};
}

struct LoadedModels {
  clf::ClassifierModel classifier;
  sx::StylexModels models;
};

LoadedModels load_models(const PipelineConfig& c) {
  LoadedModels lm{clf::load_classifier(c.output_root / "classifier" / "classifier.bin"),
                  sx::load_checkpoint(c.output_root / "stylex" / "stylex.bin")};
  return lm;
}

StageResult stage_attrs(const PipelineConfig& c, const RunManifest& m) {
  const auto split = load_split(c, m);
  const auto lm = load_models(c);
  attr::StylexExplainee ex(lm.models, lm.classifier);

  // images per class from the classifier's training data, in a seeded order
  std::vector<std::size_t> order(split.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(c.search.seed ^ 0xa77e5ea4c4ULL);
  std::shuffle(order.begin(), order.end(), rng);
  const auto primary = lm.classifier.primary_name();
  const int positive = lm.classifier.heads[lm.classifier.primary()].positive_class;
  std::array<std::vector<synth::Image>, 2> by_class;
  for (auto i : order) {
    const int cls = split.train[i].labels.at(primary) == positive ? 1 : 0;
    if (static_cast<int>(by_class[cls].size()) < c.search.images_per_class)
      by_class[cls].push_back(split.train[i].pixels);
  }
  for (int k = 0; k < 2; ++k)
    if (static_cast<int>(by_class[k].size()) < c.search.images_per_class)
      spdlog::warn("only {} training images in class {} (wanted {})", by_class[k].size(), k,
                   c.search.images_per_class);
  std::vector<synth::Image> all(by_class[0]);
  all.insert(all.end(), by_class[1].begin(), by_class[1].end());

  const auto stats = attr::coordinate_stats(ex, all);
  auto table = attr::class_effect_table(ex, by_class, stats, c.search);
  table.provenance = {{"stylex_hash", m.stage("stylex").metrics.value("stylex_hash", "")},
                      {"classifier_hash", m.stage("classifier").metrics.value("classifier_hash", "")}};
  const auto filtered = attr::consistency_filter(table);
  attr::ThresholdChoice choice;
  if (c.search.tune_threshold) {
    choice = attr::tune_selection_threshold(filtered, static_cast<std::size_t>(c.search.target_attribute_count));
  } else {
    choice.x = c.search.selection_x;
  }
  const auto selected = attr::select_attributes(filtered, choice.x);
  choice.count = selected.size();
  if (!c.search.tune_threshold) choice.reached = true;

  const auto dir = c.output_root / "attrs";
  ckpt::write_text(dir / "stats.json", stats_json(stats).dump() + "\n");
  ckpt::write_text(dir / "effect_table.json", json(table).dump() + "\n");
  json sel = {{"threshold_x", choice.x},
              {"count", selected.size()},
              {"target", c.search.target_attribute_count},
              {"target_reached", choice.reached},
              {"tuned", c.search.tune_threshold},
              {"searched", table.entries.size()},
              {"consistent", filtered.entries.size()},
              {"selected", selected}};
  ckpt::write_text(dir / "selection.json", sel.dump(2) + "\n");
  json metrics = {{"searched", table.entries.size()},
                  {"consistent", filtered.entries.size()},
                  {"selected_count", selected.size()},
                  {"threshold_x", choice.x},
                  {"class_sizes", {by_class[0].size(), by_class[1].size()}}};
  return {{"attrs/stats.json", "attrs/effect_table.json", "attrs/selection.json"}, metrics};
}

StageResult stage_report(const PipelineConfig& c, const RunManifest& m) {
  const auto split = load_split(c, m);
  const auto lm = load_models(c);
  attr::StylexExplainee ex(lm.models, lm.classifier);
  const auto stats = stats_from(read_json(c.output_root / "attrs" / "stats.json"));
  const auto table = read_json(c.output_root / "attrs" / "effect_table.json").get<attr::EffectTable>();
  const auto selection = read_json(c.output_root / "attrs" / "selection.json");
  const auto selected = selection.at("selected").get<std::vector<std::size_t>>();
  if (selected.empty()) throw std::runtime_error("no attributes were selected; nothing to report");

  const auto candidates_items = std::vector<synth::LabeledImage>(
      split.eval.begin(), split.eval.begin() + std::min<std::size_t>(c.report.candidates, split.eval.size()));
  const auto candidates = pixels_of(candidates_items, candidates_items.size());

  std::vector<report::AttributeReportEntry> entries;
  std::vector<attr::AttributeEffect> effects;
  for (auto coord : selected) {
    const auto* e = table.find(coord);
    if (!e) throw std::runtime_error("selected coordinate " + std::to_string(coord) + " missing from the table");
    effects.push_back(*e);
    report::AttributeReportEntry entry;
    entry.effect = *e;
    entry.cross = e->cross;
    const auto picks = report::pick_examples(ex, *e, candidates, stats, c.search.perturb_factor,
                                             static_cast<std::size_t>(c.report.examples));
    for (auto i : picks)
      entry.strips.push_back(report::render_strip(ex, candidates[i], candidates_items[i].subject_id, coord,
                                                  c.report.magnitudes, stats));
    entries.push_back(std::move(entry));
    spdlog::info("report: attribute {} rendered", coord);
  }

  const auto out = c.output_root / "report";
  json metrics = {{"attributes", selected.size()}};
  std::vector<fs::path> artifacts;
  if (c.data.kind == "synthetic") {
    const auto imgs = pixels_of(split.eval, static_cast<std::size_t>(c.report.attribution_images));
    const auto matrix =
        report::factor_attribution(ex, effects, imgs, &c.data.synth, stats, c.search.perturb_factor);
    ckpt::write_text(out / "tables" / "recovery.json", json(matrix).dump(2) + "\n");
    artifacts.emplace_back("report/tables/recovery.json");
    json dom = json::object();
    for (std::size_t a = 0; a < matrix.coords.size(); ++a) {
      const auto [col, ratio] = matrix.dominant(a);
      dom[std::to_string(matrix.coords[a])] = col >= 0 ? matrix.factors[col] : "";
    }
    metrics["dominant_factors"] = dom;
  }

  report::ReportContext ctx;
  ctx.title = c.report.title;
  ctx.heads = ex.heads();
  const auto& cm = m.stage("classifier").metrics;
  const auto& sm = m.stage("stylex").metrics;
  ctx.dataset = {{"data source", c.data.kind},
                 {"images (train / tune / eval)", std::to_string(split.train.size()) + " / " +
                                                      std::to_string(split.tune.size()) + " / " +
                                                      std::to_string(split.eval.size())},
                 {"resolution", data_resolution(c)},
                 {"primary head", lm.classifier.primary_name()},
                 {"classifier tune AUC", cm.value("tune_auc", 0.0)},
                 {"reconstruction agreement", sm.value("eval_agreement", 0.0)},
                 {"coordinates searched", table.entries.size()},
                 {"selection threshold X (%)", selection.value("threshold_x", 0.0)},
                 {"perturbation", std::to_string(c.search.perturb_factor) + " sigma"}};
  ctx.manifest = {{"config_hash", stage_config_hash(c, 4)},
                  {"classifier_hash", cm.value("classifier_hash", "")},
                  {"stylex_hash", sm.value("stylex_hash", "")},
                  {"magnitudes", c.report.magnitudes},
                  {"heads", ctx.heads}};
  ctx.gif_scale = c.report.gif_scale;
  ctx.frame_delay_cs = c.report.frame_delay_cs;
  report::emit_report(entries, ctx, out);

  artifacts.insert(artifacts.end(), {"report/index.html", "report/manifest.json", "report/tables/attributes.csv",
                                     "report/tables/attributes.json"});
  for (const auto& e : entries)
    for (std::size_t j = 0; j < e.strips.size(); ++j)
      artifacts.push_back(fs::path("report/assets") /
                          ("att_" + std::to_string(e.effect.coord) + "_img_" + std::to_string(j) + ".gif"));
  return {artifacts, metrics};
}

// Tag balance and attribute quoting; enough to catch a broken page.
std::string xml_problem(const std::string& doc) {
  std::vector<std::string> stack;
  for (std::size_t i = 0; i < doc.size();) {
    if (doc[i] != '<') {
      ++i;
      continue;
    }
    const auto close = doc.find('>', i);
    if (close == std::string::npos) return "unterminated tag";
    std::string tag = doc.substr(i + 1, close - i - 1);
    i = close + 1;
    if (tag.empty()) return "empty tag";
    if (tag[0] == '!') continue;
    if (tag[0] == '/') {
      if (stack.empty() || stack.back() != tag.substr(1)) return "unbalanced </" + tag.substr(1) + ">";
      stack.pop_back();
      continue;
    }
    if (std::count(tag.begin(), tag.end(), '"') % 2) return "unquoted attribute in <" + tag + ">";
    if (tag.back() == '/') continue;
    stack.push_back(tag.substr(0, tag.find_first_of(" \n")));
  }
  return stack.empty() ? "" : "unclosed <" + stack.back() + ">";
}

StageResult stage_validate(const PipelineConfig& c, const RunManifest& m) {
  std::vector<std::string> failures;
  json checks = json::array();
  auto check = [&](const std::string& name, bool ok, const std::string& detail = "") {
    checks.push_back({{"check", name}, {"ok", ok}, {"detail", detail}});
    if (!ok) failures.push_back(name + (detail.empty() ? "" : ": " + detail));
  };
  const auto selection = read_json(c.output_root / "attrs" / "selection.json");
  const auto selected = selection.at("selected").get<std::vector<std::size_t>>();
  const auto heads = c.resolved_heads();

  std::ifstream hin(c.output_root / "report" / "index.html");
  std::stringstream ss;
  ss << hin.rdbuf();
  const auto html = ss.str();
  const auto problem = xml_problem(html);
  check("report is well-formed", problem.empty(), problem);
  std::size_t sections = 0;
  for (auto p = html.find("<section "); p != std::string::npos; p = html.find("<section ", p + 1)) ++sections;
  check("one section per attribute", sections == selected.size(),
        std::to_string(sections) + " sections, " + std::to_string(selected.size()) + " attributes");
  for (auto coord : selected)
    for (int j = 0; j < c.report.examples; ++j) {
      const auto p = c.output_root / "report" / "assets" /
                     ("att_" + std::to_string(coord) + "_img_" + std::to_string(j) + ".gif");
      std::ifstream g(p, std::ios::binary);
      char magic[6] = {};
      g.read(magic, 6);
      check("animation " + p.filename().string(), g && std::string(magic, 6) == "GIF89a");
    }
  std::ifstream cin(c.output_root / "report" / "tables" / "attributes.csv");
  std::string line;
  std::getline(cin, line);
  check("table header", line == attr::kEffectCsvHeader, line);
  std::size_t rows = 0;
  while (std::getline(cin, line)) rows += !line.empty();
  check("table rows", rows == selected.size() * heads.size(),
        std::to_string(rows) + " rows for " + std::to_string(selected.size()) + " attributes x " +
            std::to_string(heads.size()) + " heads");

  json sidecar;
  sx::load_checkpoint(c.output_root / "stylex" / "stylex.bin", &sidecar);
  check("generator was trained against this classifier",
        sidecar.value("classifier_hash", "") == m.stage("classifier").metrics.value("classifier_hash", ""));
  const double auc = m.stage("classifier").metrics.value("tune_auc", 0.0);
  check("gate passed or override recorded",
        clf::gate(auc) == clf::GateResult::kPass || m.stage("stylex").override_gate,
        "tune AUC " + std::to_string(auc));

  json summary = {{"checks", checks},
                  {"tune_auc", auc},
                  {"eval_agreement", m.stage("stylex").metrics.value("eval_agreement", 0.0)},
                  {"eval_cls_loss", m.stage("stylex").metrics.value("eval_cls_loss", 0.0)},
                  {"selected_count", selected.size()}};
  ckpt::write_text(c.output_root / "validate" / "summary.json", summary.dump(2) + "\n");
  if (!failures.empty()) throw ConfigError(failures);
  return {{"validate/summary.json"}, {{"checks", checks.size()}, {"failed", 0}}};
}

RunManifest run_stage_locked(const PipelineConfig& c, const std::string& name, const RunOptions& opt) {
  const int idx = stage_index(name);
  RunManifest m = read_manifest(c);
  const auto want_hash = stage_config_hash(c, idx);

  // upstream must be done, current and intact
  std::vector<std::string> diff;
  for (int u = 0; u < idx; ++u) {
    const auto& rec = m.stages[u];
    if (rec.status != "done")
      throw ConfigError({"stage '" + name + "' needs stage '" + rec.name + "' to be done (it is " + rec.status + ")"});
    const auto cur = stage_config_hash(c, u);
    if (rec.config_hash != cur)
      diff.push_back(rec.name + ": config changed since it ran (recorded " + rec.config_hash.substr(0, 12) +
                     ", current " + cur.substr(0, 12) + ")");
    const auto d = artifact_diff(c, rec);
    diff.insert(diff.end(), d.begin(), d.end());
  }
  if (!diff.empty()) throw HashMismatch("upstream artifacts are stale; refusing to run '" + name + "'", diff);

  json inputs = json::object();
  if (idx > 0) inputs = m.stages[idx - 1].artifacts;

  auto& rec = m.stages[idx];
  if (rec.status == "done" && rec.config_hash == want_hash && rec.inputs == inputs &&
      artifact_diff(c, rec).empty() && (!opt.override_gate || rec.override_gate == opt.override_gate)) {
    spdlog::info("stage {} is up to date", name);
    return m;
  }

  rec = blank_record(name);
  rec.status = "failed";
  rec.config_hash = want_hash;
  rec.inputs = inputs;
  rec.started = now_utc();
  rec.override_gate = name == "stylex" && opt.override_gate;
  // downstream results no longer follow from this stage
  for (std::size_t d = idx + 1; d < m.stages.size(); ++d) m.stages[d] = blank_record(kStages[d]);
  spdlog::info("stage {} starting", name);
  try {
    StageResult r;
    if (name == "synth") r = stage_synth(c);
    else if (name == "classifier") r = stage_classifier(c, m);
    else if (name == "stylex") r = stage_stylex(c, m, opt);
    else if (name == "attrs") r = stage_attrs(c, m);
    else if (name == "report") r = stage_report(c, m);
    else r = stage_validate(c, m);
    rec.artifacts = hash_files(c, r.artifacts);
    rec.metrics = r.metrics;
    rec.status = "done";
  } catch (const std::exception& e) {
    rec.error = e.what();
    rec.finished = now_utc();
    write_manifest(c, m);
    throw;
  }
  rec.finished = now_utc();
  write_manifest(c, m);
  spdlog::info("stage {} done", name);
  return m;
}

class IsaScope {
 public:
  explicit IsaScope(bool scalar) : active_(scalar) {
    if (active_) previous_ = simd::force_isa(simd::Isa::kScalar);
  }
  ~IsaScope() {
    if (active_) simd::force_isa(previous_);
  }

 private:
  bool active_;
  simd::Isa previous_ = simd::Isa::kScalar;
};

}  // namespace

RunManifest read_manifest(const PipelineConfig& c) {
  const auto p = manifest_path(c);
  if (!fs::exists(p)) return fresh_manifest(c);
  return read_json(p).get<RunManifest>();
}

// --- locking -----------------------------------------------------------------------------------------

RunLock::RunLock(const fs::path& root) : path_(root / ".lock") {
  fs::create_directories(root);
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const auto pid = std::to_string(::getpid()) + "\n";
      [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
      ::close(fd);
      return;
    }
    if (errno != EEXIST) throw LockError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
    long owner = 0;
    std::ifstream(path_) >> owner;
    if (owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno != ESRCH))
      throw LockError("output root " + root.string() + " is in use by process " + std::to_string(owner));
    spdlog::warn("removing stale lock left by process {}", owner);
    fs::remove(path_);
  }
  throw LockError("cannot acquire " + path_.string());
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

RunManifest run_stage(const PipelineConfig& config, const std::string& stage, const RunOptions& options) {
  stage_index(stage);
  RunLock lock(config.output_root);
  IsaScope isa(config.deterministic);
  return run_stage_locked(config, stage, options);
}

RunManifest full_run(const PipelineConfig& config, const RunOptions& options) {
  RunLock lock(config.output_root);
  IsaScope isa(config.deterministic);
  RunManifest m;
  for (const char* s : kStages) m = run_stage_locked(config, s, options);
  return m;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const sx::GateRefusal*>(&e)) return kGate;
  if (dynamic_cast<const HashMismatch*>(&e)) return kHashMismatch;
  if (dynamic_cast<const sx::NumericFailure*>(&e)) return kNumeric;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const LockError*>(&e) ||
      dynamic_cast<const std::invalid_argument*>(&e))
    return kValidation;
  return 1;
}

RunData load_run_data(const PipelineConfig& config, bool with_classifier) {
  const auto m = read_manifest(config);
  RunData d{load_split(config, m), {}};
  if (with_classifier) d.classifier = clf::load_classifier(config.output_root / "classifier" / "classifier.bin");
  return d;
}

}  // namespace stylexlab::pipe
