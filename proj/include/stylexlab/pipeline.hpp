#pragma once
// Stage orchestration: configuration, content-hashed run manifest, and the
// synth -> classifier -> stylex -> attrs -> report -> validate chain.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "stylexlab/attrsearch.hpp"
#include "stylexlab/classifier.hpp"
#include "stylexlab/stylex.hpp"
#include "stylexlab/synthdata.hpp"

namespace stylexlab::pipe {

inline constexpr const char* kToolVersion = "0.3.0";
inline constexpr int kManifestVersion = 1;

enum ExitCode { kOk = 0, kValidation = 2, kGate = 3, kHashMismatch = 4, kNumeric = 5 };

struct DataSource {
  std::string kind = "synthetic";  // synthetic | folder
  synth::SynthSpec synth;
  int num_images = 6000;
  // folder source
  std::filesystem::path image_dir;
  std::filesystem::path label_manifest;
  int resolution = 64;
  std::array<double, 3> split{0.7, 0.15, 0.15};  // train / tune / eval
};

struct ReportOptions {
  std::string title = "Classifier attribute review";
  int examples = 5;
  std::vector<double> magnitudes{-4, -2, 0, 2, 4};
  int candidates = 100;      // images scored when picking examples
  int attribution_images = 100;
  int eval_images = 500;     // held-out images for reconstruction metrics
  int gif_scale = 3;
  int frame_delay_cs = 40;
};

struct PipelineConfig {
  std::filesystem::path output_root = "runs/default";
  std::uint64_t seed = 1;
  bool deterministic = false;
  DataSource data;
  std::vector<clf::HeadSpec> heads;  // empty: derived from the synthetic spec
  clf::ClassifierTrainConfig classifier;
  sx::StylexTrainConfig stylex;
  attr::SearchConfig search;
  ReportOptions report;

  // Heads actually used (explicit list or the synthetic spec's rules).
  std::vector<clf::HeadSpec> resolved_heads() const;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
// One seed drives data sampling, splits, both trainings and the search.
void apply_seed(PipelineConfig& c, std::uint64_t seed);

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> errors);
  std::vector<std::string> errors;
};

// Parses and checks everything, collecting every problem before throwing.
// Relative paths resolve against the config file's directory.
PipelineConfig load_config(const std::filesystem::path& path);
PipelineConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
std::vector<std::string> config_errors(const PipelineConfig& c);
// Empty when the file is a valid config.
std::vector<std::string> validate_config(const std::filesystem::path& path);

inline constexpr std::array<const char*, 6> kStages{"synth", "classifier", "stylex",
                                                    "attrs", "report", "validate"};
int stage_index(const std::string& name);  // throws ConfigError for unknown names

struct StageRecord {
  std::string name;
  std::string status = "pending";  // pending | done | failed
  std::string config_hash;         // hash of the config slice this stage depends on
  nlohmann::json inputs = nlohmann::json::object();     // upstream artifact -> hash
  nlohmann::json artifacts = nlohmann::json::object();  // relative path -> sha256
  nlohmann::json metrics = nlohmann::json::object();
  std::string started, finished, error;
  bool override_gate = false;
};

struct RunManifest {
  int format_version = kManifestVersion;
  std::string tool_version = kToolVersion;
  std::string config_hash;
  std::uint64_t seed = 1;
  bool deterministic = false;
  std::vector<StageRecord> stages;  // always one per stage, in order

  StageRecord& stage(const std::string& name);
  const StageRecord& stage(const std::string& name) const;
};

void to_json(nlohmann::json& j, const StageRecord& s);
void from_json(const nlohmann::json& j, StageRecord& s);
void to_json(nlohmann::json& j, const RunManifest& m);
void from_json(const nlohmann::json& j, RunManifest& m);

// Copy with timestamps blanked, for comparing runs.
nlohmann::json without_timestamps(const RunManifest& m);

class HashMismatch : public std::runtime_error {
 public:
  HashMismatch(const std::string& what, std::vector<std::string> diff);
  std::vector<std::string> diff;  // one line per offending file
};

class LockError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Exclusive ownership of an output root for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& root);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct RunOptions {
  bool override_gate = false;
};

std::filesystem::path manifest_path(const PipelineConfig& c);
// Fresh manifest (all stages pending) when none exists yet.
RunManifest read_manifest(const PipelineConfig& c);

// Runs one stage. A stage that is already done with an unchanged config and
// intact inputs is left alone.
RunManifest run_stage(const PipelineConfig& config, const std::string& stage,
                      const RunOptions& options = {});
RunManifest full_run(const PipelineConfig& config, const RunOptions& options = {});

// Maps an exception thrown by the stages to the CLI exit code.
int exit_code_for(const std::exception& e);

// Loaded view of a finished run, for callers that inspect its outputs.
struct RunData {
  synth::Split split;
  clf::ClassifierModel classifier;
};
RunData load_run_data(const PipelineConfig& config, bool with_classifier = true);

}  // namespace stylexlab::pipe
