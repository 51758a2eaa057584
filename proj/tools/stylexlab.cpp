#include <cstdio>
#include <iostream>
#include <string>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "stylexlab/pipeline.hpp"

using namespace stylexlab;

int main(int argc, char** argv) {
  CLI::App app{"Classifier explanation workflow on StyleSpace attributes"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  bool have_seed = false, override_gate = false, deterministic = false, quiet = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Pipeline configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { seed = s; have_seed = true; },
                                            "Override the global seed");
    sub->add_flag("--override-gate", override_gate, "Train the generator even if the classifier fails the AUC gate");
    sub->add_flag("--deterministic", deterministic, "Use the scalar kernels for bit-reproducible results");
    sub->add_flag("-q,--quiet", quiet, "Only log warnings and errors");
  };

  for (const char* stage : pipe::kStages) add_common(app.add_subcommand(stage, std::string("Run the ") + stage + " stage"));
  add_common(app.add_subcommand("full", "Run every stage in order"));
  auto* check = app.add_subcommand("check-config", "Validate a configuration file and list every problem");
  check->add_option("--config", config_path, "Pipeline configuration (JSON)")->required();
  auto* status = app.add_subcommand("status", "Print the run manifest");
  status->add_option("--config", config_path, "Pipeline configuration (JSON)")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : pipe::kValidation;
  }
  const auto* sub = app.get_subcommands().front();
  const std::string cmd = sub->get_name();
  if (quiet) spdlog::set_level(spdlog::level::warn);

  if (cmd == "check-config") {
    const auto errors = pipe::validate_config(config_path);
    if (errors.empty()) {
      std::cout << "ok\n";
      return pipe::kOk;
    }
    for (const auto& e : errors) std::cerr << "error: " << e << "\n";
    return pipe::kValidation;
  }

  try {
    auto config = pipe::load_config(config_path);
    if (have_seed) pipe::apply_seed(config, seed);
    if (deterministic) config.deterministic = true;
    if (cmd == "status") {
      std::cout << nlohmann::json(pipe::read_manifest(config)).dump(2) << "\n";
      return pipe::kOk;
    }
    const pipe::RunOptions options{override_gate};
    const auto manifest = cmd == "full" ? pipe::full_run(config, options) : pipe::run_stage(config, cmd, options);
    for (const auto& s : manifest.stages) std::cout << s.name << ": " << s.status << "\n";
    return pipe::kOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return pipe::exit_code_for(e);
  }
}
