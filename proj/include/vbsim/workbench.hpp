#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace vbsim {

// Parsed command line. Flags override the config file.
struct CliOptions {
  std::string command;  // simulate | recovery | fit | presets | validate
  std::optional<std::string> config_path;
  std::optional<std::string> preset;
  std::vector<std::string> set_overrides;  // dotted.path=value
  std::vector<double> powers;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<std::string> out_dir;
};

// Config file merged with CLI overrides (flags win).
nlohmann::json effective_config(const CliOptions& cli);

// FNV-1a of the canonical config dump; embedded in every output file so
// stale results are detectable.
std::uint64_t settings_hash(const nlohmann::json& cfg);

int run_simulate(const nlohmann::json& cfg, std::ostream& out);
int run_recovery(const nlohmann::json& cfg, std::ostream& out);
int run_fit(const nlohmann::json& cfg, std::ostream& out);
int run_presets(const nlohmann::json& cfg, std::ostream& out);
int run_validate(const nlohmann::json& cfg, std::ostream& out);

int run_command(const CliOptions& cli, std::ostream& out);

// run_command plus error reporting and the exit-code contract:
// 0 ok, 2 config, 3 numerical, 4 fit non-convergence.
int run_cli(const CliOptions& cli, std::ostream& out, std::ostream& err);

}  // namespace vbsim
