// vbsim: simulate, ingest, and fit pulsed-PL traces of optically pumped
// spin-defect rate models.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "vbsim/workbench.hpp"

int main(int argc, char** argv) {
  CLI::App app{"rate-model workbench for pulsed photoluminescence"};
  app.require_subcommand(1);

  std::string config, preset, out;
  std::vector<std::string> sets;
  std::vector<double> powers;
  std::uint64_t seed = 0;
  int jobs = 1;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config, "JSON config file")
        ->type_size(1);
    cmd->add_option("--preset", preset, "model preset")
        ->check(CLI::IsMember({"7level", "9level"}))
        ->type_size(1);
    cmd->add_option("--set", sets, "config override, key.path=value")
        ->type_size(1);
    cmd->add_option("--power", powers, "laser powers in mW, comma separated")
        ->delimiter(',')
        ->type_size(1);
    cmd->add_option("--seed", seed, "base seed for noise and fit starts")
        ->type_size(1);
    cmd->add_option("--jobs", jobs, "worker threads for batch items")
        ->check(CLI::PositiveNumber)
        ->type_size(1);
    cmd->add_option("--out", out, "output directory")->type_size(1);
  };

  add_common(app.add_subcommand(
      "simulate", "synthesize PL traces for a pulse sequence"));
  add_common(app.add_subcommand(
      "recovery", "pulse-recovery scans and singlet-lifetime extraction"));
  add_common(
      app.add_subcommand("fit", "joint rate-model fit to recorded traces"));
  add_common(app.add_subcommand("presets",
                                "list or export the built-in level schemes"));
  add_common(
      app.add_subcommand("validate", "check a config without running it"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // usage problems are config errors
  }

  CLI::App* cmd = app.get_subcommands().front();
  vbsim::CliOptions cli;
  cli.command = cmd->get_name();
  if (cmd->count("--config")) cli.config_path = config;
  if (cmd->count("--preset")) cli.preset = preset;
  cli.set_overrides = sets;
  cli.powers = powers;
  if (cmd->count("--seed")) cli.seed = seed;
  if (cmd->count("--jobs")) cli.jobs = jobs;
  if (cmd->count("--out")) cli.out_dir = out;
  return vbsim::run_cli(cli, std::cout, std::cerr);
}
