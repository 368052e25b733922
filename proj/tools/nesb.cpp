// SPDX-License-Identifier: Apache-2.0
//
// Batch front end: reads a JSON problem description, runs the requested
// solver / flow / oracle check, and writes CSV + JSON artifacts.

#include <CLI11.hpp>

#include "nesb/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"divergence-regularized dynamic transport solver"};
  app.require_subcommand(1);

  std::string config_path;
  nesb::CliOverrides overrides;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "path to the JSON run config")->required();
    sub->add_option("--out", out_dir, "output directory (overrides config)");
    sub->add_option("--threads", overrides.threads, "worker threads for linear algebra");
    sub->add_option("--seed", seed, "rng seed (overrides config)")
        ->each([&](const std::string&) { seed_set = true; });
  };

  CLI::App* solve = app.add_subcommand("solve", "solve the bridge problem");
  CLI::App* flow = app.add_subcommand("flow", "compute the marginal flow");
  CLI::App* check = app.add_subcommand("check", "cross-check against the path oracle");
  add_common(solve);
  add_common(flow);
  add_common(check);

  CLI11_PARSE(app, argc, argv);

  if (!out_dir.empty()) overrides.out_dir = out_dir;
  if (seed_set) overrides.seed = seed;

  if (solve->parsed()) return nesb::cmd_solve(config_path, overrides);
  if (flow->parsed()) return nesb::cmd_flow(config_path, overrides);
  if (check->parsed()) return nesb::cmd_check(config_path, overrides);
  return nesb::kExitConfig;
}
