// isac-bench: run the named experiments and write their CSV tables.
//
// exit codes: 0 all checks pass, 1 a threshold check failed,
//             2 usage error or unknown experiment, 3 configuration error

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "isacfi/config.hpp"
#include "isacfi/experiments.hpp"

namespace {

constexpr int kExitThreshold = 1;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;

isacfi::Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
  auto cfg = path.empty() ? isacfi::Config{} : isacfi::Config::load(path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw isacfi::ConfigError("--set", 0, "expected key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1), "--set");
  }
  cfg.radio();  // surfaces invalid radio parameters as config errors
  return cfg;
}

int run(const std::vector<std::string>& names, const isacfi::Config& cfg, std::uint64_t seed, std::size_t threads,
        const std::string& out_dir, bool plots) {
  bool all_pass = true;
  for (const auto& name : names) {
    const auto* exp = isacfi::find_experiment(name);
    isacfi::ExperimentContext ctx{cfg, seed, threads};
    const auto t0 = std::chrono::steady_clock::now();
    const auto out = exp->run(ctx);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto dir = names.size() > 1 ? out_dir + "/" + name : out_dir;
    const auto paths = isacfi::write_outputs(out, dir, seed, cfg.hash(), plots);
    std::printf("%s (%.1f s)\n", name.c_str(), secs);
    for (const auto& c : out.checks)
      std::printf("  %s  %s: %s\n", c.pass ? "PASS" : "FAIL", c.name.c_str(), c.detail.c_str());
    for (const auto& p : paths) std::printf("  wrote %s\n", p.c_str());
    all_pass = all_pass && out.passed();
  }
  return all_pass ? 0 : kExitThreshold;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Wi-Fi sensing experiment runner"};
  app.require_subcommand(1);

  auto* run_cmd = app.add_subcommand("run", "run one experiment, or 'all'");
  std::string experiment, config_path, out_dir = "out";
  std::uint64_t seed = 1;
  std::size_t threads = 0;
  bool plots = false;
  std::vector<std::string> overrides;
  run_cmd->add_option("experiment", experiment, "experiment name (see 'list')")->required();
  run_cmd->add_option("--seed", seed, "master seed");
  run_cmd->add_option("--config", config_path, "configuration file");
  run_cmd->add_option("--set", overrides, "override a config key: key=value (repeatable)");
  run_cmd->add_option("--out", out_dir, "output directory");
  run_cmd->add_option("--threads", threads, "worker threads (0: config, then hardware)");
  run_cmd->add_flag("--plots", plots, "also write gnuplot scripts");

  auto* list_cmd = app.add_subcommand("list", "list experiments");
  auto* keys_cmd = app.add_subcommand("keys", "list configuration keys and defaults");

  auto* validate_cmd = app.add_subcommand("validate", "check a configuration file");
  std::string validate_path;
  validate_cmd->add_option("config", validate_path, "configuration file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  if (*list_cmd) {
    for (const auto& e : isacfi::experiments()) std::printf("%-20s %s\n", e.name, e.description);
    return 0;
  }
  if (*keys_cmd) {
    for (const auto& k : isacfi::config_schema()) std::printf("%-38s %-10s %s\n", k.name, k.default_value, k.help);
    return 0;
  }

  try {
    if (*validate_cmd) {
      const auto cfg = load_config(validate_path, {});
      std::printf("%s: ok (config_hash=%s)\n", validate_path.c_str(), cfg.hash().c_str());
      return 0;
    }

    std::vector<std::string> names;
    if (experiment == "all") {
      for (const auto& e : isacfi::experiments()) names.push_back(e.name);
    } else if (isacfi::find_experiment(experiment)) {
      names.push_back(experiment);
    } else {
      std::fprintf(stderr, "unknown experiment '%s'; try 'isac-bench list'\n", experiment.c_str());
      return kExitUsage;
    }
    const auto cfg = load_config(config_path, overrides);
    return run(names, cfg, seed, threads, out_dir, plots);
  } catch (const isacfi::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    // parameters that pass the schema but not a component's own validation
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  }
}
