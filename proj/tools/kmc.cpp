#include "kmc/cli_harness.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

namespace {

using kmc::cli::Experiment;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
  bool dump_config = false;
  bool inject_zero_jitter = false;
};

int run(Experiment e, const Options& o) {
  kmc::cli::ExperimentConfig cfg =
      o.config.empty() ? kmc::cli::default_config(e) : kmc::cli::load_config(o.config, e);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.output_dir.empty()) cfg.output_dir = o.output_dir;
  if (o.inject_zero_jitter) cfg.params["inject_zero_jitter"] = true;
  if (o.dump_config) {
    nlohmann::json j = cfg.canonical();
    j["output_dir"] = cfg.output_dir;
    std::cout << j.dump(2) << '\n';
    return kmc::cli::kExitOk;
  }

  kmc::cli::RunResult r;
  const int code = kmc::cli::run_experiment(cfg, &r);
  for (const auto& c : r.checks)
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << (c.detail.empty() ? "" : "  " + c.detail) << '\n';
  if (!r.error.empty()) std::cerr << "kmc: " << r.error << '\n';
  std::cout << "wrote " << cfg.output_dir << "/manifest.json (" << r.files.size() << " files)\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaussian residual cost experiments: sweeps, MDN fits, spectral diagnostics, patch classifiers."};
  app.require_subcommand(1);
  app.set_version_flag("--version", kmc::cli::kLibraryVersion);

  Options opt;
  const std::vector<std::pair<Experiment, std::string>> subs{
      {Experiment::Sweep, "Evaluate the four costs while shifting one mixture across the other"},
      {Experiment::FitMdn, "Train a mixture density network on a 2D toy density"},
      {Experiment::IdentityMap, "Identity-function approximation on a 1D grid at several shifts"},
      {Experiment::SingularGrid, "Leading singular functions of the cross Gram matrix on a 2D grid"},
      {Experiment::Classify, "Train patch Gaussian classifiers on MNIST or CIFAR subsets"},
      {Experiment::CheckSuite, "Run every built-in invariant check"}};
  std::vector<std::pair<CLI::App*, Experiment>> apps;
  for (const auto& [e, help] : subs) {
    std::string name(kmc::cli::to_string(e));
    for (auto& ch : name)
      if (ch == '_') ch = '-';
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config, "JSON config file; keys not given keep their defaults");
    sub->add_option("--seed", opt.seed, "Override the config seed");
    sub->add_option("--output-dir", opt.output_dir, "Directory for CSV files and manifest.json");
    sub->add_flag("--dump-config", opt.dump_config, "Print the resolved config and exit");
    if (e == Experiment::CheckSuite)
      sub->add_flag("--inject-zero-jitter", opt.inject_zero_jitter,
                    "Disable jitter in the rank-deficient checks (they must then fail)");
    apps.emplace_back(sub, e);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kmc::cli::kExitOk : kmc::cli::kExitUsage;
  }

  for (const auto& [sub, e] : apps) {
    if (!sub->parsed()) continue;
    try {
      return run(e, opt);
    } catch (const kmc::InvalidArgument& ex) {
      std::cerr << "kmc: " << ex.what() << '\n';
      return kmc::cli::kExitUsage;
    } catch (const std::exception& ex) {
      std::cerr << "kmc: " << ex.what() << '\n';
      return kmc::cli::kExitCheckFailed;
    }
  }
  return kmc::cli::kExitUsage;
}
