#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fuse/harness.hpp"

namespace {

constexpr int kUsage = 2;

int run_experiment(const std::string& config, fuse::ExecuteMode mode, const std::optional<std::string>& out,
                   const std::optional<std::size_t>& threads) {
  if (!std::filesystem::is_regular_file(config)) {
    std::cerr << "fuse: config file not found: " << config << '\n';
    return kUsage;
  }
  const auto cfg = fuse::ExperimentConfig::load(config);
  fuse::ExecuteOptions opt;
  opt.mode = mode;
  opt.output_dir = out;
  opt.threads = threads;
  const auto res = fuse::execute(cfg, opt);
  std::size_t diverged = 0;
  for (const auto& r : res.runs) diverged += r.diverged_at.has_value();
  std::cout << res.runs.size() << " runs";
  if (diverged) std::cout << " (" << diverged << " diverged)";
  std::cout << "\nsummary: " << res.summary_path << "\nmanifest: " << res.manifest_path << '\n';
  return 0;
}

int run_compare(const std::string& a, const std::string& b, const std::string& metric,
                const std::optional<std::string>& out) {
  for (const auto& p : {a, b}) {
    if (!std::filesystem::is_regular_file(p)) {
      std::cerr << "fuse: summary file not found: " << p << '\n';
      return kUsage;
    }
  }
  const auto c = fuse::sweep_compare(fuse::read_summary_csv(a), fuse::read_summary_csv(b), metric);
  if (out) {
    std::ofstream f(*out);
    if (!f) throw fuse::IoError("cannot write " + *out);
    fuse::write_comparison(f, c);
  }
  fuse::write_comparison(std::cout, c);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Particle samplers with parameter-free step sizes"};
  app.require_subcommand(1);

  std::string config;
  std::optional<std::string> out;
  std::optional<std::size_t> threads;
  auto add_exec = [&](const char* name, const char* help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("config", config, "experiment JSON")->required();
    sub->add_option("--out", out, "output directory (overrides the config)");
    sub->add_option("--threads", threads, "worker threads (0 = all cores)");
    return sub;
  };
  auto* run = add_exec("run", "run the configured sampler once per seed");
  auto* sweep = add_exec("sweep", "run every value of the configured sweep grid");
  auto* oracle = add_exec("oracle", "closed-form Gaussian trajectories on the sweep grid");

  std::string a, b, metric;
  std::optional<std::string> cmp_out;
  auto* compare = app.add_subcommand("compare", "compare a fixed-step summary with a FUSE summary");
  compare->add_option("fixed", a, "summary.csv of the fixed-step sweep")->required();
  compare->add_option("fuse", b, "summary.csv of the FUSE sweep")->required();
  compare->add_option("--metric", metric, "metric to compare (default: first shared)");
  compare->add_option("--out", cmp_out, "also write the table to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*run) return run_experiment(config, fuse::ExecuteMode::Run, out, threads);
    if (*sweep) return run_experiment(config, fuse::ExecuteMode::Sweep, out, threads);
    if (*oracle) return run_experiment(config, fuse::ExecuteMode::Oracle, out, threads);
    if (*compare) return run_compare(a, b, metric, cmp_out);
  } catch (const fuse::ConfigError& e) {
    std::cerr << "fuse: config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fuse: " << e.what() << '\n';
    return 1;
  }
  return kUsage;
}
