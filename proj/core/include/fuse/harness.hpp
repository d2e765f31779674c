#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fuse/data.hpp"
#include "fuse/flows.hpp"
#include "fuse/targets.hpp"

namespace fuse {

struct CsvSource {
  std::string path;
  std::string label_column;
  std::string binarize = "none";
  bool standardize = true;
};

struct TargetSpec {
  enum class Kind { Gaussian, LogReg, NeuralNet } kind = Kind::Gaussian;

  // gaussian: the mean is explicit or uniform in mean_range per coordinate;
  // variances are explicit, uniform in var_range, or log-spaced on
  // [1, condition_number]. A dense `cov` overrides the variances.
  std::size_t dim = 0;
  std::vector<double> mean;
  std::optional<std::pair<double, double>> mean_range;
  std::vector<double> variances;
  std::optional<std::pair<double, double>> var_range;
  std::optional<double> condition_number;
  std::optional<Matrix> cov;

  // logistic regression
  LogRegGenParams logreg;
  LogRegPrior prior = GaussianPrior{1.0};
  std::size_t batch_size = 0;  // 0 = full gradient
  double train_frac = 0.8;     // 1 = no split; accuracy is measured on the training set
  std::optional<CsvSource> csv;

  // mean-field network
  std::size_t nn_train = 300;
  std::size_t nn_test = 300;
  double nn_sigma = 0.1;
  double lambda1 = 300.0;

  /// Fixes the target and data across seeds; by default each seed draws its own.
  std::optional<std::uint64_t> data_seed;
};

struct SweepSpec {
  enum class Axis { FixedEta, REps } axis = Axis::FixedEta;
  std::vector<double> values;
};

/// Log-spaced grid of `points` values from lo to hi inclusive.
std::vector<double> log_grid(double lo, double hi, std::size_t points);

struct ExperimentConfig {
  std::string name = "experiment";
  TargetSpec target;
  SamplerConfig sampler;
  std::size_t particles = 100;
  std::vector<double> init_mean{0.0};
  std::vector<double> init_var{1.0};
  std::vector<std::string> metrics;
  std::optional<SweepSpec> sweep;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "out";
  std::size_t threads = 0;  // 0 = hardware concurrency
  /// Canonical JSON text of the parsed file (sorted keys), used for hashing.
  std::string canonical;

  static ExperimentConfig parse(const std::string& json_text);
  static ExperimentConfig load(const std::string& path);
};

/// 64-bit FNV-1a of `text`, as 16 lowercase hex digits.
std::string fnv1a_hex(const std::string& text);

/// Target, data and metric hooks for one seed.
struct Problem {
  explicit Problem(Ensemble initial) : init(std::move(initial)) {}

  std::shared_ptr<const Target> target;
  std::shared_ptr<const GaussianTarget> gaussian;
  std::shared_ptr<const LogRegTarget> logreg;
  std::shared_ptr<const MeanFieldNNEnergy> nn;
  std::optional<Dataset> train;
  std::optional<Dataset> test;
  std::optional<Vector> true_beta;
  std::optional<RegressionData> nn_test_data;
  std::vector<MetricHook> hooks;
  Ensemble init;
};

Problem build_problem(const ExperimentConfig& cfg, std::uint64_t seed);

/// Metric names a target kind supports.
std::vector<std::string> available_metrics(TargetSpec::Kind kind);

struct RunResult {
  std::string run_id;
  std::uint64_t seed = 0;
  double sweep_value = 0.0;
  std::size_t sweep_index = 0;
  std::string path;
  std::vector<std::string> columns;  // metric columns in CSV order
  std::vector<double> finals;        // last-row value per column; +inf for diverged runs
  std::optional<std::size_t> diverged_at;
  std::optional<double> optimal_fixed_step;  // oracle runs only
};

struct SummaryRow {
  double sweep_value = 0.0;
  std::string metric;
  double mean = 0.0;
  double sd = 0.0;
  std::size_t n_seeds = 0;
};

struct ExecuteResult {
  std::vector<RunResult> runs;
  std::vector<SummaryRow> summary;
  std::string summary_path;
  std::string manifest_path;
};

enum class ExecuteMode { Run, Sweep, Oracle };

struct ExecuteOptions {
  ExecuteMode mode = ExecuteMode::Sweep;
  std::optional<std::string> output_dir;
  std::optional<std::size_t> threads;
};

/// Runs every (sweep value, seed) pair and writes one trajectory CSV per run,
/// summary.csv and manifest.json. In Run mode the sweep is ignored and the
/// schedule's own parameter is used; Oracle mode simulates the closed-form
/// Gaussian recursion instead of particles.
ExecuteResult execute(const ExperimentConfig& cfg, const ExecuteOptions& options = {});

// Trajectory CSV: run_id,seed,sweep_value,iter,step_size,<metrics>; empty
// cells where a metric was not evaluated.
std::string trajectory_header(const std::vector<std::string>& columns);

// Summary CSV: sweep_value,metric,mean,sd,n_seeds
void write_summary_csv(const std::string& path, const std::vector<SummaryRow>& rows);
std::vector<SummaryRow> read_summary_csv(const std::string& path);
std::vector<SummaryRow> summarize(const std::vector<RunResult>& runs);

struct Comparison {
  std::string metric;
  bool higher_is_better = false;
  std::vector<SummaryRow> fixed;
  std::vector<SummaryRow> fuse;
  double fixed_best = 0.0;
  double fixed_best_at = 0.0;
  double fuse_best = 0.0;
  double fuse_worst = 0.0;
  /// max / min of the FUSE means over its grid.
  double fuse_ratio = 0.0;
  /// fuse_best / fixed_best and fuse_worst / fixed_best, oriented so that
  /// values above one mean FUSE is worse.
  double best_ratio = 0.0;
  double worst_ratio = 0.0;
  /// FUSE means within 5% of each other across the grid.
  bool robust = false;
};

/// Empty `metric` picks the first metric present in both summaries.
Comparison sweep_compare(const std::vector<SummaryRow>& fixed, const std::vector<SummaryRow>& fuse,
                         const std::string& metric = "");
void write_comparison(std::ostream& out, const Comparison& c);

}  // namespace fuse
