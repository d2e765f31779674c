#include "fuse/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <json.hpp>

#include "fuse/gaussian_oracle.hpp"
#include "fuse/metrics.hpp"

#ifndef FUSE_VERSION
#define FUSE_VERSION "unknown"
#endif

namespace fuse {

using nlohmann::json;
namespace fs = std::filesystem;

std::vector<double> log_grid(double lo, double hi, std::size_t points) {
  if (points == 0) throw ConfigError("grid needs at least one point");
  if (!(lo > 0.0) || !(hi > 0.0)) throw ConfigError("log grid bounds must be positive");
  if (points == 1) return {lo};
  if (!(lo < hi)) throw ConfigError(fmt::format("grid lo {} must be below hi {}", lo, hi));
  std::vector<double> out(points);
  const double a = std::log10(lo);
  const double b = std::log10(hi);
  for (std::size_t k = 0; k < points; ++k) {
    out[k] = std::pow(10.0, a + (b - a) * static_cast<double>(k) / static_cast<double>(points - 1));
  }
  out.front() = lo;
  out.back() = hi;
  return out;
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

// ---------------------------------------------------------------------------
// config parsing

namespace {

void allow_keys(const json& j, const char* where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(fmt::format("{} must be an object", where));
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; })) {
      throw ConfigError(fmt::format("{}: unknown key '{}'", where, k));
    }
  }
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(fmt::format("config key '{}' has the wrong type", key));
  }
}

std::vector<double> number_or_list(const json& j, const char* key) {
  const auto& v = j.at(key);
  if (v.is_number()) return {v.get<double>()};
  if (v.is_array()) {
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(fmt::format("'{}' must hold numbers", key));
      out.push_back(e.get<double>());
    }
    return out;
  }
  throw ConfigError(fmt::format("'{}' must be a number or a list of numbers", key));
}

std::pair<double, double> range(const json& j, const char* key) {
  const auto v = number_or_list(j, key);
  if (v.size() != 2 || !(v[0] <= v[1])) throw ConfigError(fmt::format("'{}' must be [lo, hi] with lo <= hi", key));
  return {v[0], v[1]};
}

KernelSpec parse_kernel(const json& j, bool* median) {
  allow_keys(j, "kernel", {"kind", "bandwidth", "median_heuristic", "c", "beta"});
  const auto kind = get_or<std::string>(j, "kind", "rbf");
  if (median) *median = get_or<bool>(j, "median_heuristic", kind == "rbf" && !j.contains("bandwidth"));
  if (kind == "rbf") return RbfKernel{get_or<double>(j, "bandwidth", 1.0)};
  if (kind == "imq") return ImqKernel{get_or<double>(j, "c", 1.0), get_or<double>(j, "beta", -0.5)};
  throw ConfigError("unknown kernel kind '" + kind + "'");
}

TargetSpec parse_target(const json& j) {
  TargetSpec t;
  const auto kind = get_or<std::string>(j, "kind", "");
  if (kind == "gaussian") {
    allow_keys(j, "target", {"kind", "dim", "mean", "mean_range", "variances", "var_range", "condition_number", "cov",
                             "data_seed"});
    t.kind = TargetSpec::Kind::Gaussian;
    t.dim = get_or<std::size_t>(j, "dim", 0);
    if (j.contains("mean")) t.mean = number_or_list(j, "mean");
    if (j.contains("mean_range")) t.mean_range = range(j, "mean_range");
    if (j.contains("variances")) t.variances = number_or_list(j, "variances");
    if (j.contains("var_range")) t.var_range = range(j, "var_range");
    if (j.contains("condition_number")) t.condition_number = j.at("condition_number").get<double>();
    if (j.contains("cov")) {
      const auto rows = j.at("cov").get<std::vector<std::vector<double>>>();
      Matrix c(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows.size()) throw ConfigError("target.cov must be square");
        for (std::size_t k = 0; k < rows.size(); ++k) c(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = rows[r][k];
      }
      t.cov = c;
      if (t.dim == 0) t.dim = rows.size();
    }
    if (t.dim == 0) t.dim = std::max(t.mean.size(), t.variances.size());
    if (t.dim == 0) throw ConfigError("gaussian target needs 'dim'");
  } else if (kind == "logreg") {
    allow_keys(j, "target", {"kind", "N", "p", "signal", "rho", "tau", "pi_flip", "prior", "batch_size", "train_frac",
                             "csv", "data_seed"});
    t.kind = TargetSpec::Kind::LogReg;
    t.logreg.N = get_or<std::size_t>(j, "N", t.logreg.N);
    t.logreg.p = get_or<std::size_t>(j, "p", t.logreg.p);
    t.logreg.signal = get_or<double>(j, "signal", t.logreg.signal);
    t.logreg.rho = get_or<double>(j, "rho", t.logreg.rho);
    t.logreg.tau = get_or<double>(j, "tau", t.logreg.tau);
    t.logreg.pi_flip = get_or<double>(j, "pi_flip", t.logreg.pi_flip);
    t.batch_size = get_or<std::size_t>(j, "batch_size", 0);
    t.train_frac = get_or<double>(j, "train_frac", 0.8);
    if (!(t.train_frac > 0.0 && t.train_frac <= 1.0)) throw ConfigError("target.train_frac must be in (0, 1]");
    if (j.contains("prior")) {
      const auto& pj = j.at("prior");
      allow_keys(pj, "target.prior", {"kind", "lambda", "a", "b"});
      const auto pk = get_or<std::string>(pj, "kind", "gaussian");
      if (pk == "gaussian") {
        t.prior = GaussianPrior{get_or<double>(pj, "lambda", 1.0)};
      } else if (pk == "hierarchical") {
        t.prior = HierarchicalPrior{get_or<double>(pj, "a", 1.0), get_or<double>(pj, "b", 0.01)};
      } else {
        throw ConfigError("unknown prior kind '" + pk + "'");
      }
    }
    if (j.contains("csv")) {
      const auto& cj = j.at("csv");
      allow_keys(cj, "target.csv", {"path", "label", "binarize", "standardize"});
      CsvSource src;
      src.path = cj.at("path").get<std::string>();
      const auto& lab = cj.at("label");
      src.label_column = lab.is_number() ? std::to_string(lab.get<std::size_t>()) : lab.get<std::string>();
      src.binarize = get_or<std::string>(cj, "binarize", "none");
      src.standardize = get_or<bool>(cj, "standardize", true);
      t.csv = src;
    }
  } else if (kind == "nn") {
    allow_keys(j, "target", {"kind", "n_train", "n_test", "sigma", "lambda1", "data_seed"});
    t.kind = TargetSpec::Kind::NeuralNet;
    t.nn_train = get_or<std::size_t>(j, "n_train", 300);
    t.nn_test = get_or<std::size_t>(j, "n_test", 300);
    t.nn_sigma = get_or<double>(j, "sigma", 0.1);
    t.lambda1 = get_or<double>(j, "lambda1", 300.0);
  } else {
    throw ConfigError("target.kind must be one of gaussian, logreg, nn");
  }
  if (j.contains("data_seed")) t.data_seed = j.at("data_seed").get<std::uint64_t>();
  return t;
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    allow_keys(j, "config", {"name", "target", "sampler", "metrics", "sweep", "seeds", "output_dir", "threads"});
    ExperimentConfig c;
    c.canonical = j.dump();
    c.name = get_or<std::string>(j, "name", "experiment");
    if (!j.contains("target")) throw ConfigError("config needs a 'target' section");
    c.target = parse_target(j.at("target"));

    if (!j.contains("sampler")) throw ConfigError("config needs a 'sampler' section");
    const auto& sj = j.at("sampler");
    allow_keys(sj, "sampler", {"family", "schedule", "eta", "r_eps", "iterations", "particles", "init_mean", "init_var",
                               "box", "averaging", "kernel", "stein_kernel", "temperature", "snapshot_iters"});
    auto& s = c.sampler;
    s.family = parse_family(get_or<std::string>(sj, "family", "forward_flow"));
    s.schedule.kind = parse_schedule_kind(get_or<std::string>(sj, "schedule", "fuse"));
    s.schedule.eta = get_or<double>(sj, "eta", 0.0);
    s.schedule.r_eps = get_or<double>(sj, "r_eps", 0.0);
    s.iterations = get_or<std::size_t>(sj, "iterations", 0);
    c.particles = get_or<std::size_t>(sj, "particles", 100);
    if (c.particles == 0) throw ConfigError("sampler.particles must be >= 1");
    if (sj.contains("init_mean")) c.init_mean = number_or_list(sj, "init_mean");
    if (sj.contains("init_var")) c.init_var = number_or_list(sj, "init_var");
    if (sj.contains("box")) {
      const auto& bj = sj.at("box");
      allow_keys(bj, "sampler.box", {"lo", "hi"});
      const auto lo = number_or_list(bj, "lo");
      const auto hi = number_or_list(bj, "hi");
      Box b;
      b.lo = Eigen::Map<const Vector>(lo.data(), static_cast<Eigen::Index>(lo.size()));
      b.hi = Eigen::Map<const Vector>(hi.data(), static_cast<Eigen::Index>(hi.size()));
      s.box = b;
    }
    s.averaging = parse_averaging(get_or<std::string>(sj, "averaging", "none"));
    if (sj.contains("kernel")) s.kernel.spec = parse_kernel(sj.at("kernel"), &s.kernel.median_heuristic);
    if (sj.contains("stein_kernel")) s.stein_base = parse_kernel(sj.at("stein_kernel"), nullptr);
    s.temperature = get_or<double>(sj, "temperature", 1.0);
    if (sj.contains("snapshot_iters")) s.snapshot_iters = sj.at("snapshot_iters").get<std::vector<std::size_t>>();

    if (j.contains("metrics")) {
      const auto& mj = j.at("metrics");
      allow_keys(mj, "metrics", {"names", "every"});
      c.metrics = get_or<std::vector<std::string>>(mj, "names", {});
      s.metric_every = get_or<std::size_t>(mj, "every", 1);
    }
    const auto avail = available_metrics(c.target.kind);
    for (const auto& m : c.metrics) {
      if (std::find(avail.begin(), avail.end(), m) == avail.end()) {
        throw ConfigError(fmt::format("metric '{}' is not available for this target", m));
      }
    }

    if (j.contains("sweep")) {
      const auto& wj = j.at("sweep");
      allow_keys(wj, "sweep", {"axis", "lo", "hi", "points", "values"});
      SweepSpec sw;
      const auto axis = get_or<std::string>(wj, "axis", "");
      if (axis == "fixed_eta") {
        sw.axis = SweepSpec::Axis::FixedEta;
      } else if (axis == "r_eps") {
        sw.axis = SweepSpec::Axis::REps;
      } else {
        throw ConfigError("sweep.axis must be fixed_eta or r_eps");
      }
      if (wj.contains("values")) {
        sw.values = number_or_list(wj, "values");
        if (sw.values.empty()) throw ConfigError("sweep.values is empty");
        for (double v : sw.values) {
          if (!(v > 0.0)) throw ConfigError("sweep values must be positive");
        }
      } else {
        sw.values = log_grid(get_or<double>(wj, "lo", 0.0), get_or<double>(wj, "hi", 0.0),
                             get_or<std::size_t>(wj, "points", 0));
      }
      c.sweep = sw;
    }

    if (j.contains("seeds")) {
      const auto& seeds = j.at("seeds");
      if (seeds.is_array()) {
        c.seeds = seeds.get<std::vector<std::uint64_t>>();
      } else {
        allow_keys(seeds, "seeds", {"start", "count"});
        const auto start = get_or<std::uint64_t>(seeds, "start", 0);
        const auto count = get_or<std::uint64_t>(seeds, "count", 1);
        c.seeds.clear();
        for (std::uint64_t k = 0; k < count; ++k) c.seeds.push_back(start + k);
      }
      if (c.seeds.empty()) throw ConfigError("seeds must be nonempty");
    }
    c.output_dir = get_or<std::string>(j, "output_dir", "out");
    c.threads = get_or<std::size_t>(j, "threads", 0);

    // Validate the sampler with a representative schedule value.
    SamplerConfig probe = s;
    if (c.sweep) {
      if (c.sweep->axis == SweepSpec::Axis::FixedEta) {
        probe.schedule.kind = ScheduleKind::Fixed;
        probe.schedule.eta = c.sweep->values.front();
      } else {
        if (probe.schedule.kind == ScheduleKind::Fixed) probe.schedule.kind = ScheduleKind::Fuse;
        probe.schedule.r_eps = c.sweep->values.front();
      }
    }
    probe.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

// ---------------------------------------------------------------------------
// problem construction

std::vector<std::string> available_metrics(TargetSpec::Kind kind) {
  switch (kind) {
    case TargetSpec::Kind::Gaussian: return {"kl", "ksd"};
    case TargetSpec::Kind::LogReg: return {"accuracy", "ksd"};
    case TargetSpec::Kind::NeuralNet: return {"test_mse", "train_mse", "energy"};
  }
  return {};
}

namespace {

Vector broadcast(const std::vector<double>& v, std::size_t d, const char* what) {
  if (v.size() == 1) return Vector::Constant(static_cast<Eigen::Index>(d), v[0]);
  if (v.size() != d) throw ConfigError(fmt::format("{} has length {}, expected 1 or {}", what, v.size(), d));
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(d));
}

std::shared_ptr<GaussianTarget> make_gaussian(const TargetSpec& t, RngStream& rng) {
  const std::size_t d = t.dim;
  const auto D = static_cast<Eigen::Index>(d);
  Vector mean = Vector::Zero(D);
  if (!t.mean.empty()) {
    mean = broadcast(t.mean, d, "target.mean");
  } else if (t.mean_range) {
    for (Eigen::Index j = 0; j < D; ++j) mean(j) = t.mean_range->first + (t.mean_range->second - t.mean_range->first) * rng.uniform();
  }
  if (t.cov) {
    if (t.cov->rows() != D) throw ConfigError("target.cov does not match dim");
    return GaussianTarget::make(mean, *t.cov);
  }
  Vector var = Vector::Ones(D);
  if (!t.variances.empty()) {
    var = broadcast(t.variances, d, "target.variances");
  } else if (t.var_range) {
    for (Eigen::Index j = 0; j < D; ++j) var(j) = t.var_range->first + (t.var_range->second - t.var_range->first) * rng.uniform();
  } else if (t.condition_number) {
    const double k = *t.condition_number;
    if (!(k >= 1.0)) throw ConfigError("target.condition_number must be >= 1");
    for (Eigen::Index j = 0; j < D; ++j) {
      var(j) = D == 1 ? 1.0 : std::pow(k, static_cast<double>(j) / static_cast<double>(D - 1));
    }
  }
  return GaussianTarget::diagonal(mean, var);
}

}  // namespace

Problem build_problem(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto& t = cfg.target;
  RngStream data_rng = RngStream(t.data_seed.value_or(seed)).split(7);
  RngStream init_rng = RngStream(seed).split(11);

  std::shared_ptr<const Target> target;
  std::shared_ptr<const GaussianTarget> gaussian;
  std::shared_ptr<const LogRegTarget> logreg;
  std::shared_ptr<const MeanFieldNNEnergy> nn;
  std::optional<Dataset> train, test;
  std::optional<Vector> true_beta;
  std::optional<RegressionData> nn_test;
  RegressionData nn_train_data;

  switch (t.kind) {
    case TargetSpec::Kind::Gaussian: {
      gaussian = make_gaussian(t, data_rng);
      target = gaussian;
      break;
    }
    case TargetSpec::Kind::LogReg: {
      Dataset full;
      if (t.csv) {
        full = load_csv_dataset(t.csv->path, t.csv->label_column, BinarizeRule::parse(t.csv->binarize),
                                t.csv->standardize);
      } else {
        auto prob = gen_logreg(t.logreg, data_rng);
        full = std::move(prob.data);
        true_beta = std::move(prob.true_beta);
      }
      if (t.train_frac < 1.0) {
        auto sp = split(full, t.train_frac, data_rng);
        train = std::move(sp.train);
        test = std::move(sp.test);
      } else {
        train = full;
        test = full;
      }
      logreg = LogRegTarget::make(train->features, train->labels, t.prior, t.batch_size);
      target = logreg;
      break;
    }
    case TargetSpec::Kind::NeuralNet: {
      nn_train_data = gen_nn_data(t.nn_train, data_rng, t.nn_sigma);
      nn_test = gen_nn_data(t.nn_test, data_rng, t.nn_sigma);
      nn = std::make_shared<MeanFieldNNEnergy>(nn_train_data.z, nn_train_data.y, t.lambda1);
      target = nn;
      break;
    }
  }

  const std::size_t d = target->dim();
  Problem p(init_ensemble(cfg.particles, d, broadcast(cfg.init_mean, d, "sampler.init_mean"),
                          broadcast(cfg.init_var, d, "sampler.init_var"), init_rng));
  p.target = target;
  p.gaussian = gaussian;
  p.logreg = logreg;
  p.nn = nn;
  p.train = std::move(train);
  p.test = std::move(test);
  p.true_beta = std::move(true_beta);
  p.nn_test_data = nn_test;

  for (const auto& name : cfg.metrics) {
    MetricHook h{name, {}};
    if (name == "kl") {
      h.fn = [g = gaussian](const Ensemble& x) { return moment_matched_kl(x, *g).value; };
    } else if (name == "ksd") {
      SteinKernel sk{ImqKernel{1.0, -0.5}, target->score_field()};
      h.fn = [sk](const Ensemble& x) { return ksd_vstat(x, sk); };
    } else if (name == "accuracy") {
      h.fn = [te = *p.test, off = logreg->beta_offset()](const Ensemble& x) {
        return predictive_accuracy(x, te.features, te.labels, off);
      };
    } else if (name == "test_mse") {
      h.fn = [te = *nn_test](const Ensemble& x) { return test_mse(x, te.z, te.y); };
    } else if (name == "train_mse") {
      h.fn = [tr = nn_train_data](const Ensemble& x) { return test_mse(x, tr.z, tr.y); };
    } else if (name == "energy") {
      h.fn = [e = nn](const Ensemble& x) { return e->energy(x); };
    } else {
      throw ConfigError("unknown metric '" + name + "'");
    }
    p.hooks.push_back(std::move(h));
  }
  return p;
}

// ---------------------------------------------------------------------------
// output

namespace {

std::string cell(double v) { return std::isnan(v) ? std::string() : format_double(v); }

std::vector<std::string> metric_columns(const ExperimentConfig& cfg, bool with_avg) {
  std::vector<std::string> cols = cfg.metrics;
  if (with_avg) {
    for (const auto& m : cfg.metrics) cols.push_back(m + "_avg");
  }
  return cols;
}

struct Job {
  std::size_t value_index;
  double value;
  std::size_t seed_index;
  std::uint64_t seed;
};

SamplerConfig sampler_for(const ExperimentConfig& cfg, ExecuteMode mode, double value) {
  SamplerConfig s = cfg.sampler;
  if (mode != ExecuteMode::Run && cfg.sweep) {
    if (cfg.sweep->axis == SweepSpec::Axis::FixedEta) {
      s.schedule.kind = ScheduleKind::Fixed;
      s.schedule.eta = value;
    } else {
      if (s.schedule.kind == ScheduleKind::Fixed) s.schedule.kind = ScheduleKind::Fuse;
      s.schedule.r_eps = value;
    }
  }
  return s;
}

double own_value(const SamplerConfig& s) { return s.schedule.kind == ScheduleKind::Fixed ? s.schedule.eta : s.schedule.r_eps; }

void prepare_output_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "trajectories", ec);
  if (ec) throw IoError(fmt::format("cannot create output directory {}: {}", dir.string(), ec.message()));
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream out(probe);
    if (!out) throw IoError("output directory " + dir.string() + " is not writable");
  }
  fs::remove(probe, ec);
}

class TrajectoryWriter {
 public:
  TrajectoryWriter(const std::string& path, const std::vector<std::string>& cols) : out_(path), ncols_(cols.size()) {
    if (!out_) throw IoError("cannot open " + path + " for writing");
    out_ << trajectory_header(cols) << '\n';
  }
  void row(const std::string& run_id, std::uint64_t seed, double value, std::size_t iter, double step,
           const std::vector<double>& metrics) {
    out_ << run_id << ',' << seed << ',' << format_double(value) << ',' << iter << ',' << cell(step);
    for (std::size_t k = 0; k < ncols_; ++k) out_ << ',' << (k < metrics.size() ? cell(metrics[k]) : std::string());
    out_ << '\n';
  }

 private:
  std::ofstream out_;
  std::size_t ncols_;
};

RunResult run_particles(const ExperimentConfig& cfg, const Problem& prob, const Job& job, ExecuteMode mode,
                        const fs::path& dir) {
  const SamplerConfig s = sampler_for(cfg, mode, job.value);
  const bool with_avg = s.averaging != Averaging::None;
  RunResult r;
  r.run_id = fmt::format("{}-v{:02}-s{}", cfg.name, job.value_index, job.seed);
  r.seed = job.seed;
  r.sweep_value = job.value;
  r.sweep_index = job.value_index;
  r.columns = metric_columns(cfg, with_avg);
  r.path = (dir / "trajectories" / (r.run_id + ".csv")).string();

  const Trajectory traj = run_sampler(s, prob.target, prob.init, RngStream(job.seed).split(12), prob.hooks);
  TrajectoryWriter w(r.path, r.columns);
  std::vector<double> row;
  for (const auto& rec : traj.records) {
    row = rec.metrics;
    row.insert(row.end(), rec.avg_metrics.begin(), rec.avg_metrics.end());
    w.row(r.run_id, r.seed, r.sweep_value, rec.iter, rec.step, row);
  }
  r.diverged_at = traj.diverged_at;
  if (traj.diverged_at) {
    r.finals.assign(r.columns.size(), std::numeric_limits<double>::infinity());
    w.row(r.run_id, r.seed, r.sweep_value, *traj.diverged_at, std::numeric_limits<double>::quiet_NaN(), r.finals);
  } else {
    r.finals = row;
  }
  return r;
}

RunResult run_oracle(const ExperimentConfig& cfg, const Problem& prob, const Job& job, ExecuteMode mode,
                     const fs::path& dir) {
  const SamplerConfig s = sampler_for(cfg, mode, job.value);
  RunResult r;
  r.run_id = fmt::format("oracle-{}-v{:02}-s{}", cfg.name, job.value_index, job.seed);
  r.seed = job.seed;
  r.sweep_value = job.value;
  r.sweep_index = job.value_index;
  r.columns = metric_columns(cfg, s.averaging != Averaging::None);
  r.path = (dir / "trajectories" / (r.run_id + ".csv")).string();

  const auto& target = *prob.gaussian;
  const std::size_t d = target.dim();
  const Vector var = broadcast(cfg.init_var, d, "sampler.init_var");
  const auto init = GaussianState::make(broadcast(cfg.init_mean, d, "sampler.init_mean"), var.asDiagonal().toDenseMatrix());
  const auto schedule = s.schedule.kind == ScheduleKind::Fixed ? OracleSchedule::fixed(s.schedule.eta)
                                                               : OracleSchedule::fuse(s.schedule.r_eps);
  const auto pi = GaussianState::of(target);
  TrajectoryWriter w(r.path, r.columns);
  std::vector<double> row(r.columns.size(), std::numeric_limits<double>::quiet_NaN());
  try {
    const auto tr = simulate_oracle(init, target, schedule, s.iterations);
    for (std::size_t t = 1; t <= s.iterations; ++t) {
      for (std::size_t k = 0; k < cfg.metrics.size(); ++k) {
        if (cfg.metrics[k] == "kl") row[k] = kl_gaussian(tr.states[t], pi);
      }
      w.row(r.run_id, r.seed, r.sweep_value, t, tr.steps[t - 1], row);
    }
    r.finals = row;
    r.optimal_fixed_step = oracle_optimal_fixed_step(tr, target);
  } catch (const NumericError&) {
    r.finals.assign(r.columns.size(), std::numeric_limits<double>::infinity());
    r.diverged_at = 0;
  }
  return r;
}

}  // namespace

std::string trajectory_header(const std::vector<std::string>& columns) {
  std::string h = "run_id,seed,sweep_value,iter,step_size";
  for (const auto& c : columns) h += "," + c;
  return h;
}

std::vector<SummaryRow> summarize(const std::vector<RunResult>& runs) {
  std::map<std::size_t, std::vector<const RunResult*>> by_value;
  for (const auto& r : runs) by_value[r.sweep_index].push_back(&r);
  std::vector<SummaryRow> out;
  for (const auto& [idx, group] : by_value) {
    const auto& cols = group.front()->columns;
    for (std::size_t k = 0; k < cols.size(); ++k) {
      SummaryRow row;
      row.sweep_value = group.front()->sweep_value;
      row.metric = cols[k];
      row.n_seeds = group.size();
      double sum = 0.0;
      for (const auto* r : group) sum += r->finals[k];
      row.mean = sum / static_cast<double>(group.size());
      double ss = 0.0;
      for (const auto* r : group) ss += (r->finals[k] - row.mean) * (r->finals[k] - row.mean);
      row.sd = group.size() > 1 ? std::sqrt(ss / static_cast<double>(group.size() - 1)) : 0.0;
      if (!std::isfinite(row.mean)) row.sd = std::numeric_limits<double>::quiet_NaN();
      out.push_back(row);
    }
  }
  return out;
}

void write_summary_csv(const std::string& path, const std::vector<SummaryRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "sweep_value,metric,mean,sd,n_seeds\n";
  for (const auto& r : rows) {
    out << format_double(r.sweep_value) << ',' << r.metric << ',' << format_double(r.mean) << ','
        << format_double(r.sd) << ',' << r.n_seeds << '\n';
  }
}

std::vector<SummaryRow> read_summary_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("sweep_value,metric,mean,sd,n_seeds", 0) != 0) {
    throw IoError(path + ": not a summary CSV (bad header)");
  }
  std::vector<SummaryRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) f.push_back(c);
    if (f.size() != 5) throw IoError(fmt::format("{}:{}: expected 5 fields", path, line_no));
    try {
      rows.push_back({std::stod(f[0]), f[1], std::stod(f[2]), std::stod(f[3]), std::stoul(f[4])});
    } catch (const std::exception&) {
      throw IoError(fmt::format("{}:{}: malformed number", path, line_no));
    }
  }
  return rows;
}

ExecuteResult execute(const ExperimentConfig& cfg, const ExecuteOptions& opt) {
  if (opt.mode == ExecuteMode::Sweep && !cfg.sweep) throw ConfigError("sweep mode needs a 'sweep' section");
  if (opt.mode == ExecuteMode::Oracle) {
    if (cfg.target.kind != TargetSpec::Kind::Gaussian) throw ConfigError("oracle mode needs a gaussian target");
    if (cfg.sampler.family != Family::ForwardFlow) throw ConfigError("oracle mode needs the forward_flow family");
    if (cfg.sampler.schedule.kind == ScheduleKind::TamedFuse && !(cfg.sweep && cfg.sweep->axis == SweepSpec::Axis::FixedEta)) {
      throw ConfigError("oracle mode supports fixed and fuse schedules only");
    }
  }
  fs::path dir = opt.output_dir.value_or(cfg.output_dir);
  if (opt.mode == ExecuteMode::Oracle) dir /= "oracle";
  prepare_output_dir(dir);

  std::vector<double> values;
  if (opt.mode != ExecuteMode::Run && cfg.sweep) {
    values = cfg.sweep->values;
  } else {
    values = {own_value(cfg.sampler)};
  }
  {
    SamplerConfig probe = sampler_for(cfg, opt.mode, values.front());
    probe.validate();
  }

  std::vector<Problem> problems;
  problems.reserve(cfg.seeds.size());
  for (auto seed : cfg.seeds) problems.push_back(build_problem(cfg, seed));

  std::vector<Job> jobs;
  for (std::size_t v = 0; v < values.size(); ++v) {
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s) jobs.push_back({v, values[v], s, cfg.seeds[s]});
  }

  std::vector<RunResult> results(jobs.size());
  std::size_t nthreads = opt.threads.value_or(cfg.threads);
  if (nthreads == 0) nthreads = std::max(1u, std::thread::hardware_concurrency());
  nthreads = std::min(nthreads, jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= jobs.size()) return;
      try {
        const auto& job = jobs[k];
        const auto& prob = problems[job.seed_index];
        results[k] = opt.mode == ExecuteMode::Oracle ? run_oracle(cfg, prob, job, opt.mode, dir)
                                                     : run_particles(cfg, prob, job, opt.mode, dir);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = jobs.size();
      }
    }
  };
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  ExecuteResult out;
  out.runs = std::move(results);
  out.summary = summarize(out.runs);
  out.summary_path = (dir / "summary.csv").string();
  write_summary_csv(out.summary_path, out.summary);

  json manifest;
  manifest["name"] = cfg.name;
  manifest["mode"] = opt.mode == ExecuteMode::Run ? "run" : opt.mode == ExecuteMode::Sweep ? "sweep" : "oracle";
  manifest["config"] = json::parse(cfg.canonical);
  manifest["config_hash"] = "fnv1a64:" + fnv1a_hex(cfg.canonical);
  manifest["version"] = FUSE_VERSION;
  manifest["eigen_version"] = fmt::format("{}.{}.{}", EIGEN_WORLD_VERSION, EIGEN_MAJOR_VERSION, EIGEN_MINOR_VERSION);
  manifest["summary"] = "summary.csv";
  manifest["trajectory_header"] = trajectory_header(out.runs.front().columns);
  json runs = json::array();
  for (const auto& r : out.runs) {
    json jr{{"run_id", r.run_id},
            {"seed", r.seed},
            {"sweep_value", r.sweep_value},
            {"file", fs::relative(r.path, dir).generic_string()}};
    jr["diverged_at"] = r.diverged_at ? json(*r.diverged_at) : json(nullptr);
    if (r.optimal_fixed_step) jr["optimal_fixed_step"] = *r.optimal_fixed_step;
    runs.push_back(std::move(jr));
  }
  manifest["runs"] = std::move(runs);
  if (cfg.target.csv) {
    json stdz = json::array();
    for (std::size_t s = 0; s < problems.size(); ++s) {
      const auto& tr = problems[s].train;
      json e{{"seed", cfg.seeds[s]}, {"standardized", cfg.target.csv->standardize}};
      if (tr && tr->feature_means) {
        e["feature_means"] = std::vector<double>(tr->feature_means->data(), tr->feature_means->data() + tr->feature_means->size());
        e["feature_sds"] = std::vector<double>(tr->feature_sds->data(), tr->feature_sds->data() + tr->feature_sds->size());
      }
      stdz.push_back(std::move(e));
    }
    manifest["standardization"] = std::move(stdz);
  }
  out.manifest_path = (dir / "manifest.json").string();
  std::ofstream mf(out.manifest_path);
  if (!mf) throw IoError("cannot write " + out.manifest_path);
  mf << manifest.dump(2) << '\n';
  return out;
}

// ---------------------------------------------------------------------------
// comparison

Comparison sweep_compare(const std::vector<SummaryRow>& fixed, const std::vector<SummaryRow>& fuse,
                         const std::string& metric) {
  if (fixed.empty() || fuse.empty()) throw InvalidParameter("sweep_compare: empty summary");
  Comparison c;
  c.metric = metric;
  if (c.metric.empty()) {
    for (const auto& r : fixed) {
      if (std::any_of(fuse.begin(), fuse.end(), [&](const SummaryRow& f) { return f.metric == r.metric; })) {
        c.metric = r.metric;
        break;
      }
    }
    if (c.metric.empty()) throw InvalidParameter("sweep_compare: summaries share no metric");
  }
  for (const auto& r : fixed) {
    if (r.metric == c.metric) c.fixed.push_back(r);
  }
  for (const auto& r : fuse) {
    if (r.metric == c.metric) c.fuse.push_back(r);
  }
  if (c.fixed.empty() || c.fuse.empty()) {
    throw InvalidParameter("sweep_compare: metric '" + c.metric + "' missing from one summary");
  }
  c.higher_is_better = c.metric.rfind("accuracy", 0) == 0;
  const auto better = [&](double a, double b) { return c.higher_is_better ? a > b : a < b; };
  // NaN means (diverged groups) never count as best.
  const auto mean_or_worst = [&](double m) {
    if (std::isnan(m)) return c.higher_is_better ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity();
    return m;
  };

  c.fixed_best = mean_or_worst(c.fixed.front().mean);
  c.fixed_best_at = c.fixed.front().sweep_value;
  for (const auto& r : c.fixed) {
    if (better(mean_or_worst(r.mean), c.fixed_best)) {
      c.fixed_best = mean_or_worst(r.mean);
      c.fixed_best_at = r.sweep_value;
    }
  }
  c.fuse_best = c.fuse_worst = mean_or_worst(c.fuse.front().mean);
  double lo = c.fuse_best;
  double hi = c.fuse_best;
  for (const auto& r : c.fuse) {
    const double m = mean_or_worst(r.mean);
    if (better(m, c.fuse_best)) c.fuse_best = m;
    if (better(c.fuse_worst, m)) c.fuse_worst = m;
    lo = std::min(lo, m);
    hi = std::max(hi, m);
  }
  c.fuse_ratio = hi == lo ? 1.0 : hi / lo;
  if (c.higher_is_better) {
    c.best_ratio = c.fixed_best / c.fuse_best;
    c.worst_ratio = c.fixed_best / c.fuse_worst;
  } else {
    c.best_ratio = c.fuse_best == c.fixed_best ? 1.0 : c.fuse_best / c.fixed_best;
    c.worst_ratio = c.fuse_worst == c.fixed_best ? 1.0 : c.fuse_worst / c.fixed_best;
  }
  c.robust = c.fuse_ratio <= 1.05;
  return c;
}

void write_comparison(std::ostream& out, const Comparison& c) {
  out << "method,sweep_value,metric,mean,sd,n_seeds\n";
  for (const auto& r : c.fixed) {
    out << "fixed," << format_double(r.sweep_value) << ',' << r.metric << ',' << format_double(r.mean) << ','
        << format_double(r.sd) << ',' << r.n_seeds << '\n';
  }
  for (const auto& r : c.fuse) {
    out << "fuse," << format_double(r.sweep_value) << ',' << r.metric << ',' << format_double(r.mean) << ','
        << format_double(r.sd) << ',' << r.n_seeds << '\n';
  }
  out << '\n';
  out << "metric," << c.metric << '\n';
  out << "fixed_best," << format_double(c.fixed_best) << '\n';
  out << "fixed_best_at," << format_double(c.fixed_best_at) << '\n';
  out << "fuse_best," << format_double(c.fuse_best) << '\n';
  out << "fuse_worst," << format_double(c.fuse_worst) << '\n';
  out << "fuse_max_over_min," << format_double(c.fuse_ratio) << '\n';
  out << "fuse_best_over_fixed_best," << format_double(c.best_ratio) << '\n';
  out << "fuse_worst_over_fixed_best," << format_double(c.worst_ratio) << '\n';
  out << "robust," << (c.robust ? "true" : "false") << '\n';
}

}  // namespace fuse
