#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fuse/core.hpp"
#include "fuse/kernels.hpp"
#include "fuse/schedule.hpp"
#include "fuse/targets.hpp"

namespace fuse {

/// Axis-aligned box [lo, hi]; requires lo < hi componentwise.
struct Box {
  Vector lo;
  Vector hi;
  void validate(std::size_t d) const;
};

/// Componentwise clamp into [lo, hi].
Ensemble project_box(const Ensemble& x, const Vector& lo, const Vector& hi);
ParticleMatrix project_box(const ParticleMatrix& x, const Box& box);

struct FlowStep {
  Ensemble half;
  Ensemble next;
};

/// half = x - step * grad; next = Proj(half + sqrt(2 temperature step) z).
FlowStep forward_flow_step(const Ensemble& x, const GradientEval& grad, double step, RngStream& rng,
                           const Box* box = nullptr, double temperature = 1.0);

/// (1/n) sum_j [k(x_j, x_i) g_j - grad_1 k(x_j, x_i)] for every particle i.
ParticleMatrix kernelized_drift(const Ensemble& x, const GradientEval& energy_grad, const KernelSpec& kernel);

/// x_i - step * kernelized_drift_i
Ensemble forward_euler_kernelized_step(const Ensemble& x, const GradientEval& energy_grad,
                                       const KernelSpec& kernel, double step);

/// drift_i = (1/n) sum_j d/dy k_pi(x_j, y) at y = x_i
GradientEval ksd_flow_drift(const Ensemble& x, const SteinKernel& sk);

enum class Averaging { None, Uniform, Weighted };

/// Per-particle running weighted mean: avg <- (1 - w/W) avg + (w/W) x.
class RunningAverage {
 public:
  void add(const Ensemble& x, double weight = 1.0);
  bool empty() const { return weight_sum_ == 0.0; }
  double weight_sum() const { return weight_sum_; }
  /// Throws when nothing has been added.
  Ensemble value() const;

  /// Exact state restore for checkpoints.
  static RunningAverage restore(ParticleMatrix mean, double weight_sum);

 private:
  ParticleMatrix mean_;
  double weight_sum_ = 0.0;
};

Ensemble average_trajectory(Averaging mode, const std::vector<std::pair<Ensemble, double>>& stream);

enum class Family {
  ForwardFlow,             // ULA, SGLD, MFLD: transport by the target gradient, then noise
  LangevinKsd,             // transport by the KSD drift, then noise
  ForwardEulerKernelized,  // SVGD, VGD
  KsdDescent,              // deterministic descent along the KSD drift
};

enum class ScheduleKind { Fuse, Fixed, TamedFuse };

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::Fuse;
  double eta = 0.0;    // Fixed
  double r_eps = 0.0;  // Fuse, TamedFuse
};

/// Base kernel for the kernelized forward-Euler family. With
/// `median_heuristic` an RBF bandwidth is recomputed from every iterate.
struct KernelChoice {
  KernelSpec spec = RbfKernel{1.0};
  bool median_heuristic = true;
};

struct SamplerConfig {
  Family family = Family::ForwardFlow;
  ScheduleConfig schedule;
  std::size_t iterations = 0;
  std::optional<Box> box;
  Averaging averaging = Averaging::None;
  KernelChoice kernel;
  KernelSpec stein_base = ImqKernel{1.0, -0.5};
  double temperature = 1.0;
  /// Metrics are evaluated every `metric_every` iterations and at the last one.
  std::size_t metric_every = 1;
  /// Iterations after which the ensemble is stored in the trajectory.
  std::vector<std::size_t> snapshot_iters;
  /// When set, a resumable checkpoint is written after each snapshot iteration.
  std::optional<std::string> checkpoint_dir;

  void validate() const;
};

struct MetricHook {
  std::string name;
  std::function<double(const Ensemble&)> fn;
};

struct RunRecord {
  std::size_t iter = 0;  // 1-based count of completed iterations
  double step = 0.0;
  std::vector<double> metrics;      // NaN where not evaluated
  std::vector<double> avg_metrics;  // on the running average; empty without averaging
  double wall_ms = 0.0;
};

struct Trajectory {
  std::vector<std::string> metric_names;
  std::vector<RunRecord> records;
  std::vector<std::pair<std::size_t, Ensemble>> snapshots;
  std::optional<Ensemble> final_ensemble;
  std::optional<Ensemble> average;
  /// Iteration at which a non-finite iterate or gradient appeared; the run stops there.
  std::optional<std::size_t> diverged_at;
};

/// Called after every completed iteration with the new iterate.
using IterationObserver = std::function<void(std::size_t iter, const Ensemble& x, double step)>;

/// Everything needed to continue a run bit-exactly.
struct SamplerCheckpoint {
  std::size_t iter = 0;
  Ensemble x;
  std::optional<Ensemble> prev_half;
  std::optional<ScheduleState> schedule;
  RngStream noise_rng;
  RngStream batch_rng;
  std::optional<ParticleMatrix> average;
  double average_weight = 0.0;

  void save(const std::string& dir) const;
  static SamplerCheckpoint load(const std::string& dir);
};

/// Runs cfg.iterations iterations from `init`. Noise and minibatch draws use
/// rng.split(1) and rng.split(2).
Trajectory run_sampler(const SamplerConfig& cfg, std::shared_ptr<const Target> target, const Ensemble& init,
                       const RngStream& rng, const std::vector<MetricHook>& hooks = {},
                       const IterationObserver& observer = {});

/// Continues from a checkpoint up to cfg.iterations total iterations. Records
/// cover only the iterations run here.
Trajectory resume_sampler(const SamplerConfig& cfg, std::shared_ptr<const Target> target,
                          const SamplerCheckpoint& checkpoint, const std::vector<MetricHook>& hooks = {},
                          const IterationObserver& observer = {});

const char* to_string(Family f);
const char* to_string(ScheduleKind k);
const char* to_string(Averaging a);
Family parse_family(const std::string& s);
ScheduleKind parse_schedule_kind(const std::string& s);
Averaging parse_averaging(const std::string& s);

}  // namespace fuse
