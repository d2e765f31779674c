#include "fuse/flows.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include <fmt/format.h>
#include <json.hpp>

namespace fuse {

// ---------------------------------------------------------------------------
// projection

void Box::validate(std::size_t d) const {
  if (static_cast<std::size_t>(lo.size()) != d || static_cast<std::size_t>(hi.size()) != d) {
    throw ShapeMismatch(fmt::format("box bounds have length {}/{}, expected {}", lo.size(), hi.size(), d));
  }
  for (Eigen::Index j = 0; j < lo.size(); ++j) {
    if (!(lo(j) < hi(j))) throw InvalidParameter(fmt::format("box coordinate {}: lo {} is not below hi {}", j, lo(j), hi(j)));
  }
}

ParticleMatrix project_box(const ParticleMatrix& x, const Box& box) {
  box.validate(static_cast<std::size_t>(x.cols()));
  ParticleMatrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    out.row(i) = x.row(i).cwiseMax(box.lo.transpose()).cwiseMin(box.hi.transpose());
  }
  return out;
}

Ensemble project_box(const Ensemble& x, const Vector& lo, const Vector& hi) {
  return Ensemble(project_box(x.positions(), Box{lo, hi}));
}

// ---------------------------------------------------------------------------
// single steps

namespace {

void check_step(double step, const char* who) {
  if (!(step > 0.0) || !std::isfinite(step)) throw InvalidParameter(fmt::format("{}: step must be positive, got {}", who, step));
}

void check_grad_shape(const Ensemble& x, const GradientEval& g, const char* who) {
  if (static_cast<std::size_t>(g.values.rows()) != x.size() || static_cast<std::size_t>(g.values.cols()) != x.dim()) {
    throw ShapeMismatch(fmt::format("{}: gradient is {}x{}, ensemble is {}x{}", who, g.values.rows(), g.values.cols(),
                                    x.size(), x.dim()));
  }
}

ParticleMatrix noise_matrix(Eigen::Index n, Eigen::Index d, RngStream& rng) {
  ParticleMatrix z(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) z(i, j) = rng.normal();
  }
  return z;
}

}  // namespace

FlowStep forward_flow_step(const Ensemble& x, const GradientEval& grad, double step, RngStream& rng, const Box* box,
                           double temperature) {
  check_step(step, "forward_flow_step");
  check_grad_shape(x, grad, "forward_flow_step");
  if (!(temperature >= 0.0)) throw InvalidParameter("forward_flow_step: temperature must be >= 0");
  const auto& p = x.positions();
  ParticleMatrix half = p - step * grad.values;
  ParticleMatrix next = half + std::sqrt(2.0 * temperature * step) * noise_matrix(p.rows(), p.cols(), rng);
  if (box) next = project_box(next, *box);
  return {Ensemble(std::move(half)), Ensemble(std::move(next))};
}

ParticleMatrix kernelized_drift(const Ensemble& x, const GradientEval& energy_grad, const KernelSpec& kernel) {
  validate(kernel);
  check_grad_shape(x, energy_grad, "kernelized_drift");
  const auto& p = x.positions();
  const Eigen::Index n = p.rows();
  ParticleMatrix drift = ParticleMatrix::Zero(n, p.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto delta = (p.row(j) - p.row(i)).eval();
      const auto prof = radial_profile(kernel, delta.squaredNorm());
      // grad_1 k(x_j, x_i) = 2 phi' (x_j - x_i)
      drift.row(i) += prof.phi * energy_grad.values.row(j) - 2.0 * prof.d1 * delta;
    }
  }
  drift /= static_cast<double>(n);
  return drift;
}

Ensemble forward_euler_kernelized_step(const Ensemble& x, const GradientEval& energy_grad, const KernelSpec& kernel,
                                       double step) {
  check_step(step, "forward_euler_kernelized_step");
  return Ensemble(x.positions() - step * kernelized_drift(x, energy_grad, kernel));
}

GradientEval ksd_flow_drift(const Ensemble& x, const SteinKernel& sk) {
  if (!sk.score) throw InvalidParameter("ksd_flow_drift: stein kernel has no score field");
  validate(sk.base);
  const std::size_t n = x.size();
  std::vector<Vector> pts(n), scores(n);
  std::vector<Matrix> jacs(n);
  for (std::size_t i = 0; i < n; ++i) {
    pts[i] = x.particle(i);
    scores[i] = sk.score->score(pts[i]);
    jacs[i] = sk.score->score_jacobian(pts[i]);
  }
  GradientEval g;
  g.values = ParticleMatrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(x.dim()));
  for (std::size_t i = 0; i < n; ++i) {
    Vector acc = Vector::Zero(static_cast<Eigen::Index>(x.dim()));
    for (std::size_t j = 0; j < n; ++j) acc += stein_kernel_grad2(sk.base, pts[j], pts[i], scores[j], scores[i], jacs[i]);
    g.values.row(static_cast<Eigen::Index>(i)) = acc.transpose() / static_cast<double>(n);
  }
  return g;
}

// ---------------------------------------------------------------------------
// averaging

void RunningAverage::add(const Ensemble& x, double weight) {
  if (!(weight > 0.0) || !std::isfinite(weight)) throw InvalidParameter(fmt::format("averaging weight must be positive, got {}", weight));
  if (weight_sum_ == 0.0) {
    mean_ = x.positions();
    weight_sum_ = weight;
    return;
  }
  if (mean_.rows() != x.positions().rows() || mean_.cols() != x.positions().cols()) {
    throw ShapeMismatch("running average: ensemble shape changed");
  }
  weight_sum_ += weight;
  const double frac = weight / weight_sum_;
  mean_ = (1.0 - frac) * mean_ + frac * x.positions();
}

Ensemble RunningAverage::value() const {
  if (weight_sum_ == 0.0) throw InvalidParameter("running average: zero total weight");
  return Ensemble(mean_);
}

RunningAverage RunningAverage::restore(ParticleMatrix mean, double weight_sum) {
  RunningAverage a;
  a.mean_ = std::move(mean);
  a.weight_sum_ = weight_sum;
  return a;
}

Ensemble average_trajectory(Averaging mode, const std::vector<std::pair<Ensemble, double>>& stream) {
  if (mode == Averaging::None) throw InvalidParameter("average_trajectory: averaging mode is none");
  RunningAverage avg;
  for (const auto& [x, w] : stream) avg.add(x, mode == Averaging::Uniform ? 1.0 : w);
  return avg.value();
}

// ---------------------------------------------------------------------------
// configuration

void SamplerConfig::validate() const {
  if (iterations == 0) throw ConfigError("sampler: iterations must be >= 1");
  if (metric_every == 0) throw ConfigError("sampler: metric_every must be >= 1");
  switch (schedule.kind) {
    case ScheduleKind::Fixed:
      if (!(schedule.eta > 0.0) || !std::isfinite(schedule.eta)) {
        throw ConfigError(fmt::format("sampler: fixed step must be positive, got {}", schedule.eta));
      }
      break;
    case ScheduleKind::Fuse:
    case ScheduleKind::TamedFuse:
      if (!(schedule.r_eps > 0.0) || !std::isfinite(schedule.r_eps)) {
        throw ConfigError(fmt::format("sampler: r_eps must be positive, got {}", schedule.r_eps));
      }
      break;
  }
  if (!(temperature >= 0.0)) throw ConfigError("sampler: temperature must be >= 0");
  if (box && (box->lo.size() != box->hi.size() || (box->lo.array() >= box->hi.array()).any())) {
    throw ConfigError("sampler: box needs lo < hi with matching dimensions");
  }
  try {
    fuse::validate(kernel.spec);
    fuse::validate(stein_base);
  } catch (const InvalidParameter& e) {
    throw ConfigError(std::string("sampler: ") + e.what());
  }
}

const char* to_string(Family f) {
  switch (f) {
    case Family::ForwardFlow: return "forward_flow";
    case Family::LangevinKsd: return "langevin_ksd";
    case Family::ForwardEulerKernelized: return "forward_euler_kernelized";
    case Family::KsdDescent: return "ksd_descent";
  }
  return "?";
}

const char* to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::Fuse: return "fuse";
    case ScheduleKind::Fixed: return "fixed";
    case ScheduleKind::TamedFuse: return "tamed_fuse";
  }
  return "?";
}

const char* to_string(Averaging a) {
  switch (a) {
    case Averaging::None: return "none";
    case Averaging::Uniform: return "uniform";
    case Averaging::Weighted: return "weighted";
  }
  return "?";
}

Family parse_family(const std::string& s) {
  for (auto f : {Family::ForwardFlow, Family::LangevinKsd, Family::ForwardEulerKernelized, Family::KsdDescent}) {
    if (s == to_string(f)) return f;
  }
  throw ConfigError("unknown sampler family '" + s + "'");
}

ScheduleKind parse_schedule_kind(const std::string& s) {
  for (auto k : {ScheduleKind::Fuse, ScheduleKind::Fixed, ScheduleKind::TamedFuse}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown schedule '" + s + "'");
}

Averaging parse_averaging(const std::string& s) {
  for (auto a : {Averaging::None, Averaging::Uniform, Averaging::Weighted}) {
    if (s == to_string(a)) return a;
  }
  throw ConfigError("unknown averaging mode '" + s + "'");
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

void write_matrix_csv(const std::string& path, const ParticleMatrix& m) { write_ensemble_csv(path, Ensemble(m)); }

nlohmann::json rng_json(const RngStream& r) { return {{"seed", r.seed()}, {"position", r.position()}}; }

RngStream rng_from_json(const nlohmann::json& j) {
  return RngStream(j.at("seed").get<std::uint64_t>(), j.at("position").get<std::uint64_t>());
}

}  // namespace

void SamplerCheckpoint::save(const std::string& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path base(dir);
  nlohmann::json j;
  j["iter"] = iter;
  j["noise_rng"] = rng_json(noise_rng);
  j["batch_rng"] = rng_json(batch_rng);
  write_ensemble_csv((base / "x.csv").string(), x);
  j["has_prev_half"] = prev_half.has_value();
  if (prev_half) write_ensemble_csv((base / "prev_half.csv").string(), *prev_half);
  j["has_schedule"] = schedule.has_value();
  if (schedule) {
    std::visit([&](const auto& s) { save_schedule_state((base / "schedule.json").string(), "reference.csv", s); },
               *schedule);
  }
  j["average_weight"] = average_weight;
  j["has_average"] = average.has_value();
  if (average) write_matrix_csv((base / "average.csv").string(), *average);
  std::ofstream out(base / "checkpoint.json");
  if (!out) throw IoError("cannot write checkpoint in " + dir);
  out << j.dump(2) << '\n';
}

SamplerCheckpoint SamplerCheckpoint::load(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path base(dir);
  std::ifstream in(base / "checkpoint.json");
  if (!in) throw IoError("no checkpoint.json in " + dir);
  try {
    nlohmann::json j;
    in >> j;
    std::optional<Ensemble> prev;
    if (j.at("has_prev_half").get<bool>()) prev = read_ensemble_csv((base / "prev_half.csv").string());
    std::optional<ScheduleState> sched;
    if (j.at("has_schedule").get<bool>()) sched = load_schedule_state((base / "schedule.json").string());
    std::optional<ParticleMatrix> avg;
    if (j.at("has_average").get<bool>()) avg = read_ensemble_csv((base / "average.csv").string()).positions();
    return SamplerCheckpoint{j.at("iter").get<std::size_t>(),
                             read_ensemble_csv((base / "x.csv").string()),
                             std::move(prev),
                             std::move(sched),
                             rng_from_json(j.at("noise_rng")),
                             rng_from_json(j.at("batch_rng")),
                             std::move(avg),
                             j.at("average_weight").get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw IoError(dir + "/checkpoint.json: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// the sampler loop

namespace {

bool is_flow(Family f) { return f == Family::ForwardFlow || f == Family::LangevinKsd; }

template <class E>
[[noreturn]] void rethrow_at(const E& e, std::size_t iter) {
  throw E(fmt::format("iteration {}: {}", iter, e.what()));
}

struct Diverged {};

class Engine {
 public:
  Engine(const SamplerConfig& cfg, std::shared_ptr<const Target> target, SamplerCheckpoint cp,
         const std::vector<MetricHook>& hooks, const IterationObserver& observer)
      : cfg_(cfg), target_(std::move(target)), cp_(std::move(cp)), hooks_(hooks), observer_(observer) {
    cfg_.validate();
    if (!target_) throw InvalidParameter("run_sampler: null target");
    if (cp_.x.dim() != target_->dim()) {
      throw ShapeMismatch(fmt::format("run_sampler: ensemble dimension {} vs target dimension {}", cp_.x.dim(),
                                      target_->dim()));
    }
    if (cfg_.box) cfg_.box->validate(cp_.x.dim());
    if (cfg_.family == Family::LangevinKsd || cfg_.family == Family::KsdDescent) {
      auto score = target_->score_field();
      if (!score) throw ConfigError(fmt::format("sampler family {} needs a target with a score", to_string(cfg_.family)));
      stein_ = SteinKernel{cfg_.stein_base, std::move(score)};
    }
    if (!cp_.schedule && cfg_.schedule.kind != ScheduleKind::Fixed) {
      const double r = cfg_.schedule.r_eps;
      if (cfg_.schedule.kind == ScheduleKind::Fuse) {
        cp_.schedule = is_flow(cfg_.family) ? ScheduleState(make_flow_state(r)) : ScheduleState(make_euler_state(r));
      } else {
        cp_.schedule = is_flow(cfg_.family) ? make_tamed_flow_state(r) : make_tamed_euler_state(r);
      }
    }
    if (cp_.average) avg_ = RunningAverage::restore(*cp_.average, cp_.average_weight);
    traj_.metric_names.reserve(hooks_.size());
    for (const auto& h : hooks_) traj_.metric_names.push_back(h.name);
  }

  Trajectory run() {
    while (cp_.iter < cfg_.iterations) {
      const auto t0 = std::chrono::steady_clock::now();
      const std::size_t iter = cp_.iter + 1;
      double step = 0.0;
      try {
        step = is_flow(cfg_.family) ? flow_iteration() : euler_iteration();
      } catch (const Diverged&) {
        traj_.diverged_at = iter;
        break;
      } catch (const NumericError&) {
        traj_.diverged_at = iter;
        break;
      } catch (const StepUndefined& e) {
        rethrow_at(e, iter);
      } catch (const ConfigError&) {
        throw;
      } catch (const InvalidParameter& e) {
        rethrow_at(e, iter);
      }
      cp_.iter = iter;
      if (cfg_.averaging != Averaging::None) avg_.add(cp_.x, average_weight());

      RunRecord rec;
      rec.iter = iter;
      rec.step = step;
      const bool eval = iter % cfg_.metric_every == 0 || iter == cfg_.iterations;
      rec.metrics.assign(hooks_.size(), std::numeric_limits<double>::quiet_NaN());
      if (cfg_.averaging != Averaging::None) rec.avg_metrics.assign(hooks_.size(), std::numeric_limits<double>::quiet_NaN());
      if (eval) {
        for (std::size_t k = 0; k < hooks_.size(); ++k) rec.metrics[k] = evaluate(hooks_[k], cp_.x);
        if (cfg_.averaging != Averaging::None && !hooks_.empty()) {
          const Ensemble a = avg_.value();
          for (std::size_t k = 0; k < hooks_.size(); ++k) rec.avg_metrics[k] = evaluate(hooks_[k], a);
        }
      }
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      traj_.records.push_back(std::move(rec));
      if (observer_) observer_(iter, cp_.x, step);

      if (std::find(cfg_.snapshot_iters.begin(), cfg_.snapshot_iters.end(), iter) != cfg_.snapshot_iters.end()) {
        traj_.snapshots.emplace_back(iter, cp_.x);
        if (cfg_.checkpoint_dir) checkpoint().save(fmt::format("{}/iter_{}", *cfg_.checkpoint_dir, iter));
      }
    }
    traj_.final_ensemble = cp_.x;
    if (!avg_.empty()) traj_.average = avg_.value();
    return std::move(traj_);
  }

 private:
  // A metric that breaks down numerically on a finite iterate reports +inf.
  static double evaluate(const MetricHook& h, const Ensemble& x) {
    try {
      return h.fn(x);
    } catch (const NumericError&) {
      return std::numeric_limits<double>::infinity();
    }
  }

  GradientEval checked(GradientEval g) const {
    if (first_nonfinite_row(g.values)) throw Diverged{};
    return g;
  }

  double checked_msn(const GradientEval& g) const {
    const double msn = mean_squared_grad_norm(g);
    if (!std::isfinite(msn)) throw Diverged{};
    return msn;
  }

  Ensemble checked_ensemble(ParticleMatrix m) const {
    if (first_nonfinite_row(m)) throw Diverged{};
    return Ensemble(std::move(m));
  }

  double schedule_r_bar() const {
    if (!cp_.schedule) return 1.0;
    return std::visit(
        [](const auto& s) -> double {
          using S = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<S, TamedState>) {
            return std::visit([](const auto& b) { return b.r_bar; }, s.base);
          } else {
            return s.r_bar;
          }
        },
        *cp_.schedule);
  }

  double average_weight() const { return cfg_.averaging == Averaging::Weighted ? schedule_r_bar() : 1.0; }

  double guarded(double step) const {
    if (!std::isfinite(step)) throw Diverged{};
    return step;
  }

  template <class F>
  double schedule_call(F&& f) {
    try {
      return guarded(f());
    } catch (const NumericError&) {
      throw Diverged{};
    }
  }

  double flow_iteration() {
    GradientEval g = cfg_.family == Family::LangevinKsd ? ksd_flow_drift(cp_.x, *stein_)
                                                        : target_->gradient(cp_.x, &cp_.batch_rng);
    g = checked(std::move(g));
    const double msn = checked_msn(g);
    const auto& p = cp_.x.positions();

    double step = cfg_.schedule.eta;
    bool init_after = false;
    if (cp_.schedule) {
      if (!cp_.prev_half) {
        step = cfg_.schedule.r_eps;
        init_after = true;
      } else {
        step = schedule_call([&] { return advance(*cp_.prev_half, msn); });
      }
    }
    Ensemble half = checked_ensemble(p - step * g.values);
    if (init_after) advance(half, msn);

    ParticleMatrix next = half.positions() + std::sqrt(2.0 * cfg_.temperature * step) *
                                                 noise_matrix(p.rows(), p.cols(), cp_.noise_rng);
    if (cfg_.box) next = project_box(next, *cfg_.box);
    cp_.x = checked_ensemble(std::move(next));
    cp_.prev_half = std::move(half);
    return step;
  }

  double euler_iteration() {
    ParticleMatrix drift;
    if (cfg_.family == Family::KsdDescent) {
      drift = checked(ksd_flow_drift(cp_.x, *stein_)).values;
    } else {
      KernelSpec kernel = cfg_.kernel.spec;
      if (cfg_.kernel.median_heuristic && cp_.x.size() >= 2) kernel = RbfKernel{median_bandwidth(cp_.x)};
      const GradientEval g = checked(target_->gradient(cp_.x, &cp_.batch_rng));
      drift = kernelized_drift(cp_.x, g, kernel);
    }
    GradientEval d;
    d.values = std::move(drift);
    d = checked(std::move(d));
    const double msn = checked_msn(d);
    double step = cfg_.schedule.eta;
    if (cp_.schedule) step = schedule_call([&] { return advance(cp_.x, msn); });

    ParticleMatrix next = cp_.x.positions() - step * d.values;
    if (cfg_.box) next = project_box(next, *cfg_.box);
    cp_.x = checked_ensemble(std::move(next));
    return step;
  }

  // Feeds one observation to the schedule and returns its step.
  double advance(const Ensemble& ens, double msn) {
    return std::visit(
        [&](auto& s) -> double {
          using S = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<S, FuseFlowState>) {
            auto r = fuse_flow_step(s, ens, msn);
            s = std::move(r.state);
            return r.step;
          } else if constexpr (std::is_same_v<S, FuseEulerState>) {
            auto r = fuse_euler_step(s, ens, msn);
            s = std::move(r.state);
            return r.step;
          } else {
            auto r = tamed_step(s, ens, msn);
            s = std::move(r.state);
            return r.step;
          }
        },
        *cp_.schedule);
  }

  SamplerCheckpoint checkpoint() const {
    SamplerCheckpoint c = cp_;
    if (!avg_.empty()) {
      c.average = avg_.value().positions();
      c.average_weight = avg_.weight_sum();
    }
    return c;
  }

  SamplerConfig cfg_;
  std::shared_ptr<const Target> target_;
  SamplerCheckpoint cp_;
  const std::vector<MetricHook>& hooks_;
  const IterationObserver& observer_;
  std::optional<SteinKernel> stein_;
  RunningAverage avg_;
  Trajectory traj_;
};

}  // namespace

Trajectory run_sampler(const SamplerConfig& cfg, std::shared_ptr<const Target> target, const Ensemble& init,
                       const RngStream& rng, const std::vector<MetricHook>& hooks, const IterationObserver& observer) {
  SamplerCheckpoint start{0, init, std::nullopt, std::nullopt, rng.split(1), rng.split(2), std::nullopt, 0.0};
  return Engine(cfg, std::move(target), std::move(start), hooks, observer).run();
}

Trajectory resume_sampler(const SamplerConfig& cfg, std::shared_ptr<const Target> target,
                          const SamplerCheckpoint& checkpoint, const std::vector<MetricHook>& hooks,
                          const IterationObserver& observer) {
  return Engine(cfg, std::move(target), checkpoint, hooks, observer).run();
}

}  // namespace fuse
