#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <variant>

#include "fuse/core.hpp"

namespace fuse {

// Adaptive step-size schedules: step = max displacement from a reference
// iterate (floored at r_eps) / sqrt(cumulative mean-squared gradient norms).
// All states are plain values; the step functions return an updated copy.

/// Forward-flow (Langevin-type) schedule. The reference is the first
/// half-step x_{1/2}; the step at iteration t >= 1 uses half-steps
/// x_{1/2} .. x_{t-1/2} and gradients at x_1 .. x_t.
struct FuseFlowState {
  double r_eps = 0.0;
  std::shared_ptr<const Ensemble> reference;
  double r_bar = 0.0;  // max(r_eps, max displacement so far)
  double g_sum = 0.0;  // sum of mean-squared gradient norms
  std::size_t t = 0;   // number of adaptive steps produced after initialization

  bool initialized() const noexcept { return reference != nullptr; }
};

/// Forward-Euler (kernelized) schedule. The reference is the iterate x_0 and
/// the step at iteration t uses iterates and drifts at 0 .. t.
struct FuseEulerState {
  double r_eps = 0.0;
  std::shared_ptr<const Ensemble> reference;
  double r_bar = 0.0;
  double g_sum = 0.0;
  std::size_t t = 0;  // number of steps produced

  bool initialized() const noexcept { return reference != nullptr; }
};

/// Tamed variant: the denominator is inflated to
/// sqrt(8^4 * log+^2(1 + t g_bar^2 / g_first^2) * (G_{t-1} + 16 g_bar^2))
/// with log+(x) = max(1, ln x).
struct TamedState {
  std::variant<FuseFlowState, FuseEulerState> base;
  double g_bar_sq = 0.0;    // running max of the per-iteration mean-squared norm
  double g_first_sq = 0.0;  // the first observed one
};

template <class State>
struct Step {
  double step;
  State state;
};

FuseFlowState make_flow_state(double r_eps);
FuseEulerState make_euler_state(double r_eps);
TamedState make_tamed_flow_state(double r_eps);
TamedState make_tamed_euler_state(double r_eps);

/// First call stores `half_step` as the reference and returns r_eps (the
/// initial step). Later calls take the most recent half-step and the
/// mean-squared gradient norm at the current iterate.
Step<FuseFlowState> fuse_flow_step(FuseFlowState state, const Ensemble& half_step, double grad_msn);

/// `current` is the iterate the step will be applied to; the first call
/// stores it as the reference. `drift_msn` is the kernelized drift's
/// mean-squared norm at `current`.
Step<FuseEulerState> fuse_euler_step(FuseEulerState state, const Ensemble& current, double drift_msn);

/// Tamed counterpart of fuse_flow_step / fuse_euler_step, depending on the
/// wrapped base state.
Step<TamedState> tamed_step(TamedState state, const Ensemble& ensemble, double grad_msn);

/// log+(x) = max(1, ln x)
double log_plus(double x);

// Checkpoint form: {kind, r_eps, r_bar, g_sum, t, reference_csv_path, ...}.
// The reference ensemble is written to `reference_csv_path`; a relative path
// is taken relative to the JSON file's directory.
void save_schedule_state(const std::string& json_path, const std::string& reference_csv_path,
                         const FuseFlowState& state);
void save_schedule_state(const std::string& json_path, const std::string& reference_csv_path,
                         const FuseEulerState& state);
void save_schedule_state(const std::string& json_path, const std::string& reference_csv_path,
                         const TamedState& state);

using ScheduleState = std::variant<FuseFlowState, FuseEulerState, TamedState>;
ScheduleState load_schedule_state(const std::string& json_path);

}  // namespace fuse
