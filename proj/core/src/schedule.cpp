#include "fuse/schedule.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <fmt/format.h>
#include <json.hpp>

namespace fuse {
namespace {

void check_r_eps(double r_eps) {
  if (!(r_eps > 0.0) || !std::isfinite(r_eps)) {
    throw InvalidParameter(fmt::format("r_eps must be positive and finite, got {}", r_eps));
  }
}

void check_msn(double msn) {
  if (!std::isfinite(msn)) throw NumericError("schedule: non-finite mean-squared gradient norm");
  if (msn < 0.0) throw InvalidParameter("schedule: mean-squared gradient norm must be >= 0");
}

// Incremental max of the displacement from the reference: O(n d) per call.
template <class State>
void observe(State& s, const Ensemble& x) {
  s.r_bar = std::max(s.r_bar, identity_coupling_distance(*s.reference, x));
}

double checked_step(double r_bar, double denom_sq, const char* who) {
  if (!(denom_sq > 0.0)) {
    throw StepUndefined(fmt::format("{}: zero cumulative gradient norm, step undefined", who));
  }
  const double step = r_bar / std::sqrt(denom_sq);
  if (!std::isfinite(step)) throw NumericError(fmt::format("{}: non-finite step", who));
  return step;
}

}  // namespace

double log_plus(double x) { return std::max(1.0, std::log(x)); }

FuseFlowState make_flow_state(double r_eps) {
  check_r_eps(r_eps);
  FuseFlowState s;
  s.r_eps = r_eps;
  return s;
}

FuseEulerState make_euler_state(double r_eps) {
  check_r_eps(r_eps);
  FuseEulerState s;
  s.r_eps = r_eps;
  return s;
}

TamedState make_tamed_flow_state(double r_eps) { return TamedState{make_flow_state(r_eps)}; }
TamedState make_tamed_euler_state(double r_eps) { return TamedState{make_euler_state(r_eps)}; }

Step<FuseFlowState> fuse_flow_step(FuseFlowState state, const Ensemble& half_step, double grad_msn) {
  if (!state.initialized()) {
    state.reference = std::make_shared<const Ensemble>(half_step);
    state.r_bar = state.r_eps;
    return {state.r_eps, std::move(state)};
  }
  check_msn(grad_msn);
  observe(state, half_step);
  state.g_sum += grad_msn;
  const double step = checked_step(state.r_bar, state.g_sum, "fuse_flow_step");
  ++state.t;
  return {step, std::move(state)};
}

Step<FuseEulerState> fuse_euler_step(FuseEulerState state, const Ensemble& current, double drift_msn) {
  check_msn(drift_msn);
  if (!state.initialized()) {
    state.reference = std::make_shared<const Ensemble>(current);
    state.r_bar = state.r_eps;
  } else {
    observe(state, current);
  }
  state.g_sum += drift_msn;
  const double step = checked_step(state.r_bar, state.g_sum, "fuse_euler_step");
  ++state.t;
  return {step, std::move(state)};
}

Step<TamedState> tamed_step(TamedState state, const Ensemble& ensemble, double grad_msn) {
  // Iteration index as it enters the log term: flow counts from 1, Euler from 0.
  std::size_t t_index = 0;
  double r_bar = 0.0;
  double g_prev = 0.0;
  if (auto* flow = std::get_if<FuseFlowState>(&state.base)) {
    if (!flow->initialized()) {
      flow->reference = std::make_shared<const Ensemble>(ensemble);
      flow->r_bar = flow->r_eps;
      const double r_eps = flow->r_eps;
      return {r_eps, std::move(state)};
    }
    check_msn(grad_msn);
    observe(*flow, ensemble);
    t_index = flow->t + 1;
    r_bar = flow->r_bar;
    g_prev = flow->g_sum;
  } else {
    auto& euler = std::get<FuseEulerState>(state.base);
    check_msn(grad_msn);
    if (!euler.initialized()) {
      euler.reference = std::make_shared<const Ensemble>(ensemble);
      euler.r_bar = euler.r_eps;
    } else {
      observe(euler, ensemble);
    }
    t_index = euler.t;
    r_bar = euler.r_bar;
    g_prev = euler.g_sum;
  }

  if (state.g_first_sq == 0.0) {
    if (!(grad_msn > 0.0)) {
      throw StepUndefined("tamed_step: first observed gradient norm is zero, step undefined");
    }
    state.g_first_sq = grad_msn;
  }
  state.g_bar_sq = std::max(state.g_bar_sq, grad_msn);

  const double lp = log_plus(1.0 + static_cast<double>(t_index) * state.g_bar_sq / state.g_first_sq);
  const double denom_sq = 4096.0 * lp * lp * (g_prev + 16.0 * state.g_bar_sq);
  const double step = checked_step(r_bar, denom_sq, "tamed_step");

  std::visit(
      [grad_msn](auto& s) {
        s.g_sum += grad_msn;
        ++s.t;
      },
      state.base);
  return {step, std::move(state)};
}

// ---------------------------------------------------------------------------
// checkpoint serialization

namespace {

template <class State>
nlohmann::json base_json(const State& s, const char* kind, const std::string& ref_path) {
  nlohmann::json j;
  j["kind"] = kind;
  j["r_eps"] = s.r_eps;
  j["r_bar"] = s.r_bar;
  j["g_sum"] = s.g_sum;
  j["t"] = s.t;
  j["initialized"] = s.initialized();
  j["reference_csv_path"] = s.initialized() ? nlohmann::json(ref_path) : nlohmann::json(nullptr);
  return j;
}

// A relative reference path is taken relative to the JSON file's directory,
// matching how load_schedule_state resolves it.
template <class State>
void write_reference(const State& s, const std::string& json_path, const std::string& ref_path) {
  if (!s.initialized()) return;
  std::filesystem::path ref(ref_path);
  if (ref.is_relative()) ref = std::filesystem::path(json_path).parent_path() / ref;
  write_ensemble_csv(ref.string(), *s.reference);
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
}

template <class State>
State base_from_json(const nlohmann::json& j, const std::filesystem::path& dir) {
  State s;
  s.r_eps = j.at("r_eps").get<double>();
  s.r_bar = j.at("r_bar").get<double>();
  s.g_sum = j.at("g_sum").get<double>();
  s.t = j.at("t").get<std::size_t>();
  if (j.at("initialized").get<bool>()) {
    std::filesystem::path ref = j.at("reference_csv_path").get<std::string>();
    if (ref.is_relative()) ref = dir / ref;
    s.reference = std::make_shared<const Ensemble>(read_ensemble_csv(ref.string()));
  }
  return s;
}

}  // namespace

void save_schedule_state(const std::string& json_path, const std::string& reference_csv_path,
                         const FuseFlowState& state) {
  write_reference(state, json_path, reference_csv_path);
  write_json(json_path, base_json(state, "flow", reference_csv_path));
}

void save_schedule_state(const std::string& json_path, const std::string& reference_csv_path,
                         const FuseEulerState& state) {
  write_reference(state, json_path, reference_csv_path);
  write_json(json_path, base_json(state, "euler", reference_csv_path));
}

void save_schedule_state(const std::string& json_path, const std::string& reference_csv_path,
                         const TamedState& state) {
  nlohmann::json j = std::visit(
      [&](const auto& b) {
        write_reference(b, json_path, reference_csv_path);
        using B = std::decay_t<decltype(b)>;
        return base_json(b, std::is_same_v<B, FuseFlowState> ? "tamed_flow" : "tamed_euler",
                         reference_csv_path);
      },
      state.base);
  j["g_bar_sq"] = state.g_bar_sq;
  j["g_first_sq"] = state.g_first_sq;
  write_json(json_path, j);
}

ScheduleState load_schedule_state(const std::string& json_path) {
  std::ifstream in(json_path);
  if (!in) throw IoError("cannot open " + json_path);
  nlohmann::json j;
  try {
    in >> j;
    const auto dir = std::filesystem::path(json_path).parent_path();
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "flow") return base_from_json<FuseFlowState>(j, dir);
    if (kind == "euler") return base_from_json<FuseEulerState>(j, dir);
    TamedState tamed;
    if (kind == "tamed_flow") {
      tamed.base = base_from_json<FuseFlowState>(j, dir);
    } else if (kind == "tamed_euler") {
      tamed.base = base_from_json<FuseEulerState>(j, dir);
    } else {
      throw IoError("unknown schedule kind '" + kind + "' in " + json_path);
    }
    tamed.g_bar_sq = j.at("g_bar_sq").get<double>();
    tamed.g_first_sq = j.at("g_first_sq").get<double>();
    return tamed;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(json_path + ": " + e.what());
  }
}

}  // namespace fuse
