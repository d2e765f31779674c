#pragma once

#include <vector>

#include "fuse/core.hpp"
#include "fuse/targets.hpp"

namespace fuse {

/// N(m, S). Construction symmetrizes S and checks positive definiteness.
struct GaussianState {
  Vector m;
  Matrix S;

  static GaussianState make(Vector m, Matrix S);
  static GaussianState of(const GaussianTarget& t) { return make(t.mean(), t.cov()); }
  std::size_t dim() const { return static_cast<std::size_t>(m.size()); }
};

struct OracleStep {
  GaussianState half;
  GaussianState next;
};

/// Exact ULA update of a Gaussian law: transport by the linear gradient map,
/// then convolution with N(0, 2 eta I).
OracleStep oracle_step(const GaussianState& s, const GaussianTarget& target, double eta);

/// Symmetric PSD square root by eigendecomposition, eigenvalues clamped at 1e-12.
Matrix sym_sqrt(const Matrix& S);

double w2_gaussian(const GaussianState& a, const GaussianState& b);
/// KL(a || b)
double kl_gaussian(const GaussianState& a, const GaussianState& b);

/// E_{x ~ s} ||grad U(x)||^2 = Tr(P^2 S) + ||P (m - m_pi)||^2 with P the target precision.
double gradient_moment(const GaussianState& s, const GaussianTarget& target);

/// Laws seen by the schedule up to iteration t >= 1: `halves` holds
/// mu_{1/2}, ..., mu_{t-1/2}; `states` holds mu_1, ..., mu_t.
struct OracleHistory {
  std::vector<GaussianState> halves;
  std::vector<GaussianState> states;
};

/// max(r_eps, max_s W2(mu_{1/2}, mu_{s-1/2})) / sqrt(sum_s E_{mu_s} ||grad U||^2),
/// recomputed from the full history.
double ideal_fuse_step(const OracleHistory& history, const GaussianTarget& target, double r_eps);

/// Closed-form run of T iterations. `steps[t]` is the step applied at
/// iteration t; `states` has T + 1 entries (mu_0..mu_T), `halves` T entries.
struct OracleTrajectory {
  std::vector<double> steps;
  std::vector<GaussianState> states;
  std::vector<GaussianState> halves;
};

struct OracleSchedule {
  enum class Kind { Fixed, Fuse } kind = Kind::Fixed;
  double value = 0.0;  // eta for Fixed, r_eps for Fuse
  static OracleSchedule fixed(double eta) { return {Kind::Fixed, eta}; }
  static OracleSchedule fuse(double r_eps) { return {Kind::Fuse, r_eps}; }
};

/// The Fuse variant uses eta_0 = r_eps and the exact schedule afterwards,
/// maintaining the numerator maximum incrementally.
OracleTrajectory simulate_oracle(const GaussianState& init, const GaussianTarget& target,
                                 const OracleSchedule& schedule, std::size_t T);

/// W2(mu_{1/2}, pi) / sqrt(sum_{t=1..T} E_{mu_t} ||grad U||^2) evaluated on a
/// trajectory produced by simulate_oracle.
double oracle_optimal_fixed_step(const OracleTrajectory& trajectory, const GaussianTarget& target);

/// Upper bound on KL of the averaged law for a constant step:
/// (1/T) [W2^2(mu_{1/2}, pi) / (2 eta) + (eta / 2) sum_{t=1..T} E_{mu_t} ||grad U||^2].
double constant_step_kl_bound(const OracleTrajectory& trajectory, const GaussianTarget& target, double eta);

}  // namespace fuse
