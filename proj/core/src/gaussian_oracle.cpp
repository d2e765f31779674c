#include "fuse/gaussian_oracle.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace fuse {
namespace {

Matrix symmetrize(const Matrix& S) { return 0.5 * (S + S.transpose()); }

void require_dims(const GaussianState& a, const GaussianState& b, const char* who) {
  if (a.dim() != b.dim()) throw ShapeMismatch(fmt::format("{}: dimensions {} and {} differ", who, a.dim(), b.dim()));
}

void require_target_dim(const GaussianState& s, const GaussianTarget& t, const char* who) {
  if (s.dim() != t.dim()) {
    throw ShapeMismatch(fmt::format("{}: state dimension {} vs target dimension {}", who, s.dim(), t.dim()));
  }
}

}  // namespace

GaussianState GaussianState::make(Vector m, Matrix S) {
  if (m.size() == 0) throw InvalidParameter("gaussian state needs dimension >= 1");
  if (S.rows() != m.size() || S.cols() != m.size()) throw ShapeMismatch("gaussian state: covariance shape");
  if (!m.allFinite() || !S.allFinite()) throw NumericError("gaussian state: non-finite entries");
  GaussianState s{std::move(m), symmetrize(S)};
  Eigen::SelfAdjointEigenSolver<Matrix> es(s.S, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  if (!(lo > 0.0)) {
    throw InvalidParameter(fmt::format("gaussian state: covariance not positive definite (eigenvalue {})", lo));
  }
  return s;
}

OracleStep oracle_step(const GaussianState& s, const GaussianTarget& target, double eta) {
  require_target_dim(s, target, "oracle_step");
  if (!(eta >= 0.0) || !std::isfinite(eta)) throw InvalidParameter(fmt::format("oracle_step: bad step {}", eta));
  const auto d = static_cast<Eigen::Index>(s.dim());
  const Matrix A = Matrix::Identity(d, d) - eta * target.precision();

  OracleStep out;
  out.half.m = s.m - eta * target.precision() * (s.m - target.mean());
  out.half.S = symmetrize(A * s.S * A.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(out.half.S, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  if (!(lo > 0.0)) {
    throw NumericError(fmt::format(
        "oracle_step: half-step covariance lost positive definiteness (smallest eigenvalue {}) at eta = {}", lo, eta));
  }
  out.next.m = out.half.m;
  out.next.S = out.half.S;
  out.next.S.diagonal().array() += 2.0 * eta;
  return out;
}

Matrix sym_sqrt(const Matrix& S) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(S));
  const Vector root = es.eigenvalues().cwiseMax(1e-12).cwiseSqrt();
  return symmetrize(es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose());
}

double w2_gaussian(const GaussianState& a, const GaussianState& b) {
  require_dims(a, b, "w2_gaussian");
  const Matrix ra = sym_sqrt(a.S);
  const Matrix cross = sym_sqrt(ra * b.S * ra);
  const double bures = a.S.trace() + b.S.trace() - 2.0 * cross.trace();
  return std::sqrt(std::max(0.0, (a.m - b.m).squaredNorm() + bures));
}

double kl_gaussian(const GaussianState& a, const GaussianState& b) {
  require_dims(a, b, "kl_gaussian");
  const Eigen::LLT<Matrix> lb(b.S);
  const Eigen::LLT<Matrix> la(a.S);
  if (lb.info() != Eigen::Success || la.info() != Eigen::Success) {
    throw InvalidParameter("kl_gaussian: covariance not positive definite");
  }
  const double d = static_cast<double>(a.dim());
  const Vector dm = b.m - a.m;
  const double tr = lb.solve(a.S).trace();
  const double quad = dm.dot(lb.solve(dm));
  const double logdet_b = 2.0 * Eigen::Matrix<double, -1, 1>(lb.matrixLLT().diagonal()).array().log().sum();
  const double logdet_a = 2.0 * Eigen::Matrix<double, -1, 1>(la.matrixLLT().diagonal()).array().log().sum();
  return std::max(0.0, 0.5 * (tr + quad - d + logdet_b - logdet_a));
}

double gradient_moment(const GaussianState& s, const GaussianTarget& target) {
  require_target_dim(s, target, "gradient_moment");
  const Matrix& P = target.precision();
  return (P * P * s.S).trace() + (P * (s.m - target.mean())).squaredNorm();
}

double ideal_fuse_step(const OracleHistory& h, const GaussianTarget& target, double r_eps) {
  if (h.halves.empty() || h.states.empty()) throw InvalidParameter("ideal_fuse_step: empty history");
  if (h.halves.size() != h.states.size()) throw ShapeMismatch("ideal_fuse_step: halves/states length mismatch");
  if (!(r_eps > 0.0)) throw InvalidParameter("ideal_fuse_step: r_eps must be positive");
  double num = r_eps;
  for (const auto& half : h.halves) num = std::max(num, w2_gaussian(h.halves.front(), half));
  double den = 0.0;
  for (const auto& s : h.states) den += gradient_moment(s, target);
  if (!(den > 0.0)) throw StepUndefined("ideal_fuse_step: zero gradient moment");
  return num / std::sqrt(den);
}

OracleTrajectory simulate_oracle(const GaussianState& init, const GaussianTarget& target,
                                 const OracleSchedule& schedule, std::size_t T) {
  if (T == 0) throw InvalidParameter("simulate_oracle: T must be >= 1");
  if (!(schedule.value > 0.0)) throw InvalidParameter("simulate_oracle: schedule parameter must be positive");
  OracleTrajectory tr;
  tr.states.push_back(init);
  double r_bar = schedule.value;
  double g_sum = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    double eta = schedule.value;
    if (schedule.kind == OracleSchedule::Kind::Fuse && t > 0) {
      r_bar = std::max(r_bar, w2_gaussian(tr.halves.front(), tr.halves.back()));
      g_sum += gradient_moment(tr.states.back(), target);
      if (!(g_sum > 0.0)) throw StepUndefined(fmt::format("simulate_oracle: zero gradient moment at iteration {}", t));
      eta = r_bar / std::sqrt(g_sum);
    }
    auto step = oracle_step(tr.states.back(), target, eta);
    tr.steps.push_back(eta);
    tr.halves.push_back(std::move(step.half));
    tr.states.push_back(std::move(step.next));
  }
  return tr;
}

namespace {

double moment_sum(const OracleTrajectory& tr, const GaussianTarget& target) {
  if (tr.halves.empty() || tr.states.size() < 2) throw InvalidParameter("oracle trajectory is empty");
  double sum = 0.0;
  for (std::size_t t = 1; t < tr.states.size(); ++t) sum += gradient_moment(tr.states[t], target);
  return sum;
}

}  // namespace

double oracle_optimal_fixed_step(const OracleTrajectory& tr, const GaussianTarget& target) {
  const double den = moment_sum(tr, target);
  if (!(den > 0.0)) throw StepUndefined("oracle_optimal_fixed_step: zero gradient moment");
  return w2_gaussian(tr.halves.front(), GaussianState::of(target)) / std::sqrt(den);
}

double constant_step_kl_bound(const OracleTrajectory& tr, const GaussianTarget& target, double eta) {
  if (!(eta > 0.0)) throw InvalidParameter("constant_step_kl_bound: eta must be positive");
  const double w = w2_gaussian(tr.halves.front(), GaussianState::of(target));
  const double T = static_cast<double>(tr.halves.size());
  return (w * w / (2.0 * eta) + 0.5 * eta * moment_sum(tr, target)) / T;
}

}  // namespace fuse
