#include "fuse/metrics.hpp"

#include <cmath>
#include <limits>

#include <fmt/format.h>

namespace fuse {

Moments empirical_moments(const Ensemble& x) {
  const auto& p = x.positions();
  Moments m;
  m.mean = p.colwise().mean().transpose();
  const auto d = static_cast<Eigen::Index>(x.dim());
  if (x.size() < 2) {
    m.cov = Matrix::Zero(d, d);
    return m;
  }
  const Matrix centered = p.rowwise() - m.mean.transpose();
  m.cov = (centered.transpose() * centered) / static_cast<double>(x.size() - 1);
  m.cov = 0.5 * (m.cov + m.cov.transpose()).eval();
  return m;
}

MomentMatchedKl moment_matched_kl(const Ensemble& x, const GaussianTarget& target) {
  if (x.dim() != target.dim()) throw ShapeMismatch("moment_matched_kl: dimension mismatch");
  auto mom = empirical_moments(x);
  bool regularized = false;
  Eigen::SelfAdjointEigenSolver<Matrix> es(mom.cov, Eigen::EigenvaluesOnly);
  if (!(es.eigenvalues().minCoeff() > 1e-14 * std::max(1.0, es.eigenvalues().maxCoeff()))) {
    mom.cov.diagonal().array() += 1e-8;
    regularized = true;
  }
  const auto fitted = GaussianState::make(std::move(mom.mean), std::move(mom.cov));
  return {kl_gaussian(fitted, GaussianState::of(target)), regularized};
}

double ksd(const Ensemble& x, const SteinKernel& sk, KsdEstimator estimator) {
  if (!sk.score) throw InvalidParameter("ksd: stein kernel has no score field");
  validate(sk.base);
  const std::size_t n = x.size();
  std::vector<Vector> pts(n);
  std::vector<Vector> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    pts[i] = x.particle(i);
    scores[i] = sk.score->score(pts[i]);
  }
  double diag = 0.0;
  double off = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    diag += stein_kernel_eval(sk.base, pts[i], pts[i], scores[i], scores[i]);
    for (std::size_t j = i + 1; j < n; ++j) {
      off += stein_kernel_eval(sk.base, pts[i], pts[j], scores[i], scores[j]);
    }
  }
  const double nn = static_cast<double>(n);
  if (estimator == KsdEstimator::VStatistic) return std::sqrt(std::max(0.0, (diag + 2.0 * off) / (nn * nn)));
  if (n < 2) throw InvalidParameter("ksd: U-statistic needs n >= 2");
  return std::sqrt(std::max(0.0, 2.0 * off / (nn * (nn - 1.0))));
}

double predictive_accuracy(const Ensemble& theta, const Matrix& features, const Vector& labels,
                           std::size_t beta_offset) {
  if (features.rows() == 0) throw InvalidParameter("predictive_accuracy: empty test set");
  if (labels.size() != features.rows()) throw ShapeMismatch("predictive_accuracy: labels/features length");
  const auto p = features.cols();
  if (theta.dim() < beta_offset + static_cast<std::size_t>(p)) {
    throw ShapeMismatch(fmt::format("predictive_accuracy: parameter dimension {} too small for {} features",
                                    theta.dim(), p));
  }
  const Matrix beta = theta.positions().middleCols(static_cast<Eigen::Index>(beta_offset), p);
  const Matrix logits = features * beta.transpose();  // rows: test points
  std::size_t correct = 0;
  for (Eigen::Index k = 0; k < logits.rows(); ++k) {
    double prob = 0.0;
    for (Eigen::Index i = 0; i < logits.cols(); ++i) prob += sigmoid(logits(k, i));
    prob /= static_cast<double>(logits.cols());
    const double pred = prob >= 0.5 ? 1.0 : 0.0;
    if (pred == labels(k)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(features.rows());
}

double test_mse(const Ensemble& x, const Vector& z, const Vector& y) {
  if (z.size() == 0) throw InvalidParameter("test_mse: empty test set");
  if (z.size() != y.size()) throw ShapeMismatch("test_mse: input/output length mismatch");
  if (x.dim() != 4) throw ShapeMismatch("test_mse: neuron parameters must have dimension 4");
  return (y - mean_field_predict(x, z)).squaredNorm() / static_cast<double>(z.size());
}

std::vector<std::size_t> hungarian(const Matrix& cost) {
  const auto n = static_cast<std::size_t>(cost.rows());
  if (cost.cols() != cost.rows()) throw ShapeMismatch("hungarian: cost matrix must be square");
  if (n == 0) return {};
  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials formulation; column 0 is a virtual start.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 1; j <= n; ++j) row_to_col[match[j] - 1] = j - 1;
  return row_to_col;
}

double w2_assignment_oracle(const Ensemble& a, const Ensemble& b) {
  require_same_shape(a, b, "w2_assignment_oracle");
  const std::size_t n = a.size();
  if (n > 16) throw InvalidParameter(fmt::format("w2_assignment_oracle: n = {} exceeds the limit of 16", n));
  const auto N = static_cast<Eigen::Index>(n);
  Matrix cost(N, N);
  for (Eigen::Index i = 0; i < N; ++i) {
    for (Eigen::Index j = 0; j < N; ++j) cost(i, j) = (a.positions().row(i) - b.positions().row(j)).squaredNorm();
  }
  const auto assign = hungarian(cost);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(assign[i]));
  return std::sqrt(total / static_cast<double>(n));
}

}  // namespace fuse
