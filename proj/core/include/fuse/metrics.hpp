#pragma once

#include "fuse/core.hpp"
#include "fuse/gaussian_oracle.hpp"
#include "fuse/kernels.hpp"
#include "fuse/targets.hpp"

namespace fuse {

struct MomentMatchedKl {
  double value;
  /// True when a 1e-8 ridge had to be added to the empirical covariance.
  bool regularized;
};

struct Moments {
  Vector mean;
  Matrix cov;
};
/// Empirical mean and covariance (divisor n - 1; zero covariance for n = 1).
Moments empirical_moments(const Ensemble& x);

/// KL(N(mean_hat, cov_hat) || pi).
MomentMatchedKl moment_matched_kl(const Ensemble& x, const GaussianTarget& target);

enum class KsdEstimator { VStatistic, UStatistic };

/// sqrt((1/n^2) sum_{i,j} k_pi(x_i, x_j)); the U-statistic drops the diagonal,
/// divides by n(n-1) and clamps at zero before the square root.
double ksd(const Ensemble& x, const SteinKernel& sk, KsdEstimator estimator = KsdEstimator::VStatistic);
inline double ksd_vstat(const Ensemble& x, const SteinKernel& sk) { return ksd(x, sk, KsdEstimator::VStatistic); }

/// Bayesian model average accuracy: predict 1 iff (1/n) sum_i sigmoid(x^T beta_i) >= 1/2.
/// Coefficients are read from columns [beta_offset, beta_offset + p) of theta.
double predictive_accuracy(const Ensemble& theta, const Matrix& features, const Vector& labels,
                           std::size_t beta_offset = 0);

/// mean_k (y_k - (1/n) sum_j h_{x_j}(z_k))^2
double test_mse(const Ensemble& x, const Vector& z, const Vector& y);

/// Minimum-cost perfect matching on a square cost matrix. Returns the column
/// assigned to each row.
std::vector<std::size_t> hungarian(const Matrix& cost);

/// Exact W2 between two uniform empirical measures of equal size via optimal
/// assignment. Guarded to n <= 16.
double w2_assignment_oracle(const Ensemble& a, const Ensemble& b);

}  // namespace fuse
