#pragma once

#include <memory>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "fuse/core.hpp"
#include "fuse/kernels.hpp"

namespace fuse {

/// Gradient oracle used by the samplers. `gradient` returns the Wasserstein
/// gradient of the energy part of the objective at every particle (grad U
/// for potential targets; an interaction term for mean-field energies).
class Target {
 public:
  virtual ~Target() = default;
  virtual std::size_t dim() const = 0;
  /// `batch_rng` drives minibatch selection for stochastic targets and is
  /// ignored otherwise.
  virtual GradientEval gradient(const Ensemble& x, RngStream* batch_rng) const = 0;
  virtual bool is_stochastic() const { return false; }
  /// Score of pi proportional to exp(-U) for potential targets; null when the
  /// target is not a density (e.g. a mean-field energy).
  virtual std::shared_ptr<const ScoreField> score_field() const { return nullptr; }
};

/// pi = N(m, Sigma) with dense SPD Sigma. Precision is cached at construction.
class GaussianTarget final : public Target, public ScoreField {
 public:
  GaussianTarget(Vector mean, Matrix cov);
  static std::shared_ptr<GaussianTarget> make(Vector mean, Matrix cov);
  static std::shared_ptr<GaussianTarget> diagonal(Vector mean, const Vector& variances);

  std::size_t dim() const override { return static_cast<std::size_t>(mean_.size()); }
  const Vector& mean() const { return mean_; }
  const Matrix& cov() const { return cov_; }
  const Matrix& precision() const { return precision_; }

  /// 1/2 (x - m)^T Sigma^{-1} (x - m)
  double potential(const Vector& x) const;
  GradientEval gradient(const Ensemble& x, RngStream* batch_rng) const override;
  std::shared_ptr<const ScoreField> score_field() const override;

  Vector score(const Vector& x) const override;
  Matrix score_jacobian(const Vector& x) const override;

 private:
  Vector mean_;
  Matrix cov_;
  Matrix precision_;
};

/// beta_j ~ N(0, 1/lambda) on non-intercept coefficients; intercept flat.
struct GaussianPrior {
  double lambda = 1.0;
};
/// beta | alpha ~ N(0, I / alpha), alpha ~ Gamma(a, rate b). Parameter
/// vector is (log alpha, beta); all of beta is penalized.
struct HierarchicalPrior {
  double a = 1.0;
  double b = 0.01;
};
using LogRegPrior = std::variant<GaussianPrior, HierarchicalPrior>;

/// Bayesian logistic regression posterior. `features` carries the intercept
/// column at index 0. With batch_size in [1, N) gradients are minibatch
/// estimates with the likelihood scaled by N / |batch|.
class LogRegTarget final : public Target, public ScoreField {
 public:
  LogRegTarget(Matrix features, Vector labels, LogRegPrior prior, std::size_t batch_size = 0);
  static std::shared_ptr<LogRegTarget> make(Matrix features, Vector labels, LogRegPrior prior,
                                            std::size_t batch_size = 0);

  std::size_t dim() const override;
  std::size_t num_data() const { return static_cast<std::size_t>(features_.rows()); }
  std::size_t num_features() const { return static_cast<std::size_t>(features_.cols()); }
  /// Column offset of beta within a parameter vector (1 for hierarchical).
  std::size_t beta_offset() const;
  bool is_stochastic() const override { return batch_size_ > 0 && batch_size_ < num_data(); }
  const LogRegPrior& prior() const { return prior_; }

  /// Negative log posterior (up to a constant), full data or a batch.
  double potential(const Vector& theta, std::span<const std::size_t> batch = {}) const;
  GradientEval gradient(const Ensemble& theta, RngStream* batch_rng) const override;
  /// Gradient on an explicit batch (empty span = full data).
  GradientEval gradient_on(const Ensemble& theta, std::span<const std::size_t> batch) const;
  std::shared_ptr<const ScoreField> score_field() const override;

  Vector score(const Vector& theta) const override;
  Matrix score_jacobian(const Vector& theta) const override;

 private:
  Matrix features_;
  Vector labels_;
  LogRegPrior prior_;
  std::size_t batch_size_;
};

/// Map alpha to the log-space coordinate used by HierarchicalPrior.
double to_log_alpha(double alpha);

/// Numerically stable log(1 + e^z).
double log1p_exp(double z);
double sigmoid(double z);

/// Two-layer neuron h_x(z) = w2 tanh(w1 z + b1) + b2, x = (w1, b1, w2, b2).
double neuron(const Vector& x, double z);
Vector neuron_grad(const Vector& x, double z);
/// Mean-field network output (1/n) sum_i h_{x_i}(z_k) at every input z_k.
Vector mean_field_predict(const Ensemble& x, const Vector& z);

/// E(mu) = lambda1 / (2N) sum_k (y_k - h_mu(z_k))^2 with h_mu the ensemble
/// average of neurons. Its Wasserstein gradient at particle i is
/// -(lambda1 / N) sum_k (y_k - h_mu(z_k)) grad_x h_{x_i}(z_k).
class MeanFieldNNEnergy final : public Target {
 public:
  MeanFieldNNEnergy(Vector z, Vector y, double lambda1);

  std::size_t dim() const override { return 4; }
  double lambda1() const { return lambda1_; }
  const Vector& inputs() const { return z_; }
  const Vector& outputs() const { return y_; }

  /// Ensemble-averaged network output at each data input.
  Vector predict(const Ensemble& x) const;
  double energy(const Ensemble& x) const;
  GradientEval gradient(const Ensemble& x, RngStream* batch_rng) const override;

 private:
  Vector z_;
  Vector y_;
  double lambda1_;
};

}  // namespace fuse
