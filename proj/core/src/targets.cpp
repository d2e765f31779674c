#include "fuse/targets.hpp"

#include <cmath>

#include <fmt/format.h>

#include "fuse/data.hpp"

namespace fuse {
namespace {

void require_dim(const Ensemble& x, std::size_t d, const char* who) {
  if (x.dim() != d) {
    throw ShapeMismatch(fmt::format("{}: ensemble dimension {} does not match target dimension {}", who,
                                    x.dim(), d));
  }
}

}  // namespace

double log1p_exp(double z) {
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double to_log_alpha(double alpha) {
  if (!(alpha > 0.0)) throw InvalidParameter(fmt::format("alpha must be positive, got {}", alpha));
  return std::log(alpha);
}

// ---------------------------------------------------------------------------
// Gaussian

GaussianTarget::GaussianTarget(Vector mean, Matrix cov) : mean_(std::move(mean)), cov_(std::move(cov)) {
  const auto d = mean_.size();
  if (d == 0) throw InvalidParameter("gaussian target needs dimension >= 1");
  if (cov_.rows() != d || cov_.cols() != d) {
    throw ShapeMismatch(fmt::format("gaussian target: covariance is {}x{}, mean has length {}", cov_.rows(),
                                    cov_.cols(), d));
  }
  if (!mean_.allFinite() || !cov_.allFinite()) throw InvalidParameter("gaussian target: non-finite parameters");
  if ((cov_ - cov_.transpose()).cwiseAbs().maxCoeff() > 1e-10 * (1.0 + cov_.cwiseAbs().maxCoeff())) {
    throw InvalidParameter("gaussian target: covariance is not symmetric");
  }
  cov_ = 0.5 * (cov_ + cov_.transpose()).eval();
  Eigen::LLT<Matrix> llt(cov_);
  if (llt.info() != Eigen::Success) throw InvalidParameter("gaussian target: covariance is not positive definite");
  precision_ = llt.solve(Matrix::Identity(d, d));
  precision_ = 0.5 * (precision_ + precision_.transpose()).eval();
}

std::shared_ptr<GaussianTarget> GaussianTarget::make(Vector mean, Matrix cov) {
  return std::make_shared<GaussianTarget>(std::move(mean), std::move(cov));
}

std::shared_ptr<GaussianTarget> GaussianTarget::diagonal(Vector mean, const Vector& variances) {
  if (variances.size() != mean.size()) throw ShapeMismatch("gaussian target: variance/mean length mismatch");
  for (Eigen::Index j = 0; j < variances.size(); ++j) {
    if (!(variances(j) > 0.0)) {
      throw InvalidParameter(fmt::format("gaussian target: variance {} must be positive, got {}", j, variances(j)));
    }
  }
  Matrix cov = variances.asDiagonal();
  return make(std::move(mean), std::move(cov));
}

double GaussianTarget::potential(const Vector& x) const {
  const Vector r = x - mean_;
  return 0.5 * r.dot(precision_ * r);
}

GradientEval GaussianTarget::gradient(const Ensemble& x, RngStream*) const {
  require_dim(x, dim(), "gaussian gradient");
  GradientEval g;
  g.values = (x.positions().rowwise() - mean_.transpose()) * precision_;
  return g;
}

std::shared_ptr<const ScoreField> GaussianTarget::score_field() const {
  return std::make_shared<GaussianTarget>(*this);
}

Vector GaussianTarget::score(const Vector& x) const { return -(precision_ * (x - mean_)); }

Matrix GaussianTarget::score_jacobian(const Vector&) const { return -precision_; }

// ---------------------------------------------------------------------------
// Logistic regression

LogRegTarget::LogRegTarget(Matrix features, Vector labels, LogRegPrior prior, std::size_t batch_size)
    : features_(std::move(features)), labels_(std::move(labels)), prior_(prior), batch_size_(batch_size) {
  if (features_.rows() == 0 || features_.cols() == 0) throw InvalidParameter("logreg: empty design matrix");
  if (labels_.size() != features_.rows()) {
    throw ShapeMismatch(fmt::format("logreg: {} labels for {} rows", labels_.size(), features_.rows()));
  }
  for (Eigen::Index i = 0; i < labels_.size(); ++i) {
    if (labels_(i) != 0.0 && labels_(i) != 1.0) {
      throw InvalidParameter(fmt::format("logreg: label {} is {}, expected 0 or 1", i, labels_(i)));
    }
  }
  if (!features_.allFinite()) throw InvalidParameter("logreg: non-finite feature");
  if (const auto* g = std::get_if<GaussianPrior>(&prior_)) {
    if (!(g->lambda >= 0.0)) throw InvalidParameter(fmt::format("logreg: lambda must be >= 0, got {}", g->lambda));
  } else {
    const auto& h = std::get<HierarchicalPrior>(prior_);
    if (!(h.a > 0.0) || !(h.b > 0.0)) {
      throw InvalidParameter(fmt::format("logreg: gamma prior needs a, b > 0, got a={}, b={}", h.a, h.b));
    }
  }
  if (batch_size_ > num_data()) {
    throw InvalidParameter(fmt::format("logreg: batch size {} exceeds N = {}", batch_size_, num_data()));
  }
}

std::shared_ptr<LogRegTarget> LogRegTarget::make(Matrix features, Vector labels, LogRegPrior prior,
                                                 std::size_t batch_size) {
  return std::make_shared<LogRegTarget>(std::move(features), std::move(labels), prior, batch_size);
}

std::size_t LogRegTarget::beta_offset() const { return std::holds_alternative<HierarchicalPrior>(prior_) ? 1 : 0; }

std::size_t LogRegTarget::dim() const { return num_features() + beta_offset(); }

double LogRegTarget::potential(const Vector& theta, std::span<const std::size_t> batch) const {
  if (static_cast<std::size_t>(theta.size()) != dim()) throw ShapeMismatch("logreg potential: wrong parameter length");
  const auto off = static_cast<Eigen::Index>(beta_offset());
  const Eigen::Index p = features_.cols();
  const Vector beta = theta.segment(off, p);
  const std::size_t N = num_data();

  double nll = 0.0;
  auto add = [&](std::size_t i) {
    const double z = features_.row(static_cast<Eigen::Index>(i)).dot(beta);
    nll += log1p_exp(z) - labels_(static_cast<Eigen::Index>(i)) * z;
  };
  if (batch.empty()) {
    for (std::size_t i = 0; i < N; ++i) add(i);
  } else {
    for (auto i : batch) {
      if (i >= N) throw InvalidParameter(fmt::format("logreg: batch index {} out of range (N = {})", i, N));
      add(i);
    }
    nll *= static_cast<double>(N) / static_cast<double>(batch.size());
  }

  if (const auto* g = std::get_if<GaussianPrior>(&prior_)) {
    return nll + 0.5 * g->lambda * beta.tail(p - 1).squaredNorm();
  }
  const auto& h = std::get<HierarchicalPrior>(prior_);
  const double ell = theta(0);
  const double alpha = std::exp(ell);
  return nll + 0.5 * alpha * beta.squaredNorm() - 0.5 * static_cast<double>(p) * ell - h.a * ell + h.b * alpha;
}

GradientEval LogRegTarget::gradient_on(const Ensemble& theta, std::span<const std::size_t> batch) const {
  require_dim(theta, dim(), "logreg gradient");
  const auto off = static_cast<Eigen::Index>(beta_offset());
  const Eigen::Index p = features_.cols();
  const Eigen::Index n = static_cast<Eigen::Index>(theta.size());
  const std::size_t N = num_data();
  const auto& pos = theta.positions();
  const ParticleMatrix beta = pos.middleCols(off, p);

  Matrix feats;
  Vector labs;
  double scale = 1.0;
  if (batch.empty()) {
    feats = features_;
    labs = labels_;
  } else {
    feats.resize(static_cast<Eigen::Index>(batch.size()), p);
    labs.resize(static_cast<Eigen::Index>(batch.size()));
    for (std::size_t r = 0; r < batch.size(); ++r) {
      if (batch[r] >= N) throw InvalidParameter(fmt::format("logreg: batch index {} out of range (N = {})", batch[r], N));
      feats.row(static_cast<Eigen::Index>(r)) = features_.row(static_cast<Eigen::Index>(batch[r]));
      labs(static_cast<Eigen::Index>(r)) = labels_(static_cast<Eigen::Index>(batch[r]));
    }
    scale = static_cast<double>(N) / static_cast<double>(batch.size());
  }

  // residual(i, k) = sigmoid(x_k . beta_i) - y_k
  Matrix resid = beta * feats.transpose();
  for (Eigen::Index i = 0; i < resid.rows(); ++i) {
    for (Eigen::Index k = 0; k < resid.cols(); ++k) resid(i, k) = sigmoid(resid(i, k)) - labs(k);
  }

  GradientEval g;
  g.values = ParticleMatrix::Zero(n, static_cast<Eigen::Index>(dim()));
  g.values.middleCols(off, p) = scale * (resid * feats);

  if (const auto* gp = std::get_if<GaussianPrior>(&prior_)) {
    g.values.middleCols(1, p - 1) += gp->lambda * beta.rightCols(p - 1);
  } else {
    const auto& h = std::get<HierarchicalPrior>(prior_);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double alpha = std::exp(pos(i, 0));
      const double bsq = beta.row(i).squaredNorm();
      g.values.row(i).segment(1, p) += alpha * beta.row(i);
      g.values(i, 0) = 0.5 * alpha * bsq - 0.5 * static_cast<double>(p) - h.a + h.b * alpha;
    }
  }
  g.is_stochastic = !batch.empty() && batch.size() < N;
  if (!batch.empty()) g.batch_ids = std::vector<std::size_t>(batch.begin(), batch.end());
  return g;
}

GradientEval LogRegTarget::gradient(const Ensemble& theta, RngStream* batch_rng) const {
  if (!is_stochastic()) return gradient_on(theta, {});
  if (batch_rng == nullptr) throw InvalidParameter("logreg: minibatch gradient requires a batch rng");
  const auto batch = minibatch(num_data(), batch_size_, *batch_rng);
  return gradient_on(theta, batch);
}

std::shared_ptr<const ScoreField> LogRegTarget::score_field() const {
  auto copy = std::make_shared<LogRegTarget>(*this);
  copy->batch_size_ = 0;
  return copy;
}

Vector LogRegTarget::score(const Vector& theta) const {
  ParticleMatrix row = theta.transpose();
  return -gradient_on(Ensemble(std::move(row)), {}).values.row(0).transpose();
}

Matrix LogRegTarget::score_jacobian(const Vector& theta) const {
  if (static_cast<std::size_t>(theta.size()) != dim()) throw ShapeMismatch("logreg jacobian: wrong parameter length");
  const auto off = static_cast<Eigen::Index>(beta_offset());
  const Eigen::Index p = features_.cols();
  const Vector beta = theta.segment(off, p);
  const Vector z = features_ * beta;
  Vector w(z.size());
  for (Eigen::Index k = 0; k < z.size(); ++k) {
    const double s = sigmoid(z(k));
    w(k) = s * (1.0 - s);
  }
  Matrix hess = Matrix::Zero(static_cast<Eigen::Index>(dim()), static_cast<Eigen::Index>(dim()));
  hess.block(off, off, p, p) = features_.transpose() * w.asDiagonal() * features_;
  if (const auto* gp = std::get_if<GaussianPrior>(&prior_)) {
    for (Eigen::Index j = 1; j < p; ++j) hess(j, j) += gp->lambda;
  } else {
    const auto& h = std::get<HierarchicalPrior>(prior_);
    const double alpha = std::exp(theta(0));
    hess.block(1, 1, p, p).diagonal().array() += alpha;
    hess.block(1, 0, p, 1) = alpha * beta;
    hess.block(0, 1, 1, p) = alpha * beta.transpose();
    hess(0, 0) = 0.5 * alpha * beta.squaredNorm() + h.b * alpha;
  }
  return -hess;
}

// ---------------------------------------------------------------------------
// Mean-field neural network

double neuron(const Vector& x, double z) { return x(2) * std::tanh(x(0) * z + x(1)) + x(3); }

Vector neuron_grad(const Vector& x, double z) {
  const double t = std::tanh(x(0) * z + x(1));
  const double dt = x(2) * (1.0 - t * t);
  Vector g(4);
  g << dt * z, dt, t, 1.0;
  return g;
}

MeanFieldNNEnergy::MeanFieldNNEnergy(Vector z, Vector y, double lambda1)
    : z_(std::move(z)), y_(std::move(y)), lambda1_(lambda1) {
  if (z_.size() == 0) throw InvalidParameter("nn energy: empty data");
  if (z_.size() != y_.size()) throw ShapeMismatch("nn energy: input/output length mismatch");
  if (!(lambda1_ > 0.0) || !std::isfinite(lambda1_)) {
    throw InvalidParameter(fmt::format("nn energy: lambda1 must be positive, got {}", lambda1_));
  }
}

namespace {

// tanh(w1_i z_k + b1_i), particles by inputs
Matrix hidden_activations(const ParticleMatrix& pos, const Vector& z) {
  Matrix act = pos.col(0) * z.transpose();
  act.colwise() += pos.col(1);
  return act.array().tanh().matrix();
}

Vector output_from(const ParticleMatrix& pos, const Matrix& act) {
  Vector out = (act.transpose() * pos.col(2)) / static_cast<double>(pos.rows());
  out.array() += pos.col(3).mean();
  return out;
}

}  // namespace

Vector mean_field_predict(const Ensemble& x, const Vector& z) {
  if (x.dim() != 4) throw ShapeMismatch(fmt::format("mean-field network: parameter dimension {} != 4", x.dim()));
  return output_from(x.positions(), hidden_activations(x.positions(), z));
}

Vector MeanFieldNNEnergy::predict(const Ensemble& x) const {
  require_dim(x, 4, "nn energy");
  return output_from(x.positions(), hidden_activations(x.positions(), z_));
}

double MeanFieldNNEnergy::energy(const Ensemble& x) const {
  return lambda1_ / (2.0 * static_cast<double>(z_.size())) * (y_ - predict(x)).squaredNorm();
}

GradientEval MeanFieldNNEnergy::gradient(const Ensemble& x, RngStream*) const {
  require_dim(x, 4, "nn energy");
  const auto& pos = x.positions();
  const Matrix act = hidden_activations(pos, z_);
  const Vector resid = y_ - output_from(pos, act);
  const double c = -lambda1_ / static_cast<double>(z_.size());

  // d tanh scaled by w2, weighted by residual
  Matrix dact = (1.0 - act.array().square()).matrix();
  dact = pos.col(2).asDiagonal() * dact;

  GradientEval g;
  g.values.resize(pos.rows(), 4);
  g.values.col(0) = c * (dact * resid.cwiseProduct(z_));
  g.values.col(1) = c * (dact * resid);
  g.values.col(2) = c * (act * resid);
  g.values.col(3).setConstant(c * resid.sum());
  return g;
}

}  // namespace fuse
