#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fuse/error.hpp"
#include "fuse/rng.hpp"

namespace fuse {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
/// Particle storage: one row per particle.
using ParticleMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// n particles in R^d. Immutable; every operation produces a new value.
/// Row i always refers to the same particle (chain) across operations.
class Ensemble {
 public:
  /// Throws InvalidParameter for an empty matrix and NumericError (with the
  /// particle index) for non-finite coordinates.
  explicit Ensemble(ParticleMatrix positions);

  std::size_t size() const noexcept { return static_cast<std::size_t>(positions_.rows()); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(positions_.cols()); }

  const ParticleMatrix& positions() const noexcept { return positions_; }
  Vector particle(std::size_t i) const { return positions_.row(static_cast<Eigen::Index>(i)).transpose(); }

  friend bool operator==(const Ensemble& a, const Ensemble& b) {
    return a.positions_.rows() == b.positions_.rows() &&
           a.positions_.cols() == b.positions_.cols() && a.positions_ == b.positions_;
  }

 private:
  ParticleMatrix positions_;
};

/// Per-particle gradient of the relevant energy, evaluated on one ensemble.
struct GradientEval {
  ParticleMatrix values;
  bool is_stochastic = false;
  std::optional<std::vector<std::size_t>> batch_ids;
};

/// Index of the first row holding a NaN/inf entry, if any.
std::optional<std::size_t> first_nonfinite_row(const ParticleMatrix& m);

/// Rows i.i.d. from N(mean, diag(cov_diag)).
Ensemble init_ensemble(std::size_t n, std::size_t d, const Vector& mean, const Vector& cov_diag,
                       RngStream& rng);

/// ((1/n) sum_i ||a_i - b_i||^2)^(1/2): the L2 distance between equally indexed
/// particles. Upper-bounds the empirical W2 distance.
double identity_coupling_distance(const Ensemble& a, const Ensemble& b);

/// (1/n) sum_i ||g_i||^2. NaN/inf entries raise NumericError naming the particle.
double mean_squared_grad_norm(const GradientEval& g);
double mean_squared_grad_norm(const ParticleMatrix& g);

void require_same_shape(const Ensemble& a, const Ensemble& b, const char* what);

// Ensemble snapshots: CSV with header `particle,coord_0,...,coord_{d-1}`.
void write_ensemble_csv(std::ostream& out, const Ensemble& x);
void write_ensemble_csv(const std::string& path, const Ensemble& x);
Ensemble read_ensemble_csv(std::istream& in);
Ensemble read_ensemble_csv(const std::string& path);

/// Shortest decimal text that round-trips the double exactly.
std::string format_double(double v);

}  // namespace fuse
