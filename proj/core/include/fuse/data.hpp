#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fuse/core.hpp"

namespace fuse {

/// Binary classification data. Column 0 of `features` is the intercept
/// (all ones) when `has_intercept`; standardization parameters cover the
/// remaining columns.
struct Dataset {
  Matrix features;
  Vector labels;
  bool has_intercept = true;
  std::vector<std::string> feature_names;
  std::optional<Vector> feature_means;
  std::optional<Vector> feature_sds;

  std::size_t size() const { return static_cast<std::size_t>(features.rows()); }
  Dataset subset(const std::vector<std::size_t>& rows) const;
};

/// Synthetic logistic regression problem and the coefficients that generated it.
struct LogRegProblem {
  Dataset data;
  Vector true_beta;  // (beta_0 = 0, beta_1, ..., beta_p)
};

struct LogRegGenParams {
  std::size_t N = 500;
  std::size_t p = 8;
  double signal = 3.0;
  double rho = 0.2;
  double tau = 0.6;
  double pi_flip = 0.01;
};

/// beta_j = s v_j / ||v|| (v ~ N(0, I)), x_i ~ N(0, Sigma_rho) with
/// (Sigma_rho)_jk = rho^|j-k|, y_i ~ Bernoulli(sigmoid(beta^T x_i / tau)),
/// each label then flipped with probability pi_flip.
LogRegProblem gen_logreg(const LogRegGenParams& params, RngStream& rng);

/// Scalar regression pairs (z_k, y_k).
struct RegressionData {
  Vector z;
  Vector y;
  std::size_t size() const { return static_cast<std::size_t>(z.size()); }
};

/// z ~ U(0, 1), y | z ~ N(3 tanh(3z + 1/2), sigma^2).
RegressionData gen_nn_data(std::size_t N, RngStream& rng, double sigma = 0.1);
double nn_regression_mean(double z);

template <class D>
struct Split {
  D train;
  D test;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> test_idx;
};

/// Random disjoint partition with round(train_frac * N) training rows.
Split<Dataset> split(const Dataset& data, double train_frac, RngStream& rng);
Split<RegressionData> split(const RegressionData& data, double train_frac, RngStream& rng);

/// Uniform draw of `size` distinct indices from [0, N), returned sorted.
std::vector<std::size_t> minibatch(std::size_t N, std::size_t size, RngStream& rng);

/// How raw label values map to {0, 1}.
struct BinarizeRule {
  enum class Kind { None, Equals, Greater } kind = Kind::None;
  double value = 0.0;
  /// "none", "equals:<v>", "greater:<v>"
  static BinarizeRule parse(const std::string& text);
  double apply(double raw) const;
};

/// Loads a headered numeric CSV. The label column is named or given by
/// 0-based index; remaining columns become features, standardized to zero
/// mean and unit (population) variance unless `standardize` is false, then an
/// intercept column is prepended.
Dataset load_csv_dataset(const std::string& path, const std::string& label_column,
                         const BinarizeRule& rule = {}, bool standardize = true);

/// Export with header `y,<feature names>` (intercept column omitted).
void write_dataset_csv(const std::string& path, const Dataset& data);
void write_regression_csv(const std::string& path, const RegressionData& data);

}  // namespace fuse
