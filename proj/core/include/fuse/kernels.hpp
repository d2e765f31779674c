#pragma once

#include <memory>
#include <variant>

#include "fuse/core.hpp"

namespace fuse {

/// k(x, y) = exp(-||x - y||^2 / (2 h^2))
struct RbfKernel {
  double bandwidth = 1.0;
};

/// k(x, y) = (c^2 + ||x - y||^2)^beta, beta in (-1, 0)
struct ImqKernel {
  double c = 1.0;
  double beta = -0.5;
};

using KernelSpec = std::variant<RbfKernel, ImqKernel>;

void validate(const KernelSpec& spec);

/// Both kernels are radial, k(x, y) = phi(||x - y||^2). Every derivative the
/// samplers need is expressed through phi and its first three derivatives in
/// u = ||x - y||^2.
struct RadialProfile {
  double phi;
  double d1;
  double d2;
  double d3;
};
RadialProfile radial_profile(const KernelSpec& spec, double sq_dist);

double kernel_eval(const KernelSpec& spec, const Vector& x, const Vector& y);
/// d/dx k(x, y)
Vector kernel_grad1(const KernelSpec& spec, const Vector& x, const Vector& y);
/// d/dy k(x, y)
Vector kernel_grad2(const KernelSpec& spec, const Vector& x, const Vector& y);
/// sum_l d^2 k / dx_l dy_l
double kernel_trace_cross(const KernelSpec& spec, const Vector& x, const Vector& y);

/// Median heuristic: h^2 = median pairwise squared distance / (2 log(n + 1)),
/// h floored at 1e-8. Requires n >= 2.
double median_bandwidth(const Ensemble& x);

/// Score field s(x) = grad log pi(x) and its Jacobian ds/dx.
class ScoreField {
 public:
  virtual ~ScoreField() = default;
  virtual std::size_t dim() const = 0;
  virtual Vector score(const Vector& x) const = 0;
  virtual Matrix score_jacobian(const Vector& x) const = 0;
};

/// k_pi(x, y) = s(x).s(y) k + s(x).grad2 k + grad1 k.s(y) + tr(grad2 grad1 k)
struct SteinKernel {
  KernelSpec base;
  std::shared_ptr<const ScoreField> score;
};

double stein_kernel_eval(const SteinKernel& sk, const Vector& x, const Vector& y);
/// d/dy k_pi(x, y)
Vector stein_kernel_grad2(const SteinKernel& sk, const Vector& x, const Vector& y);

// Variants taking precomputed scores (and the score Jacobian at y), for
// pairwise loops that evaluate each particle's score once.
double stein_kernel_eval(const KernelSpec& base, const Vector& x, const Vector& y,
                         const Vector& sx, const Vector& sy);
Vector stein_kernel_grad2(const KernelSpec& base, const Vector& x, const Vector& y,
                          const Vector& sx, const Vector& sy, const Matrix& jac_y);

}  // namespace fuse
