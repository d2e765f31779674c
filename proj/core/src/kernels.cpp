#include "fuse/kernels.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace fuse {

void validate(const KernelSpec& spec) {
  std::visit(
      [](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, RbfKernel>) {
          if (!(k.bandwidth > 0.0) || !std::isfinite(k.bandwidth)) {
            throw InvalidParameter(fmt::format("rbf bandwidth must be positive, got {}", k.bandwidth));
          }
        } else {
          if (!(k.c > 0.0) || !std::isfinite(k.c)) {
            throw InvalidParameter(fmt::format("imq c must be positive, got {}", k.c));
          }
          if (!(k.beta > -1.0 && k.beta < 0.0)) {
            throw InvalidParameter(fmt::format("imq beta must lie in (-1, 0), got {}", k.beta));
          }
        }
      },
      spec);
}

RadialProfile radial_profile(const KernelSpec& spec, double u) {
  if (const auto* rbf = std::get_if<RbfKernel>(&spec)) {
    const double a = 1.0 / (2.0 * rbf->bandwidth * rbf->bandwidth);
    const double phi = std::exp(-a * u);
    return {phi, -a * phi, a * a * phi, -a * a * a * phi};
  }
  const auto& imq = std::get<ImqKernel>(spec);
  const double base = imq.c * imq.c + u;
  const double b = imq.beta;
  const double phi = std::pow(base, b);
  const double d1 = b * phi / base;
  const double d2 = (b - 1.0) * d1 / base;
  const double d3 = (b - 2.0) * d2 / base;
  return {phi, d1, d2, d3};
}

double kernel_eval(const KernelSpec& spec, const Vector& x, const Vector& y) {
  validate(spec);
  return radial_profile(spec, (x - y).squaredNorm()).phi;
}

Vector kernel_grad1(const KernelSpec& spec, const Vector& x, const Vector& y) {
  validate(spec);
  const Vector delta = x - y;
  return 2.0 * radial_profile(spec, delta.squaredNorm()).d1 * delta;
}

Vector kernel_grad2(const KernelSpec& spec, const Vector& x, const Vector& y) {
  return -kernel_grad1(spec, x, y);
}

double kernel_trace_cross(const KernelSpec& spec, const Vector& x, const Vector& y) {
  const double u = (x - y).squaredNorm();
  const auto p = radial_profile(spec, u);
  return -4.0 * p.d2 * u - 2.0 * static_cast<double>(x.size()) * p.d1;
}

double median_bandwidth(const Ensemble& x) {
  const std::size_t n = x.size();
  if (n < 2) throw InvalidParameter("median_bandwidth needs at least two particles");
  const auto& p = x.positions();
  std::vector<double> sq;
  sq.reserve(n * (n - 1) / 2);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < p.rows(); ++j) sq.push_back((p.row(i) - p.row(j)).squaredNorm());
  }
  const auto mid = sq.begin() + static_cast<std::ptrdiff_t>(sq.size() / 2);
  std::nth_element(sq.begin(), mid, sq.end());
  double med = *mid;
  if (sq.size() % 2 == 0) {
    med = 0.5 * (med + *std::max_element(sq.begin(), mid));
  }
  const double h = std::sqrt(med / (2.0 * std::log(static_cast<double>(n) + 1.0)));
  return std::max(h, 1e-8);
}

double stein_kernel_eval(const KernelSpec& base, const Vector& x, const Vector& y, const Vector& sx,
                         const Vector& sy) {
  const Vector delta = x - y;
  const double u = delta.squaredNorm();
  const auto p = radial_profile(base, u);
  // grad1 k = 2 phi' delta, grad2 k = -2 phi' delta
  const double trace = -4.0 * p.d2 * u - 2.0 * static_cast<double>(x.size()) * p.d1;
  return sx.dot(sy) * p.phi - 2.0 * p.d1 * sx.dot(delta) + 2.0 * p.d1 * delta.dot(sy) + trace;
}

Vector stein_kernel_grad2(const KernelSpec& base, const Vector& x, const Vector& y, const Vector& sx,
                          const Vector& sy, const Matrix& jac_y) {
  const Vector delta = x - y;
  const double u = delta.squaredNorm();
  const auto p = radial_profile(base, u);
  const double d = static_cast<double>(x.size());

  const Vector grad1 = 2.0 * p.d1 * delta;
  const Vector grad2 = -grad1;
  // d^2k/dy dy^T = 4 phi'' delta delta^T + 2 phi' I ;  d^2k/dx dy^T = -(that)
  const double sx_delta = sx.dot(delta);
  const double sy_delta = sy.dot(delta);
  const Vector hess22_sx = 4.0 * p.d2 * sx_delta * delta + 2.0 * p.d1 * sx;
  const Vector cross_sy = -(4.0 * p.d2 * sy_delta * delta + 2.0 * p.d1 * sy);
  const Vector grad_trace = (8.0 * p.d3 * u + 8.0 * p.d2 + 4.0 * d * p.d2) * delta;

  return p.phi * (jac_y.transpose() * sx) + sx.dot(sy) * grad2 + hess22_sx + cross_sy +
         jac_y.transpose() * grad1 + grad_trace;
}

double stein_kernel_eval(const SteinKernel& sk, const Vector& x, const Vector& y) {
  return stein_kernel_eval(sk.base, x, y, sk.score->score(x), sk.score->score(y));
}

Vector stein_kernel_grad2(const SteinKernel& sk, const Vector& x, const Vector& y) {
  return stein_kernel_grad2(sk.base, x, y, sk.score->score(x), sk.score->score(y),
                            sk.score->score_jacobian(y));
}

}  // namespace fuse
