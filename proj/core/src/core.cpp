#include "fuse/core.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

namespace fuse {

Ensemble::Ensemble(ParticleMatrix positions) : positions_(std::move(positions)) {
  if (positions_.rows() < 1 || positions_.cols() < 1) {
    throw InvalidParameter("ensemble needs n >= 1 and d >= 1");
  }
  if (auto bad = first_nonfinite_row(positions_)) {
    throw NumericError(fmt::format("non-finite coordinate in particle {}", *bad), *bad);
  }
}

std::optional<std::size_t> first_nonfinite_row(const ParticleMatrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (!m.row(i).allFinite()) return static_cast<std::size_t>(i);
  }
  return std::nullopt;
}

Ensemble init_ensemble(std::size_t n, std::size_t d, const Vector& mean, const Vector& cov_diag,
                       RngStream& rng) {
  if (n < 1 || d < 1) throw InvalidParameter("init_ensemble: n and d must be >= 1");
  if (static_cast<std::size_t>(mean.size()) != d || static_cast<std::size_t>(cov_diag.size()) != d) {
    throw ShapeMismatch("init_ensemble: mean/cov_diag length must equal d");
  }
  for (Eigen::Index k = 0; k < cov_diag.size(); ++k) {
    if (!(cov_diag[k] > 0.0) || !std::isfinite(cov_diag[k])) {
      throw InvalidParameter(fmt::format("init_ensemble: variance {} must be positive", k));
    }
  }
  const Vector sd = cov_diag.cwiseSqrt();
  ParticleMatrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index k = 0; k < x.cols(); ++k) x(i, k) = mean[k] + sd[k] * rng.normal();
  }
  return Ensemble(std::move(x));
}

void require_same_shape(const Ensemble& a, const Ensemble& b, const char* what) {
  if (a.size() != b.size() || a.dim() != b.dim()) {
    throw ShapeMismatch(fmt::format("{}: shapes {}x{} and {}x{} differ", what, a.size(), a.dim(),
                                    b.size(), b.dim()));
  }
}

double identity_coupling_distance(const Ensemble& a, const Ensemble& b) {
  require_same_shape(a, b, "identity_coupling_distance");
  const double sq = (a.positions() - b.positions()).squaredNorm();
  return std::sqrt(sq / static_cast<double>(a.size()));
}

double mean_squared_grad_norm(const ParticleMatrix& g) {
  if (g.rows() == 0) throw InvalidParameter("mean_squared_grad_norm: empty gradient");
  double total = 0.0;
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    const double row = g.row(i).squaredNorm();
    if (!std::isfinite(row)) {
      throw NumericError(fmt::format("non-finite gradient at particle {}", i),
                         static_cast<std::size_t>(i));
    }
    total += row;
  }
  return total / static_cast<double>(g.rows());
}

double mean_squared_grad_norm(const GradientEval& g) { return mean_squared_grad_norm(g.values); }

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return fmt::format("{}", v);
}

void write_ensemble_csv(std::ostream& out, const Ensemble& x) {
  out << "particle";
  for (std::size_t k = 0; k < x.dim(); ++k) out << ",coord_" << k;
  out << '\n';
  const auto& p = x.positions();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    out << i;
    for (Eigen::Index k = 0; k < p.cols(); ++k) out << ',' << format_double(p(i, k));
    out << '\n';
  }
}

void write_ensemble_csv(const std::string& path, const Ensemble& x) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_ensemble_csv(out, x);
  if (!out) throw IoError("write failed: " + path);
}

Ensemble read_ensemble_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("ensemble csv: missing header");
  std::size_t d = 0;
  {
    std::stringstream hs(line);
    std::string cell;
    std::getline(hs, cell, ',');
    if (cell != "particle") throw IoError("ensemble csv: header must start with 'particle'");
    while (std::getline(hs, cell, ',')) {
      if (cell != fmt::format("coord_{}", d)) throw IoError("ensemble csv: bad header cell " + cell);
      ++d;
    }
  }
  if (d == 0) throw IoError("ensemble csv: no coordinate columns");
  std::vector<double> values;
  std::size_t n = 0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    if (cell != std::to_string(n)) {
      throw IoError(fmt::format("ensemble csv line {}: expected particle index {}", lineno, n));
    }
    std::size_t cols = 0;
    while (std::getline(ls, cell, ',')) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw IoError(fmt::format("ensemble csv line {}: bad number '{}'", lineno, cell));
      }
      ++cols;
    }
    if (cols != d) throw IoError(fmt::format("ensemble csv line {}: expected {} coordinates", lineno, d));
    ++n;
  }
  if (n == 0) throw IoError("ensemble csv: no particles");
  ParticleMatrix x = Eigen::Map<ParticleMatrix>(values.data(), static_cast<Eigen::Index>(n),
                                                static_cast<Eigen::Index>(d));
  return Ensemble(std::move(x));
}

Ensemble read_ensemble_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return read_ensemble_csv(in);
}

}  // namespace fuse
