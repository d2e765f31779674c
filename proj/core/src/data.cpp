#include "fuse/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "fuse/targets.hpp"

namespace fuse {
namespace {

std::vector<std::size_t> permutation(std::size_t N, RngStream& rng) {
  std::vector<std::size_t> idx(N);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = N; i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

template <class D, class Subset>
Split<D> split_impl(std::size_t N, double frac, RngStream& rng, Subset subset) {
  if (!(frac > 0.0 && frac < 1.0)) throw InvalidParameter(fmt::format("split fraction must be in (0, 1), got {}", frac));
  const auto n_train = static_cast<std::size_t>(std::llround(frac * static_cast<double>(N)));
  if (n_train == 0 || n_train == N) {
    throw InvalidParameter(fmt::format("split of {} rows with fraction {} leaves an empty side", N, frac));
  }
  auto perm = permutation(N, rng);
  Split<D> s;
  s.train_idx.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test_idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  std::sort(s.train_idx.begin(), s.train_idx.end());
  std::sort(s.test_idx.begin(), s.test_idx.end());
  s.train = subset(s.train_idx);
  s.test = subset(s.test_idx);
  return s;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_cell(const std::string& cell, const std::string& path, std::size_t line_no) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw IoError(fmt::format("{}:{}: cannot parse '{}' as a number", path, line_no, cell));
  }
}

}  // namespace

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
  Dataset out;
  out.has_intercept = has_intercept;
  out.feature_names = feature_names;
  out.feature_means = feature_means;
  out.feature_sds = feature_sds;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
  out.labels.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= size()) throw InvalidParameter(fmt::format("row {} out of range ({} rows)", rows[r], size()));
    out.features.row(static_cast<Eigen::Index>(r)) = features.row(static_cast<Eigen::Index>(rows[r]));
    out.labels(static_cast<Eigen::Index>(r)) = labels(static_cast<Eigen::Index>(rows[r]));
  }
  return out;
}

LogRegProblem gen_logreg(const LogRegGenParams& prm, RngStream& rng) {
  if (prm.N == 0 || prm.p == 0) throw InvalidParameter("gen_logreg: N and p must be >= 1");
  if (!(prm.signal >= 0.0)) throw InvalidParameter("gen_logreg: signal must be >= 0");
  if (!(prm.rho > -1.0 && prm.rho < 1.0)) throw InvalidParameter("gen_logreg: rho must be in (-1, 1)");
  if (!(prm.tau > 0.0)) throw InvalidParameter("gen_logreg: tau must be positive");
  if (!(prm.pi_flip >= 0.0 && prm.pi_flip <= 1.0)) throw InvalidParameter("gen_logreg: pi_flip must be in [0, 1]");

  const auto p = static_cast<Eigen::Index>(prm.p);
  const auto N = static_cast<Eigen::Index>(prm.N);

  Vector v(p);
  double vn = 0.0;
  do {
    for (Eigen::Index j = 0; j < p; ++j) v(j) = rng.normal();
    vn = v.norm();
  } while (vn == 0.0);
  Vector beta = prm.signal * v / vn;

  Matrix corr(p, p);
  for (Eigen::Index j = 0; j < p; ++j) {
    for (Eigen::Index k = 0; k < p; ++k) corr(j, k) = std::pow(prm.rho, static_cast<double>(std::abs(j - k)));
  }
  const Matrix chol = Eigen::LLT<Matrix>(corr).matrixL();

  LogRegProblem out;
  out.data.features.resize(N, p + 1);
  out.data.labels.resize(N);
  Vector e(p);
  for (Eigen::Index i = 0; i < N; ++i) {
    for (Eigen::Index j = 0; j < p; ++j) e(j) = rng.normal();
    const Vector x = chol * e;
    out.data.features(i, 0) = 1.0;
    out.data.features.row(i).tail(p) = x.transpose();
    double y = rng.uniform() < sigmoid(beta.dot(x) / prm.tau) ? 1.0 : 0.0;
    if (rng.uniform() < prm.pi_flip) y = 1.0 - y;
    out.data.labels(i) = y;
  }
  out.data.has_intercept = true;
  for (std::size_t j = 0; j < prm.p; ++j) out.data.feature_names.push_back(fmt::format("x{}", j + 1));
  out.true_beta.resize(p + 1);
  out.true_beta(0) = 0.0;
  out.true_beta.tail(p) = beta;
  return out;
}

double nn_regression_mean(double z) { return 3.0 * std::tanh(3.0 * z + 0.5); }

RegressionData gen_nn_data(std::size_t N, RngStream& rng, double sigma) {
  if (N == 0) throw InvalidParameter("gen_nn_data: N must be >= 1");
  if (!(sigma >= 0.0)) throw InvalidParameter("gen_nn_data: sigma must be >= 0");
  RegressionData d;
  d.z.resize(static_cast<Eigen::Index>(N));
  d.y.resize(static_cast<Eigen::Index>(N));
  for (Eigen::Index k = 0; k < d.z.size(); ++k) {
    d.z(k) = rng.uniform();
    d.y(k) = nn_regression_mean(d.z(k)) + sigma * rng.normal();
  }
  return d;
}

Split<Dataset> split(const Dataset& data, double train_frac, RngStream& rng) {
  return split_impl<Dataset>(data.size(), train_frac, rng, [&](const auto& rows) { return data.subset(rows); });
}

Split<RegressionData> split(const RegressionData& data, double train_frac, RngStream& rng) {
  return split_impl<RegressionData>(data.size(), train_frac, rng, [&](const std::vector<std::size_t>& rows) {
    RegressionData out;
    out.z.resize(static_cast<Eigen::Index>(rows.size()));
    out.y.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out.z(static_cast<Eigen::Index>(r)) = data.z(static_cast<Eigen::Index>(rows[r]));
      out.y(static_cast<Eigen::Index>(r)) = data.y(static_cast<Eigen::Index>(rows[r]));
    }
    return out;
  });
}

std::vector<std::size_t> minibatch(std::size_t N, std::size_t size, RngStream& rng) {
  if (size == 0 || size > N) throw InvalidParameter(fmt::format("minibatch size {} must be in [1, {}]", size, N));
  std::vector<std::size_t> out;
  out.reserve(size);
  if (size == N) {
    out.resize(N);
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
  }
  // Floyd's algorithm: exactly `size` draws.
  std::vector<char> taken(N, 0);
  for (std::size_t j = N - size; j < N; ++j) {
    std::size_t t = rng.below(j + 1);
    if (taken[t]) t = j;
    taken[t] = 1;
    out.push_back(t);
  }
  std::sort(out.begin(), out.end());
  return out;
}

BinarizeRule BinarizeRule::parse(const std::string& text) {
  BinarizeRule r;
  if (text.empty() || text == "none") return r;
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  if (colon == std::string::npos) throw ConfigError("binarize rule '" + text + "' needs a value, e.g. equals:2");
  if (kind == "equals") {
    r.kind = Kind::Equals;
  } else if (kind == "greater") {
    r.kind = Kind::Greater;
  } else {
    throw ConfigError("unknown binarize rule '" + kind + "'");
  }
  try {
    r.value = std::stod(text.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("binarize rule '" + text + "' has a non-numeric value");
  }
  return r;
}

double BinarizeRule::apply(double raw) const {
  switch (kind) {
    case Kind::Equals:
      return raw == value ? 1.0 : 0.0;
    case Kind::Greater:
      return raw > value ? 1.0 : 0.0;
    case Kind::None:
      break;
  }
  if (raw != 0.0 && raw != 1.0) {
    throw InvalidParameter(fmt::format("label {} is not binary; supply a binarize rule", raw));
  }
  return raw;
}

Dataset load_csv_dataset(const std::string& path, const std::string& label_column, const BinarizeRule& rule,
                         bool standardize) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError(path + ": empty file");
  const auto header = split_csv_line(line);
  const std::size_t ncol = header.size();

  std::size_t label_idx = ncol;
  for (std::size_t c = 0; c < ncol; ++c) {
    if (header[c] == label_column) label_idx = c;
  }
  if (label_idx == ncol && !label_column.empty() &&
      std::all_of(label_column.begin(), label_column.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); })) {
    label_idx = std::stoul(label_column);
  }
  if (label_idx >= ncol) throw IoError(fmt::format("{}: label column '{}' not found", path, label_column));
  if (ncol < 2) throw IoError(path + ": need at least one feature column");

  std::vector<std::vector<double>> rows;
  std::vector<double> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != ncol) {
      throw IoError(fmt::format("{}:{}: expected {} fields, found {}", path, line_no, ncol, cells.size()));
    }
    std::vector<double> feats;
    feats.reserve(ncol - 1);
    for (std::size_t c = 0; c < ncol; ++c) {
      const double v = parse_cell(cells[c], path, line_no);
      if (c == label_idx) {
        try {
          labels.push_back(rule.apply(v));
        } catch (const InvalidParameter& e) {
          throw IoError(fmt::format("{}:{}: {}", path, line_no, e.what()));
        }
      } else {
        feats.push_back(v);
      }
    }
    rows.push_back(std::move(feats));
  }
  if (rows.empty()) throw IoError(path + ": no data rows");

  const auto N = static_cast<Eigen::Index>(rows.size());
  const auto p = static_cast<Eigen::Index>(ncol - 1);
  Matrix raw(N, p);
  for (Eigen::Index i = 0; i < N; ++i) {
    for (Eigen::Index j = 0; j < p; ++j) raw(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }

  Dataset ds;
  for (std::size_t c = 0; c < ncol; ++c) {
    if (c != label_idx) ds.feature_names.push_back(header[c]);
  }
  if (standardize) {
    const Vector mean = raw.colwise().mean().transpose();
    raw.rowwise() -= mean.transpose();
    Vector sd = (raw.colwise().squaredNorm() / static_cast<double>(N)).cwiseSqrt().transpose();
    for (Eigen::Index j = 0; j < p; ++j) {
      if (sd(j) > 0.0) raw.col(j) /= sd(j);
    }
    ds.feature_means = mean;
    ds.feature_sds = sd;
  }
  ds.features.resize(N, p + 1);
  ds.features.col(0).setOnes();
  ds.features.rightCols(p) = raw;
  ds.labels = Eigen::Map<const Vector>(labels.data(), N);
  ds.has_intercept = true;
  return ds;
}

void write_dataset_csv(const std::string& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  const Eigen::Index first = data.has_intercept ? 1 : 0;
  out << "y";
  for (Eigen::Index j = first; j < data.features.cols(); ++j) {
    const auto k = static_cast<std::size_t>(j - first);
    out << ',' << (k < data.feature_names.size() ? data.feature_names[k] : fmt::format("x{}", k + 1));
  }
  out << '\n';
  for (Eigen::Index i = 0; i < data.features.rows(); ++i) {
    out << format_double(data.labels(i));
    for (Eigen::Index j = first; j < data.features.cols(); ++j) out << ',' << format_double(data.features(i, j));
    out << '\n';
  }
}

void write_regression_csv(const std::string& path, const RegressionData& data) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "z,y\n";
  for (Eigen::Index k = 0; k < data.z.size(); ++k) {
    out << format_double(data.z(k)) << ',' << format_double(data.y(k)) << '\n';
  }
}

}  // namespace fuse
