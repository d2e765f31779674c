#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "fuse/data.hpp"
#include "fuse/targets.hpp"
#include "test_util.hpp"

using namespace fuse;

namespace {

const std::string kData = FUSE_TEST_DATA_DIR;

template <class F>
void expect_io_error_mentioning(F&& f, const std::string& needle) {
  try {
    f();
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

}  // namespace

TEST(GenLogReg, SignalNormAndLayout) {
  RngStream rng(1);
  const auto prob = gen_logreg({}, rng);
  EXPECT_EQ(prob.data.size(), 500u);
  EXPECT_EQ(prob.data.features.cols(), 9);
  EXPECT_EQ(prob.true_beta.size(), 9);
  EXPECT_EQ(prob.true_beta(0), 0.0);
  EXPECT_NEAR(prob.true_beta.tail(8).norm(), 3.0, 1e-12);
  EXPECT_TRUE((prob.data.features.col(0).array() == 1.0).all());
  EXPECT_TRUE((prob.data.labels.array() == 0.0 || prob.data.labels.array() == 1.0).all());
}

TEST(GenLogReg, BitReproducible) {
  RngStream a(7), b(7);
  const auto pa = gen_logreg({100, 3, 2.0, 0.3, 0.6, 0.1}, a);
  const auto pb = gen_logreg({100, 3, 2.0, 0.3, 0.6, 0.1}, b);
  EXPECT_EQ(pa.data.features, pb.data.features);
  EXPECT_EQ(pa.data.labels, pb.data.labels);
  EXPECT_EQ(pa.true_beta, pb.true_beta);
}

TEST(GenLogReg, NoFlipsAndColdTemperatureGiveSignLabels) {
  RngStream rng(2);
  const auto prob = gen_logreg({300, 4, 3.0, 0.2, 1e-9, 0.0}, rng);
  const Vector z = prob.data.features * prob.true_beta;
  for (Eigen::Index i = 0; i < z.size(); ++i) EXPECT_EQ(prob.data.labels(i), z(i) > 0 ? 1.0 : 0.0);
}

TEST(GenLogReg, FeatureCorrelations) {
  const std::size_t N = 4000;
  for (double rho : {0.0, 0.5}) {
    RngStream rng(3);
    const auto prob = gen_logreg({N, 4, 3.0, rho, 0.6, 0.01}, rng);
    const Matrix x = prob.data.features.rightCols(4);
    const Matrix c = x.rowwise() - x.colwise().mean();
    const Matrix cov = c.transpose() * c / static_cast<double>(N);
    for (Eigen::Index j = 0; j < 4; ++j) {
      for (Eigen::Index k = j + 1; k < 4; ++k) {
        const double r = cov(j, k) / std::sqrt(cov(j, j) * cov(k, k));
        EXPECT_NEAR(r, std::pow(rho, static_cast<double>(k - j)), 3.0 / std::sqrt(static_cast<double>(N)));
      }
    }
  }
}

TEST(GenLogReg, FlipAllInvertsLabels) {
  RngStream a(4), b(4);
  const auto clean = gen_logreg({50, 2, 3.0, 0.2, 0.6, 0.0}, a);
  const auto flipped = gen_logreg({50, 2, 3.0, 0.2, 0.6, 1.0}, b);
  EXPECT_EQ(flipped.data.labels, (1.0 - clean.data.labels.array()).matrix());
}

TEST(GenLogReg, InvalidParameters) {
  RngStream rng(5);
  EXPECT_THROW(gen_logreg({0, 2}, rng), InvalidParameter);
  EXPECT_THROW(gen_logreg({10, 2, 3.0, 1.0}, rng), InvalidParameter);
  EXPECT_THROW(gen_logreg({10, 2, 3.0, 0.2, 0.0}, rng), InvalidParameter);
  EXPECT_THROW(gen_logreg({10, 2, 3.0, 0.2, 0.6, 1.5}, rng), InvalidParameter);
}

TEST(GenNnData, NoiselessOutputsAreExact) {
  RngStream rng(6);
  const auto d = gen_nn_data(300, rng, 0.0);
  for (Eigen::Index k = 0; k < 300; ++k) {
    EXPECT_EQ(d.y(k), 3.0 * std::tanh(3.0 * d.z(k) + 0.5));
    EXPECT_EQ(d.y(k), nn_regression_mean(d.z(k)));
    EXPECT_GE(d.z(k), 0.0);
    EXPECT_LE(d.z(k), 1.0);
  }
}

TEST(GenNnData, SampleMeanNearIntegral) {
  const double integral = std::log(std::cosh(3.5)) - std::log(std::cosh(0.5));
  // variance of f(z) for z ~ U(0, 1) by midpoint quadrature
  const int q = 100000;
  double m2 = 0.0;
  for (int k = 0; k < q; ++k) m2 += std::pow(nn_regression_mean((k + 0.5) / q), 2) / q;
  const double sd_total = std::sqrt(m2 - integral * integral + 0.01);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed);
    const auto d = gen_nn_data(300, rng);
    EXPECT_NEAR(d.y.mean(), integral, 3.0 * sd_total / std::sqrt(300.0));
  }
}

TEST(GenNnData, Reproducible) {
  RngStream a(8), b(8);
  const auto da = gen_nn_data(20, a), db = gen_nn_data(20, b);
  EXPECT_EQ(da.z, db.z);
  EXPECT_EQ(da.y, db.y);
  EXPECT_THROW(gen_nn_data(0, a), InvalidParameter);
}

TEST(Split, EightyTwentyOfFiveHundred) {
  RngStream rng(9);
  const auto prob = gen_logreg({}, rng);
  const auto s = split(prob.data, 0.8, rng);
  EXPECT_EQ(s.train.size(), 400u);
  EXPECT_EQ(s.test.size(), 100u);
  std::set<std::size_t> all(s.train_idx.begin(), s.train_idx.end());
  for (auto i : s.test_idx) EXPECT_TRUE(all.insert(i).second) << "index " << i << " in both sides";
  EXPECT_EQ(all.size(), 500u);
  EXPECT_EQ(*all.rbegin(), 499u);
  for (std::size_t r = 0; r < s.test_idx.size(); ++r) {
    EXPECT_EQ(s.test.features.row(static_cast<Eigen::Index>(r)),
              prob.data.features.row(static_cast<Eigen::Index>(s.test_idx[r])));
  }
}

TEST(Split, RegressionAndErrors) {
  RngStream rng(10);
  const auto d = gen_nn_data(10, rng);
  const auto s = split(d, 0.5, rng);
  EXPECT_EQ(s.train.size() + s.test.size(), 10u);
  EXPECT_THROW(split(d, 0.0, rng), InvalidParameter);
  EXPECT_THROW(split(d, 1.0, rng), InvalidParameter);
  EXPECT_THROW(split(d, 0.01, rng), InvalidParameter);
}

TEST(Minibatch, FullSizeIsEveryIndex) {
  RngStream rng(11);
  std::vector<std::size_t> expected(25);
  std::iota(expected.begin(), expected.end(), 0);
  EXPECT_EQ(minibatch(25, 25, rng), expected);
}

TEST(Minibatch, DistinctSortedAndReproducible) {
  RngStream a(12), b(12);
  for (int k = 0; k < 50; ++k) {
    const auto ba = minibatch(100, 10, a);
    EXPECT_EQ(ba, minibatch(100, 10, b));
    EXPECT_TRUE(std::is_sorted(ba.begin(), ba.end()));
    EXPECT_EQ(std::adjacent_find(ba.begin(), ba.end()), ba.end());
    EXPECT_LT(ba.back(), 100u);
  }
  EXPECT_NE(minibatch(100, 10, a), minibatch(100, 10, a));
}

TEST(Minibatch, UniformInclusion) {
  RngStream rng(13);
  std::vector<int> hits(20, 0);
  const int draws = 20000;
  for (int k = 0; k < draws; ++k)
    for (auto i : minibatch(20, 5, rng)) ++hits[i];
  const double p = 0.25, sd = std::sqrt(draws * p * (1 - p));
  for (int h : hits) EXPECT_NEAR(h, draws * p, 4 * sd);
}

TEST(Minibatch, InvalidSizes) {
  RngStream rng(14);
  EXPECT_THROW(minibatch(10, 0, rng), InvalidParameter);
  EXPECT_THROW(minibatch(10, 11, rng), InvalidParameter);
}

TEST(LoadCsv, ParsesFixtureExactly) {
  const auto ds = load_csv_dataset(kData + "/small.csv", "label", {}, false);
  ASSERT_EQ(ds.size(), 3u);
  Matrix expected(3, 3);
  expected << 1, 1.5, -2, 1, 0.25, 3, 1, -1, 0.5;
  EXPECT_EQ(ds.features, expected);
  EXPECT_EQ(ds.labels, Vector(Eigen::Vector3d(1, 0, 1)));
  EXPECT_EQ(ds.feature_names, (std::vector<std::string>{"x1", "x2"}));
  EXPECT_FALSE(ds.feature_means.has_value());
  EXPECT_EQ(load_csv_dataset(kData + "/small.csv", "2", {}, false).features, expected);
}

TEST(LoadCsv, StandardizesColumns) {
  const auto ds = load_csv_dataset(kData + "/small.csv", "label");
  const Matrix x = ds.features.rightCols(2);
  for (Eigen::Index j = 0; j < 2; ++j) {
    EXPECT_NEAR(x.col(j).mean(), 0.0, 1e-12);
    EXPECT_NEAR(x.col(j).squaredNorm() / 3.0, 1.0, 1e-12);
  }
  ASSERT_TRUE(ds.feature_means.has_value());
  EXPECT_NEAR((*ds.feature_means)(0), 0.25, 1e-15);
  EXPECT_TRUE((ds.features.col(0).array() == 1.0).all());
}

TEST(LoadCsv, BinarizeRules) {
  const auto eq = load_csv_dataset(kData + "/multiclass.csv", "cls", BinarizeRule::parse("equals:3"));
  EXPECT_EQ(eq.labels, Vector(Eigen::Vector4d(1, 0, 1, 0)));
  const auto gt = load_csv_dataset(kData + "/multiclass.csv", "cls", BinarizeRule::parse("greater:2.5"));
  EXPECT_EQ(gt.labels, Vector(Eigen::Vector4d(1, 1, 1, 0)));
  EXPECT_THROW(load_csv_dataset(kData + "/multiclass.csv", "cls"), IoError);
  EXPECT_THROW(BinarizeRule::parse("between:1"), ConfigError);
  EXPECT_THROW(BinarizeRule::parse("equals"), ConfigError);
  EXPECT_THROW(BinarizeRule::parse("equals:x"), ConfigError);
}

TEST(LoadCsv, Errors) {
  expect_io_error_mentioning([] { load_csv_dataset(kData + "/small.csv", "target"); }, "target");
  expect_io_error_mentioning([] { load_csv_dataset(kData + "/bad_cell.csv", "label"); }, ":3:");
  expect_io_error_mentioning([] { load_csv_dataset(kData + "/short_row.csv", "label"); }, ":3:");
  EXPECT_THROW(load_csv_dataset(kData + "/does_not_exist.csv", "label"), IoError);
}

TEST(LoadCsv, ExportRoundTrip) {
  RngStream rng(15);
  const auto prob = gen_logreg({20, 3, 3.0, 0.2, 0.6, 0.0}, rng);
  const auto dir = test::temp_dir("data_export");
  write_dataset_csv((dir / "d.csv").string(), prob.data);
  const auto back = load_csv_dataset((dir / "d.csv").string(), "y", {}, false);
  EXPECT_EQ(back.features, prob.data.features);
  EXPECT_EQ(back.labels, prob.data.labels);
  EXPECT_EQ(back.feature_names, prob.data.feature_names);
}

TEST(Dataset, SubsetSelectsRows) {
  const auto ds = load_csv_dataset(kData + "/small.csv", "label", {}, false);
  const auto sub = ds.subset({2, 0});
  EXPECT_EQ(sub.features.row(0), ds.features.row(2));
  EXPECT_EQ(sub.labels(1), ds.labels(0));
  EXPECT_THROW(ds.subset({3}), InvalidParameter);
}
