#include <cmath>

#include "fuse/error.hpp"
#include "fuse/flows.hpp"
#include "fuse/data.hpp"
#include "fuse/metrics.hpp"
#include "test_util.hpp"

using namespace fuse;
using fuse::test::ens;

namespace {

GradientEval grad_of(ParticleMatrix m) {
  GradientEval g;
  g.values = std::move(m);
  return g;
}

std::shared_ptr<GaussianTarget> std_gaussian(std::size_t d) {
  return GaussianTarget::diagonal(Vector::Zero(static_cast<Eigen::Index>(d)), Vector::Ones(static_cast<Eigen::Index>(d)));
}

SamplerConfig flow_config(ScheduleKind kind, double value, std::size_t T) {
  SamplerConfig c;
  c.family = Family::ForwardFlow;
  c.schedule.kind = kind;
  (kind == ScheduleKind::Fixed ? c.schedule.eta : c.schedule.r_eps) = value;
  c.iterations = T;
  return c;
}

}  // namespace

TEST(ForwardFlowStep, ZeroGradientLeavesHalfUnchanged) {
  RngStream rng(1);
  const auto x = test::random_ensemble(5, 3, rng);
  const auto s = forward_flow_step(x, grad_of(ParticleMatrix::Zero(5, 3)), 0.7, rng);
  EXPECT_EQ(s.half, x);
}

TEST(ForwardFlowStep, TransportHalfStep) {
  RngStream rng(2);
  ParticleMatrix g(1, 2);
  g << 2, 0;
  const auto s = forward_flow_step(ens({{1, 1}}), grad_of(g), 0.25, rng);
  EXPECT_EQ(s.half, ens({{0.5, 1}}));
}

TEST(ForwardFlowStep, NoiseIsScaledStandardNormal) {
  RngStream rng(3), copy(3);
  const auto x = ens({{0.5}, {-1.0}});
  const auto s = forward_flow_step(x, grad_of(ParticleMatrix::Zero(2, 1)), 0.08, rng);
  EXPECT_DOUBLE_EQ(s.next.positions()(0, 0), 0.5 + std::sqrt(0.16) * copy.normal());
  EXPECT_DOUBLE_EQ(s.next.positions()(1, 0), -1.0 + std::sqrt(0.16) * copy.normal());
}

TEST(ForwardFlowStep, ZeroTemperatureZeroGradientIsIdentity) {
  RngStream rng(4);
  const auto x = test::random_ensemble(4, 2, rng);
  const auto s = forward_flow_step(x, grad_of(ParticleMatrix::Zero(4, 2)), 1.0, rng, nullptr, 0.0);
  EXPECT_EQ(s.next, x);
}

TEST(ForwardFlowStep, ClampAppliesToNoisyPoint) {
  Box box{Vector::Constant(1, -1.0), Vector::Constant(1, 1.0)};
  RngStream rng(5), copy(5);
  const auto s = forward_flow_step(ens({{0.0}}), grad_of(ParticleMatrix::Zero(1, 1)), 50.0, rng, &box);
  const double raw = 10.0 * copy.normal();
  EXPECT_EQ(s.next.positions()(0, 0), std::clamp(raw, -1.0, 1.0));
  EXPECT_EQ(project_box(ens({{9.0}}), box.lo, box.hi), ens({{1.0}}));
}

TEST(ForwardFlowStep, Errors) {
  RngStream rng(6);
  const auto x = ens({{0.0}});
  EXPECT_THROW(forward_flow_step(x, grad_of(ParticleMatrix::Zero(1, 1)), 0.0, rng), InvalidParameter);
  EXPECT_THROW(forward_flow_step(x, grad_of(ParticleMatrix::Zero(1, 1)), -1.0, rng), InvalidParameter);
  EXPECT_THROW(forward_flow_step(x, grad_of(ParticleMatrix::Zero(2, 1)), 1.0, rng), ShapeMismatch);
}

TEST(KernelizedStep, SingleParticleIsGradientDescent) {
  ParticleMatrix g(1, 1);
  g << 2;
  const auto next = forward_euler_kernelized_step(ens({{3.0}}), grad_of(g), RbfKernel{0.7}, 0.5);
  EXPECT_DOUBLE_EQ(next.positions()(0, 0), 2.0);
  RngStream rng(7);
  const auto x = test::random_ensemble(1, 4, rng);
  ParticleMatrix g4 = test::random_ensemble(1, 4, rng).positions();
  const auto y = forward_euler_kernelized_step(x, grad_of(g4), RbfKernel{2.0}, 0.1);
  EXPECT_TRUE(y.positions().isApprox(x.positions() - 0.1 * g4, 1e-15));
}

TEST(KernelizedStep, CoincidentParticlesWithZeroGradientStay) {
  const auto x = ens({{1, 2}, {1, 2}, {1, 2}});
  const auto y = forward_euler_kernelized_step(x, grad_of(ParticleMatrix::Zero(3, 2)), RbfKernel{1.0}, 1.0);
  EXPECT_EQ(y, x);
}

TEST(KernelizedStep, TwoParticleRepulsionMatchesKernelDifferences) {
  const auto x = ens({{0.0}, {1.0}});
  const KernelSpec k = RbfKernel{1.0};
  const auto y = forward_euler_kernelized_step(x, grad_of(ParticleMatrix::Zero(2, 1)), k, 1.0);
  const Vector x0 = Vector::Constant(1, 0.0);
  const Vector x1 = Vector::Constant(1, 1.0);
  // d/da k(a, x0) at a = x1
  const double grad1 = test::fd_gradient([&](const Vector& a) { return kernel_eval(k, a, x0); }, x1)(0);
  EXPECT_NEAR(y.positions()(0, 0), 0.5 * grad1, 1e-9);
  EXPECT_LT(y.positions()(0, 0), 0.0);
  EXPECT_NEAR(y.positions()(1, 0), 1.0 - y.positions()(0, 0), 1e-12);
}

TEST(KsdDrift, VanishesForSingleParticleAtMode) {
  const auto t = std_gaussian(3);
  SteinKernel sk{ImqKernel{1.0, -0.5}, t->score_field()};
  const auto d = ksd_flow_drift(ens({{0, 0, 0}}), sk);
  EXPECT_LT(d.values.norm(), 1e-14);
}

TEST(KsdDrift, ShapeAndCoincidentRows) {
  const auto t = GaussianTarget::diagonal(Vector::Constant(2, 0.5), Vector::Constant(2, 2.0));
  SteinKernel sk{ImqKernel{1.0, -0.5}, t->score_field()};
  const auto x = ens({{1, 2}, {-1, 0}, {1, 2}});
  const auto d = ksd_flow_drift(x, sk);
  EXPECT_EQ(d.values.rows(), 3);
  EXPECT_EQ(d.values.cols(), 2);
  EXPECT_EQ(d.values.row(0), d.values.row(2));
}

TEST(KsdDrift, MatchesPairwiseSteinGradient) {
  RngStream rng(8);
  const auto t = GaussianTarget::diagonal(test::random_vector(2, rng), Vector::Constant(2, 1.5));
  SteinKernel sk{ImqKernel{1.0, -0.5}, t->score_field()};
  const auto x = test::random_ensemble(4, 2, rng);
  const auto d = ksd_flow_drift(x, sk);
  for (std::size_t i = 0; i < 4; ++i) {
    Vector acc = Vector::Zero(2);
    for (std::size_t j = 0; j < 4; ++j) acc += stein_kernel_grad2(sk, x.particle(j), x.particle(i));
    EXPECT_TRUE(test::close_rel(d.values.row(static_cast<Eigen::Index>(i)).transpose(), acc / 4.0, 1e-12));
  }
}

TEST(Averaging, Examples) {
  const auto a = ens({{0.0}});
  const auto b = ens({{4.0}});
  EXPECT_EQ(average_trajectory(Averaging::Uniform, {{a, 1.0}}), a);
  EXPECT_EQ(average_trajectory(Averaging::Uniform, {{a, 1.0}, {b, 1.0}}), ens({{2.0}}));
  EXPECT_EQ(average_trajectory(Averaging::Weighted, {{a, 1.0}, {b, 3.0}}), ens({{3.0}}));
  EXPECT_THROW(average_trajectory(Averaging::Uniform, {}), InvalidParameter);
  EXPECT_THROW(average_trajectory(Averaging::Weighted, {{a, 0.0}}), InvalidParameter);
}

TEST(Averaging, ConstantWeightsEqualUniformBitwise) {
  RngStream rng(9);
  std::vector<std::pair<Ensemble, double>> stream;
  for (int t = 0; t < 50; ++t) stream.emplace_back(test::random_ensemble(3, 2, rng), 2.5);
  EXPECT_EQ(average_trajectory(Averaging::Weighted, stream), average_trajectory(Averaging::Uniform, stream));
}

TEST(ProjectBox, Examples) {
  const Vector lo = Vector::Constant(2, -1.0), hi = Vector::Constant(2, 1.0);
  EXPECT_EQ(project_box(ens({{0.2, -0.3}}), lo, hi), ens({{0.2, -0.3}}));
  EXPECT_EQ(project_box(ens({{5.0}}), Vector::Constant(1, -1.0), Vector::Constant(1, 1.0)), ens({{1.0}}));
  EXPECT_EQ(project_box(ens({{-3.0, 0.5}}), lo, hi), ens({{-1.0, 0.5}}));
  EXPECT_THROW(project_box(ens({{0.0}}), Vector::Constant(1, 1.0), Vector::Constant(1, 1.0)), InvalidParameter);
  EXPECT_THROW(project_box(ens({{0.0}}), lo, hi), ShapeMismatch);
}

TEST(ProjectBox, Idempotent) {
  RngStream rng(10);
  const Vector lo = Vector::Constant(3, -0.5), hi = Vector::Constant(3, 0.7);
  for (int i = 0; i < 50; ++i) {
    const auto x = test::random_ensemble(6, 3, rng, 2.0);
    const auto once = project_box(x, lo, hi);
    EXPECT_EQ(project_box(once, lo, hi), once);
  }
}

TEST(SamplerConfig, Validation) {
  auto c = flow_config(ScheduleKind::Fixed, 0.1, 0);
  EXPECT_THROW(c.validate(), ConfigError);
  c = flow_config(ScheduleKind::Fixed, 0.0, 5);
  EXPECT_THROW(c.validate(), ConfigError);
  c = flow_config(ScheduleKind::Fuse, -1.0, 5);
  EXPECT_THROW(c.validate(), ConfigError);
  c = flow_config(ScheduleKind::Fuse, 1e-3, 5);
  c.box = Box{Vector::Constant(1, 1.0), Vector::Constant(1, 0.0)};
  EXPECT_THROW(c.validate(), ConfigError);
  c.box.reset();
  c.metric_every = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(SamplerConfig, NameRoundTrip) {
  for (auto f : {Family::ForwardFlow, Family::LangevinKsd, Family::ForwardEulerKernelized, Family::KsdDescent}) {
    EXPECT_EQ(parse_family(to_string(f)), f);
  }
  for (auto k : {ScheduleKind::Fuse, ScheduleKind::Fixed, ScheduleKind::TamedFuse}) EXPECT_EQ(parse_schedule_kind(to_string(k)), k);
  for (auto a : {Averaging::None, Averaging::Uniform, Averaging::Weighted}) EXPECT_EQ(parse_averaging(to_string(a)), a);
  EXPECT_THROW(parse_family("hmc"), ConfigError);
}

TEST(RunSampler, ZeroIterationsRejected) {
  RngStream rng(11);
  const auto x = test::random_ensemble(4, 2, rng);
  EXPECT_THROW(run_sampler(flow_config(ScheduleKind::Fixed, 0.1, 0), std_gaussian(2), x, rng), ConfigError);
}

TEST(RunSampler, DimensionMismatchRejected) {
  RngStream rng(12);
  const auto x = test::random_ensemble(4, 3, rng);
  EXPECT_THROW(run_sampler(flow_config(ScheduleKind::Fixed, 0.1, 3), std_gaussian(2), x, rng), ShapeMismatch);
}

TEST(RunSampler, RecordsEveryIterationAndFollowsCadence) {
  RngStream rng(13);
  const auto t = std_gaussian(2);
  const auto x = test::random_ensemble(20, 2, rng);
  auto cfg = flow_config(ScheduleKind::Fuse, 1e-2, 10);
  cfg.metric_every = 3;
  std::vector<MetricHook> hooks{{"kl", [t](const Ensemble& e) { return moment_matched_kl(e, *t).value; }}};
  const auto tr = run_sampler(cfg, t, x, RngStream(1), hooks);
  ASSERT_EQ(tr.records.size(), 10u);
  for (const auto& r : tr.records) {
    const bool expected = r.iter % 3 == 0 || r.iter == 10;
    EXPECT_EQ(!std::isnan(r.metrics[0]), expected) << "iter " << r.iter;
    EXPECT_GT(r.step, 0.0);
  }
  EXPECT_EQ(tr.records.front().step, 1e-2);
  EXPECT_EQ(tr.metric_names, std::vector<std::string>{"kl"});
}

TEST(RunSampler, SameSeedSameTrajectory) {
  RngStream rng(14);
  const auto x = test::random_ensemble(30, 3, rng);
  auto prob = gen_logreg({60, 2, 3.0, 0.2, 0.6, 0.01}, rng);
  const auto target = LogRegTarget::make(prob.data.features, prob.data.labels, GaussianPrior{1.0}, 10);
  auto cfg = flow_config(ScheduleKind::Fuse, 1e-3, 25);
  const auto a = run_sampler(cfg, target, x, RngStream(99));
  const auto b = run_sampler(cfg, target, x, RngStream(99));
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t k = 0; k < a.records.size(); ++k) EXPECT_EQ(a.records[k].step, b.records[k].step);
  EXPECT_EQ(*a.final_ensemble, *b.final_ensemble);
  const auto c = run_sampler(cfg, target, x, RngStream(100));
  EXPECT_FALSE(*a.final_ensemble == *c.final_ensemble);
}

TEST(RunSampler, DivergenceStopsRun) {
  RngStream rng(15);
  const auto x = test::random_ensemble(10, 2, rng);
  const auto tr = run_sampler(flow_config(ScheduleKind::Fixed, 50.0, 500), std_gaussian(2), x, RngStream(3));
  ASSERT_TRUE(tr.diverged_at.has_value());
  EXPECT_EQ(tr.records.size(), *tr.diverged_at - 1);
  EXPECT_LT(*tr.diverged_at, 500u);
}

TEST(RunSampler, ZeroDriftReportsIteration) {
  SamplerConfig cfg;
  cfg.family = Family::ForwardEulerKernelized;
  cfg.schedule = {ScheduleKind::Fuse, 0.0, 0.1};
  cfg.iterations = 3;
  try {
    run_sampler(cfg, std_gaussian(2), ens({{0.0, 0.0}}), RngStream(1));
    FAIL() << "expected StepUndefined";
  } catch (const StepUndefined& e) {
    EXPECT_EQ(std::string(e.what()).rfind("iteration 1:", 0), 0u) << e.what();
  }
}

TEST(RunSampler, ScoreFamiliesNeedScore) {
  RngStream rng(16);
  const auto data = gen_nn_data(20, rng);
  auto nn = std::make_shared<MeanFieldNNEnergy>(data.z, data.y, 10.0);
  SamplerConfig cfg;
  cfg.family = Family::KsdDescent;
  cfg.schedule = {ScheduleKind::Fuse, 0.0, 0.1};
  cfg.iterations = 2;
  EXPECT_THROW(run_sampler(cfg, nn, test::random_ensemble(5, 4, rng), rng), ConfigError);
}

TEST(RunSampler, KernelizedFamiliesMoveTowardTarget) {
  RngStream rng(17);
  const auto t = GaussianTarget::diagonal(Vector::Constant(2, 3.0), Vector::Ones(2));
  const auto x = test::random_ensemble(30, 2, rng);
  for (auto fam : {Family::ForwardEulerKernelized, Family::KsdDescent, Family::LangevinKsd}) {
    SamplerConfig cfg;
    cfg.family = fam;
    cfg.schedule = {ScheduleKind::Fuse, 0.0, 1e-2};
    cfg.iterations = 200;
    const auto tr = run_sampler(cfg, t, x, RngStream(5));
    ASSERT_FALSE(tr.diverged_at) << to_string(fam);
    const Vector m = tr.final_ensemble->positions().colwise().mean();
    EXPECT_LT((m - t->mean()).norm(), (x.positions().colwise().mean().transpose() - t->mean()).norm() / 2)
        << to_string(fam);
  }
}

TEST(RunSampler, ProjectionKeepsIteratesInBox) {
  RngStream rng(18);
  auto cfg = flow_config(ScheduleKind::Fuse, 1e-2, 50);
  cfg.box = Box{Vector::Constant(2, -0.5), Vector::Constant(2, 0.5)};
  std::size_t seen = 0;
  run_sampler(cfg, std_gaussian(2), test::random_ensemble(10, 2, rng), RngStream(2), {},
              [&](std::size_t, const Ensemble& x, double) {
                ++seen;
                EXPECT_LE(x.positions().maxCoeff(), 0.5);
                EXPECT_GE(x.positions().minCoeff(), -0.5);
              });
  EXPECT_EQ(seen, 50u);
}

TEST(RunSampler, EulerDisplacementGrowthBound) {
  RngStream rng(20);
  const auto t = GaussianTarget::diagonal(Vector::Constant(3, 1.0), Vector::Constant(3, 2.0));
  Ensemble x = test::random_ensemble(12, 3, rng);
  const Ensemble x0 = x;
  FuseEulerState s = make_euler_state(1e-3);
  double prev = 0.0;
  for (int it = 0; it < 100; ++it) {
    const auto drift = kernelized_drift(x, t->gradient(x, nullptr), RbfKernel{median_bandwidth(x)});
    const double msn = mean_squared_grad_norm(drift);
    auto r = fuse_euler_step(s, x, msn);
    s = r.state;
    x = Ensemble(x.positions() - r.step * drift);
    const double disp = identity_coupling_distance(x0, x);
    ASSERT_LE(disp, prev + r.step * std::sqrt(msn) + 1e-12);
    prev = disp;
  }
}

TEST(RunSampler, AveragedMetricsReported) {
  RngStream rng(21);
  const auto t = std_gaussian(2);
  auto cfg = flow_config(ScheduleKind::Fuse, 1e-2, 5);
  cfg.averaging = Averaging::Weighted;
  std::vector<MetricHook> hooks{{"mean0", [](const Ensemble& e) { return e.positions().col(0).mean(); }}};
  const auto tr = run_sampler(cfg, t, test::random_ensemble(8, 2, rng), RngStream(2), hooks);
  ASSERT_TRUE(tr.average.has_value());
  EXPECT_EQ(tr.records.back().avg_metrics.size(), 1u);
  EXPECT_DOUBLE_EQ(tr.records.back().avg_metrics[0], tr.average->positions().col(0).mean());
}

TEST(Checkpoint, ResumeIsBitExact) {
  const auto dir = test::temp_dir("checkpoint");
  RngStream rng(22);
  auto prob = gen_logreg({80, 3, 3.0, 0.2, 0.6, 0.01}, rng);
  const auto target = LogRegTarget::make(prob.data.features, prob.data.labels, GaussianPrior{1.0}, 16);
  const auto x = test::random_ensemble(15, 4, rng);
  for (auto kind : {ScheduleKind::Fuse, ScheduleKind::TamedFuse, ScheduleKind::Fixed}) {
    for (auto fam : {Family::ForwardFlow, Family::ForwardEulerKernelized}) {
      auto cfg = flow_config(kind, 1e-3, 30);
      cfg.family = fam;
      cfg.averaging = Averaging::Weighted;
      const auto full = run_sampler(cfg, target, x, RngStream(7));
      auto cp_cfg = cfg;
      cp_cfg.snapshot_iters = {12};
      cp_cfg.checkpoint_dir = (dir / (std::string(to_string(kind)) + "_" + to_string(fam))).string();
      run_sampler(cp_cfg, target, x, RngStream(7));
      const auto cp = SamplerCheckpoint::load(*cp_cfg.checkpoint_dir + "/iter_12");
      EXPECT_EQ(cp.iter, 12u);
      const auto rest = resume_sampler(cfg, target, cp);
      ASSERT_EQ(rest.records.size(), 18u);
      for (std::size_t k = 0; k < 18; ++k) EXPECT_EQ(rest.records[k].step, full.records[12 + k].step);
      EXPECT_EQ(*rest.final_ensemble, *full.final_ensemble);
      EXPECT_EQ(*rest.average, *full.average);
    }
  }
}
