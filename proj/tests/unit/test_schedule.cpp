#include <cmath>

#include "fuse/error.hpp"
#include "fuse/schedule.hpp"
#include "test_util.hpp"

using namespace fuse;
using fuse::test::ens;

namespace {

Ensemble shifted(const Ensemble& x, double by) {
  return Ensemble((x.positions().array() + by).matrix());
}

}  // namespace

TEST(FlowSchedule, FirstCallReturnsInitialMovement) {
  auto [step, s] = fuse_flow_step(make_flow_state(0.01), ens({{1.0}}), 123.0);
  EXPECT_EQ(step, 0.01);
  EXPECT_TRUE(s.initialized());
  EXPECT_EQ(s.r_bar, 0.01);
  EXPECT_EQ(s.g_sum, 0.0);
  EXPECT_EQ(s.t, 0u);
}

TEST(FlowSchedule, NumeratorFloorsAtInitialMovement) {
  const auto x = ens({{1.0, 2.0}});
  auto s = fuse_flow_step(make_flow_state(0.3), x, 1.0).state;
  const auto r = fuse_flow_step(s, x, 4.0);
  EXPECT_DOUBLE_EQ(r.step, 0.3 / 2.0);
  EXPECT_EQ(r.state.t, 1u);
}

TEST(FlowSchedule, DisplacementOverRootGradientSum) {
  auto s = fuse_flow_step(make_flow_state(1e-6), ens({{0.0}}), 1.0).state;
  const auto r = fuse_flow_step(s, ens({{2.0}}), 4.0);
  EXPECT_DOUBLE_EQ(r.step, 1.0);
  EXPECT_DOUBLE_EQ(r.state.r_bar, 2.0);
}

TEST(FlowSchedule, Errors) {
  EXPECT_THROW(make_flow_state(0.0), InvalidParameter);
  EXPECT_THROW(make_flow_state(-1.0), InvalidParameter);
  auto s = fuse_flow_step(make_flow_state(0.1), ens({{0.0}}), 0.0).state;
  EXPECT_THROW(fuse_flow_step(s, ens({{0.0}}), 0.0), StepUndefined);
  EXPECT_THROW(fuse_flow_step(s, ens({{0.0}}), std::nan("")), NumericError);
  EXPECT_THROW(fuse_flow_step(s, ens({{0.0}, {1.0}}), 1.0), ShapeMismatch);
}

TEST(EulerSchedule, FirstStepUsesInitialMovement) {
  const auto r = fuse_euler_step(make_euler_state(0.1), ens({{5.0}}), 0.04);
  EXPECT_DOUBLE_EQ(r.step, 0.5);
  EXPECT_EQ(r.state.t, 1u);
}

TEST(EulerSchedule, SecondStep) {
  auto s = fuse_euler_step(make_euler_state(0.1), ens({{0.0}}), 0.04).state;
  const auto r = fuse_euler_step(s, ens({{1.0}}), 0.05);
  EXPECT_NEAR(r.step, 10.0 / 3.0, 1e-14);
}

TEST(EulerSchedule, ZeroDriftAtStartIsUndefined) {
  EXPECT_THROW(fuse_euler_step(make_euler_state(0.1), ens({{0.0}}), 0.0), StepUndefined);
}

TEST(TamedSchedule, FirstAdaptiveStep) {
  auto s = tamed_step(make_tamed_flow_state(1.0), ens({{0.0}}), 1.0);
  EXPECT_EQ(s.step, 1.0);
  const auto r = tamed_step(s.state, ens({{0.0}}), 1.0);
  EXPECT_DOUBLE_EQ(r.step, 1.0 / 256.0);
}

TEST(TamedSchedule, DenominatorGrowsWithDoublingGradients) {
  const auto x = ens({{0.0}});
  auto st = tamed_step(make_tamed_flow_state(1.0), x, 1.0).state;
  double prev_denominator = 0.0;
  double msn = 1.0;
  for (int t = 0; t < 20; ++t) {
    const auto r = tamed_step(st, x, msn);
    const double denominator = 1.0 / r.step;  // r_bar stays at 1
    EXPECT_GT(denominator, prev_denominator);
    prev_denominator = denominator;
    st = r.state;
    msn *= 2.0;
  }
}

TEST(TamedSchedule, NeverExceedsUntamedStep) {
  RngStream rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const double r_eps = std::pow(10.0, -6.0 + 6.0 * rng.uniform());
    const bool euler = trial % 2 == 1;
    TamedState tamed = euler ? make_tamed_euler_state(r_eps) : make_tamed_flow_state(r_eps);
    FuseFlowState flow = make_flow_state(r_eps);
    FuseEulerState eul = make_euler_state(r_eps);
    auto x = test::random_ensemble(4, 2, rng);
    for (int t = 0; t < 30; ++t) {
      const double msn = std::exp(2.0 * rng.normal());
      const auto rt = tamed_step(tamed, x, msn);
      double untamed;
      if (euler) {
        auto ru = fuse_euler_step(eul, x, msn);
        untamed = ru.step;
        eul = ru.state;
      } else {
        auto ru = fuse_flow_step(flow, x, msn);
        untamed = ru.step;
        flow = ru.state;
      }
      if (euler || t > 0) {
        ASSERT_LE(rt.step, untamed * (1 + 1e-12));
      }
      tamed = rt.state;
      x = shifted(x, 0.1 * rng.normal());
    }
  }
}

TEST(Schedules, MonotoneStateAndPositiveSteps) {
  RngStream rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    FuseFlowState flow = make_flow_state(1e-3);
    FuseEulerState eul = make_euler_state(1e-3);
    auto x = test::random_ensemble(5, 3, rng);
    double prev_r = 0.0, prev_g = 0.0, prev_re = 0.0, prev_ge = 0.0;
    for (int t = 0; t < 40; ++t) {
      const double msn = std::exp(rng.normal());
      const auto rf = fuse_flow_step(flow, x, msn);
      const auto re = fuse_euler_step(eul, x, msn);
      ASSERT_GT(rf.step, 0.0);
      ASSERT_TRUE(std::isfinite(rf.step));
      ASSERT_GT(re.step, 0.0);
      ASSERT_GE(rf.state.r_bar, prev_r);
      ASSERT_GE(rf.state.g_sum, prev_g);
      ASSERT_GE(rf.state.r_bar, 1e-3);
      ASSERT_GE(re.state.r_bar, prev_re);
      ASSERT_GE(re.state.g_sum, prev_ge);
      prev_r = rf.state.r_bar;
      prev_g = rf.state.g_sum;
      prev_re = re.state.r_bar;
      prev_ge = re.state.g_sum;
      flow = rf.state;
      eul = re.state;
      x = Ensemble(x.positions() + 0.3 * test::random_ensemble(5, 3, rng).positions());
    }
  }
}

TEST(Schedules, ScaleEquivariance) {
  RngStream rng(23);
  const double c = 3.7;
  for (int trial = 0; trial < 20; ++trial) {
    const double r_eps = 1e-2;
    FuseFlowState f1 = make_flow_state(r_eps), f2 = make_flow_state(c * r_eps);
    FuseEulerState e1 = make_euler_state(r_eps), e2 = make_euler_state(c * r_eps);
    auto x = test::random_ensemble(6, 2, rng);
    for (int t = 0; t < 25; ++t) {
      const double msn = std::exp(rng.normal());
      const Ensemble cx(c * x.positions());
      const auto a = fuse_flow_step(f1, x, msn);
      const auto b = fuse_flow_step(f2, cx, msn / (c * c));
      if (t > 0) {
        ASSERT_NEAR(b.step, c * c * a.step, 1e-10 * b.step);
      }
      const auto ea = fuse_euler_step(e1, x, msn);
      const auto eb = fuse_euler_step(e2, cx, msn / (c * c));
      ASSERT_NEAR(eb.step, c * c * ea.step, 1e-10 * eb.step);
      f1 = a.state;
      f2 = b.state;
      e1 = ea.state;
      e2 = eb.state;
      x = Ensemble(x.positions() + test::random_ensemble(6, 2, rng).positions());
    }
  }
}

TEST(Schedules, LogPlus) {
  EXPECT_EQ(log_plus(1.0), 1.0);
  EXPECT_EQ(log_plus(std::exp(1.0)), 1.0);
  EXPECT_DOUBLE_EQ(log_plus(std::exp(3.0)), 3.0);
}

TEST(Schedules, JsonRoundTrip) {
  const auto dir = test::temp_dir("schedule_json");
  RngStream rng(24);
  auto x = test::random_ensemble(3, 2, rng);
  auto flow = fuse_flow_step(make_flow_state(0.5), x, 1.0).state;
  flow = fuse_flow_step(flow, shifted(x, 2.0), 3.0).state;
  save_schedule_state((dir / "flow.json").string(), "flow_ref.csv", flow);
  const auto back = std::get<FuseFlowState>(load_schedule_state((dir / "flow.json").string()));
  EXPECT_EQ(back.r_eps, flow.r_eps);
  EXPECT_EQ(back.r_bar, flow.r_bar);
  EXPECT_EQ(back.g_sum, flow.g_sum);
  EXPECT_EQ(back.t, flow.t);
  EXPECT_EQ(*back.reference, *flow.reference);

  auto tamed = tamed_step(make_tamed_euler_state(0.2), x, 2.0).state;
  tamed = tamed_step(tamed, shifted(x, 1.0), 5.0).state;
  save_schedule_state((dir / "tamed.json").string(), "tamed_ref.csv", tamed);
  const auto tb = std::get<TamedState>(load_schedule_state((dir / "tamed.json").string()));
  EXPECT_EQ(tb.g_bar_sq, tamed.g_bar_sq);
  EXPECT_EQ(tb.g_first_sq, tamed.g_first_sq);
  const auto& eb = std::get<FuseEulerState>(tb.base);
  const auto& ea = std::get<FuseEulerState>(tamed.base);
  EXPECT_EQ(eb.g_sum, ea.g_sum);
  EXPECT_EQ(*eb.reference, *ea.reference);
  // Continuing from the restored state gives the same next step.
  EXPECT_EQ(tamed_step(tb, x, 1.0).step, tamed_step(tamed, x, 1.0).step);
}
