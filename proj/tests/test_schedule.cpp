#include <gtest/gtest.h>

#include <cmath>

#include "atddpm/error.hpp"
#include "atddpm/schedule.hpp"

using namespace atddpm;

TEST(LinearSchedule, EndpointsAndSpacing) {
  const auto s = linear_schedule(1000, 1e-4, 0.02);
  EXPECT_EQ(s.steps(), 1000u);
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta(1000), 0.02);
  EXPECT_NEAR(s.beta(2) - s.beta(1), (0.02 - 1e-4) / 999, 1e-15);
}

TEST(LinearSchedule, AlphaBarIsRunningProduct) {
  const auto s = linear_schedule(1000, 1e-4, 0.02);
  double p = 1.0;
  for (std::size_t t = 1; t <= 1000; ++t) {
    p *= 1.0 - s.beta(t);
    ASSERT_EQ(s.alpha_bar(t), p) << "t=" << t;
    ASSERT_EQ(s.alpha(t), 1.0 - s.beta(t));
  }
  // Reference value of the standard linear schedule.
  EXPECT_NEAR(s.alpha_bar(1000), 4.0358e-5, 1e-8);
}

TEST(LinearSchedule, RejectsBadArguments) {
  EXPECT_THROW(linear_schedule(0, 1e-4, 0.02), ContractError);
  EXPECT_THROW(linear_schedule(10, 0.0, 0.02), ContractError);
  EXPECT_THROW(linear_schedule(10, 0.03, 0.02), ContractError);
  EXPECT_THROW(linear_schedule(10, 1e-4, 1.0), ContractError);
  EXPECT_THROW(NoiseSchedule(std::vector<double>{0.1, 1.0}), ContractError);
  EXPECT_THROW(linear_schedule(10, 1e-4, 0.02).beta(0), ContractError);
  EXPECT_THROW(linear_schedule(10, 1e-4, 0.02).beta(11), ContractError);
}

TEST(Respace, ProductOfAlphasReachesFinalAlphaBar) {
  const auto base = linear_schedule(1000, 1e-4, 0.02);
  for (std::size_t k : {1u, 7u, 60u, 250u, 1000u}) {
    const auto r = respace(base, k);
    double p = 1.0;
    for (std::size_t i = 1; i <= r.steps(); ++i) p *= 1.0 - r.beta(i);
    EXPECT_NEAR(p, base.alpha_bar(1000), 1e-12) << "K=" << k;
    EXPECT_EQ(r.timestep(r.steps()), 1000u);
  }
}

TEST(Respace, FullLengthReproducesBetas) {
  const auto base = linear_schedule(1000, 1e-4, 0.02);
  const auto r = respace(base, 1000);
  for (std::size_t t = 1; t <= 1000; ++t) {
    ASSERT_EQ(r.timestep(t), t);
    ASSERT_NEAR(r.beta(t), base.beta(t), 1e-12);
  }
}

TEST(Respace, SixtyStepGrid) {
  const auto r = respace(linear_schedule(1000, 1e-4, 0.02), 60);
  EXPECT_EQ(r.timestep(1), 17u);
  EXPECT_EQ(r.timestep(30), 500u);
  EXPECT_EQ(r.timestep(60), 1000u);
  for (std::size_t k = 2; k <= 60; ++k) EXPECT_GT(r.timestep(k), r.timestep(k - 1));
  // alpha_bar on the grid is the base alpha_bar at the chosen steps
  EXPECT_EQ(r.alpha_bar(30), linear_schedule(1000, 1e-4, 0.02).alpha_bar(500));
  // the first step removes all remaining noise: beta'_1 = 1 - alpha_bar(t_1)
  EXPECT_NEAR(r.beta(1), 1.0 - r.alpha_bar(1), 1e-15);
}

TEST(Respace, RejectsBadCounts) {
  const auto base = linear_schedule(100, 1e-4, 0.02);
  EXPECT_THROW(respace(base, 0), ContractError);
  EXPECT_THROW(respace(base, 101), ContractError);
  EXPECT_THROW(RespacedSchedule(base, {3, 3}), ContractError);
}
