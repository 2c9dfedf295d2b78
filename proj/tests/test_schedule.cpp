#include "tif/schedule.hpp"

#include <gtest/gtest.h>

namespace {

TEST(Schedule, TwoStepExample) {
  const tif::Schedule s({0.5, 0.5});
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.5);
  EXPECT_DOUBLE_EQ(s.alpha_bar(2), 0.25);
  // mpmath: sqrt(ab) / (2 sqrt(2 (1 - ab)))
  EXPECT_NEAR(s.gamma(1), 0.3535533905932737622, 1e-15);
  EXPECT_NEAR(s.gamma(2), 0.20412414523193150818, 1e-15);
}

TEST(Schedule, DefaultLinear) {
  const auto s = tif::default_schedule();
  EXPECT_EQ(s.T(), 1000);
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_NEAR(s.beta(1000), 0.02, 1e-15);
  EXPECT_NEAR(s.alpha_bar(1), 1.0 - 1e-4, 1e-15);
  for (int t = 2; t <= s.T(); ++t) {
    ASSERT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    ASSERT_LT(s.gamma(t), s.gamma(t - 1));
  }
  EXPECT_LT(s.alpha_bar(1000), 1e-4);
  EXPECT_GT(s.alpha_bar(1000), 0.0);
}

TEST(Schedule, RejectsBadInput) {
  EXPECT_THROW(tif::Schedule({0.5}), std::invalid_argument);
  EXPECT_THROW(tif::Schedule({0.5, 1.0}), std::invalid_argument);
  EXPECT_THROW(tif::Schedule({0.0, 0.1}), std::invalid_argument);
  EXPECT_THROW(tif::make_linear_schedule(10, 0.2, 0.1), std::invalid_argument);
  const auto s = tif::default_schedule();
  EXPECT_THROW((void)s.gamma(0), std::out_of_range);
  EXPECT_THROW((void)s.gamma(1001), std::out_of_range);
}

TEST(Schedule, ForwardSample) {
  const tif::Schedule s({0.5, 0.5});
  tif::Image x0(tif::Shape{1, 1, 2});
  x0[0] = 1.0f;
  x0[1] = -1.0f;
  tif::Image noise(x0.shape());
  noise[0] = 2.0f;
  noise[1] = 0.0f;
  const auto xt = tif::forward_sample(s, x0, 2, noise);
  EXPECT_NEAR(xt[0], 0.5 + std::sqrt(0.75) * 2.0, 1e-6);
  EXPECT_NEAR(xt[1], -0.5, 1e-6);
}

TEST(Schedule, EvenGrid) {
  const auto s = tif::default_schedule();
  const auto g = tif::even_grid(s, 20);
  ASSERT_EQ(g.size(), 20u);
  EXPECT_EQ(g.front(), 1);
  EXPECT_EQ(g.back(), 1000);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_GT(g[i], g[i - 1]);
  EXPECT_EQ(tif::even_grid(s, 1000).back(), 1000);
  EXPECT_THROW(tif::even_grid(s, 0), std::invalid_argument);
}

}  // namespace
