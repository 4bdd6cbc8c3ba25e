#include "damd/grad_check.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace damd;

TEST(GradCheck, AgreesOnSmoothFunction)
{
    Tensor<double> x(Shape{4}, std::vector<double>{0.3, -1.2, 2.0, 0.7});
    const auto r = finite_diff_check([&] { return sum(mul(sigmoid(x), square(x))); }, x, 1e-5);
    EXPECT_TRUE(r.passed(1e-8));
    EXPECT_EQ(r.checked, 4u);
    EXPECT_EQ(r.skipped, 0u);
}

TEST(GradCheck, DetectsAWrongGradient)
{
    // detach() hides one factor from the tape: analytic x, true derivative 2x,
    // so the error is |x| / max(1, |x|) = 1 for these points
    Tensor<double> x(Shape{3}, std::vector<double>{1.0, 2.0, -3.0});
    const auto r = finite_diff_check([&] { return sum(mul(x, x.detach())); }, x, 1e-5);
    EXPECT_FALSE(r.passed(1e-3));
    EXPECT_NEAR(r.max_rel_error, 1.0, 1e-6);
}

TEST(GradCheck, SkipsProbesThatStraddleAKink)
{
    Tensor<double> x(Shape{3}, std::vector<double>{0.0, 1.0, -1.0});
    const auto r = finite_diff_check([&] { return sum(relu(x)); }, x, 1e-4);
    EXPECT_EQ(r.skipped, 1u);
    EXPECT_EQ(r.checked, 2u);
    EXPECT_TRUE(r.passed(1e-8));
}

TEST(GradCheck, WingThresholdCrossingIsSkipped)
{
    Tensor<double> x(Shape{2}, std::vector<double>{10.0, 4.0});
    const auto r = finite_diff_check([&] { return sum(wing(x, 10.0, 2.0)); }, x, 1e-4);
    EXPECT_EQ(r.skipped, 1u);
    EXPECT_TRUE(r.passed(1e-7));
}

TEST(GradCheck, NonFiniteLossFails)
{
    Tensor<double> x(Shape{2}, std::vector<double>{-1.0, 1.0});
    const auto r = finite_diff_check([&] { return sum(rsqrt(x, 0.0)); }, x, 1e-5);
    EXPECT_FALSE(r.finite);
    EXPECT_FALSE(r.passed(1.0));
}

TEST(GradCheck, MaxCoordsLimitsProbes)
{
    Tensor<double> x(Shape{100}, 0.5);
    const auto r = finite_diff_check([&] { return sum(square(x)); }, x, 1e-5, 10);
    EXPECT_EQ(r.checked, 10u);
}
