#include "occlip/gradcheck.hpp"

#include <gtest/gtest.h>

using namespace occlip;

TEST(GradCheck, RelativeErrorFloor)
{
    EXPECT_EQ(relative_error(0.0, 0.0), 0.0);
    EXPECT_NEAR(relative_error(1e-9, 0.0), 1e-3, 1e-15);
    EXPECT_NEAR(relative_error(1.0, 3.0), 0.5, 1e-15);
}

TEST(GradCheck, DetectsAWrongGradient)
{
    // y = x^2 with backward scaled by 1 (correct) vs the same leaf fed through
    // a stop-gradient copy (gradient missing)
    ag::Var<double> x(ag::Matrix<double>::Constant(1, 2, 0.7), true);
    const auto good = check_gradients("square", {{"x", x}}, [&] { return ag::sum(ag::mul(x, x)); });
    EXPECT_TRUE(good.passed);
    EXPECT_EQ(good.checked, 2u);
    const auto bad = check_gradients("detached", {{"x", x}}, [&] {
        ag::Var<double> copy(x.value());
        return ag::sum(ag::mul(x, copy));
    });
    EXPECT_FALSE(bad.passed);
}

TEST(GradCheck, FullSuitePassesQuickly)
{
    const auto r = run_gradient_suite(0);
    for (const auto& c : r.results) EXPECT_TRUE(c.passed) << c.name << " " << c.max_rel_error << " at " << c.worst_entry;
    EXPECT_GE(r.results.size(), 9u);
    EXPECT_LT(r.seconds, 120.0);
}
