#include "checks/checks.hpp"

#include <gtest/gtest.h>

using namespace occlip;
using checks::MatD;
using checks::VarD;

namespace {

VarD scalar(double s)
{
    return VarD(MatD::Constant(1, 1, s));
}

}  // namespace

TEST(Losses, ContrastiveMatchesReference)
{
    std::mt19937_64 rng(21);
    for (int t = 0; t < 40; ++t) {
        const int b = checks::uniform(rng, 1, 9);
        const double s = std::uniform_real_distribution<double>(0.5, 30.0)(rng);
        const MatD scores = checks::random_matrix(rng, b, b, 0.5).array().tanh();
        EXPECT_NEAR(itc_loss(VarD(scores), scalar(s)).item(), ref::itc_loss(checks::to_ref(scores), s), 1e-9);
    }
}

TEST(Losses, ContrastiveUniformScoresGiveTwoLogB)
{
    for (int b : {2, 5, 16}) EXPECT_NEAR(itc_loss(VarD(MatD::Constant(b, b, 0.3)), scalar(10.0)).item(), 2 * std::log(b), 1e-12);
}

TEST(Losses, ContrastiveUsesRowsAndColumns)
{
    // asymmetric matrix: transposing it must not change the loss
    MatD s(3, 3);
    s << 0.9, 0.1, -0.4, 0.6, 0.2, 0.0, -0.3, 0.8, 0.5;
    const double a = itc_loss(VarD(s), scalar(5.0)).item();
    const double b = itc_loss(VarD(MatD(s.transpose())), scalar(5.0)).item();
    EXPECT_NEAR(a, b, 1e-12);
}

TEST(Losses, LocalLossMatchesReferenceForMixedKinds)
{
    std::mt19937_64 rng(22);
    for (int t = 0; t < 40; ++t) {
        const int b = checks::uniform(rng, 1, 8);
        const double s = std::uniform_real_distribution<double>(1.0, 20.0)(rng);
        const MatD scores = checks::random_matrix(rng, b, 3, 0.5).array().tanh();
        std::vector<LocalKind> kinds;
        double sum = 0;
        int n = 0;
        for (int i = 0; i < b; ++i) {
            const auto k = static_cast<LocalKind>(checks::uniform(rng, 0, 2));
            kinds.push_back(k);
            if (k == LocalKind::three_way) sum += ref::local_term({scores(i, 0), scores(i, 1), scores(i, 2)}, s);
            if (k == LocalKind::two_way) sum += ref::local_term({scores(i, 0), scores(i, 1)}, s);
            if (k != LocalKind::skipped) ++n;
        }
        const double expected = n ? sum / n : 0.0;
        EXPECT_NEAR(rel_local_loss(VarD(scores), kinds, scalar(s)).item(), expected, 1e-9);
    }
}

TEST(Losses, LocalLossAllSkippedIsZero)
{
    const std::vector<LocalKind> kinds(3, LocalKind::skipped);
    EXPECT_EQ(rel_local_loss(VarD(MatD::Ones(3, 3)), kinds, scalar(10.0)).item(), 0.0);
}

TEST(Losses, LocalLossTwoWayWithEqualScoresIsLogTwo)
{
    MatD s(1, 3);
    s << 0.4, 0.4, -0.9;
    EXPECT_NEAR(rel_local_loss(VarD(s), {LocalKind::two_way}, scalar(7.0)).item(), std::log(2.0), 1e-12);
    EXPECT_NEAR(rel_local_loss(VarD(s), {LocalKind::three_way}, scalar(7.0)).item(),
                ref::local_term({0.4, 0.4, -0.9}, 7.0), 1e-12);
}

TEST(Losses, ConfigJsonRoundTrip)
{
    LossConfig c;
    c.use_local_loss = false;
    c.local_negatives = LocalNegatives::swap_only;
    c.logit_scale_init = 4.0;
    const auto back = LossConfig::from_json(c.to_json());
    EXPECT_EQ(back.use_local_loss, false);
    EXPECT_EQ(back.local_negatives, LocalNegatives::swap_only);
    EXPECT_EQ(back.logit_scale_init, 4.0);
}
