#include "checks/checks.hpp"

#include <gtest/gtest.h>

using namespace occlip;
using checks::MatD;
using checks::VarD;

TEST(Oracle, RandomTinyInstancesMatchReference)
{
    const auto r = checks::oracle_equivalence(60, 11);
    EXPECT_TRUE(r.passed) << r.detail;
}

TEST(Oracle, KeySoftmaxAndMultiHeadAlsoMatch)
{
    // a second stream so both attention modes and both head counts show up often
    const auto r = checks::oracle_equivalence(50, 12345);
    EXPECT_TRUE(r.passed) << r.detail;
}

namespace {

struct FixedBinding {
    nn::ParameterSet<double> params;
    BindingModule<double> module;

    FixedBinding(BindingConfig cfg, int d_obj, int width, double scale)
    {
        nn::Initializer init(3);
        module = BindingModule<double>(params, init, cfg, d_obj, width);
        // small deterministic weights
        int k = 0;
        for (auto& p : params.entries()) {
            auto& v = p.var.mutable_value();
            for (ag::Index i = 0; i < v.size(); ++i) v.data()[i] = scale * std::sin(0.7 * ++k);
        }
    }
};

}  // namespace

TEST(Binding, SingleQueryWithoutDefaultsSumsAllValues)
{
    BindingConfig cfg;
    cfg.d_bind = 4;
    cfg.num_default_tokens = 0;
    cfg.pre_self_attn_layers = 1;
    cfg.pre_self_attn_heads = 2;
    FixedBinding b(cfg, 4, 3, 0.3);
    std::mt19937_64 rng(1);
    const MatD patches = checks::random_matrix(rng, 5, 3);
    PatchGrid<double> grid{VarD(patches), 1, 5, 0};
    const auto s = bind(b.module, VarD(checks::random_matrix(rng, 1, 4)), grid);
    const auto kv = b.module.keys_values(VarD(patches), 1, 5);
    const MatD sum = kv.values.value().colwise().sum();
    EXPECT_LT((s.slots.row(0) - sum.row(0)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((s.attention.array() - 1.0).abs().maxCoeff(), 1e-12);
    EXPECT_EQ(s.default_slots.rows(), 0);
}

TEST(Binding, TwoNodesOneDefaultThreePatchesMatchesReference)
{
    BindingConfig cfg;
    cfg.d_bind = 4;
    cfg.num_default_tokens = 1;
    cfg.pre_self_attn_layers = 2;
    cfg.pre_self_attn_heads = 2;
    FixedBinding b(cfg, 4, 3, 0.25);
    MatD nodes(2, 4), patches(3, 3);
    nodes << 0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8;
    patches << 0.2, 0.1, -0.3, 0.5, -0.4, 0.0, -0.1, 0.9, 0.3;
    PatchGrid<double> grid{VarD(patches), 1, 3, 0};
    const auto s = bind(b.module, VarD(nodes), grid);
    const auto expected = ref::bind(checks::to_ref(nodes), checks::to_ref(patches), checks::to_ref(b.params),
                                    ref::BindingSpec{2, 2, 1, true});
    EXPECT_LT(checks::max_abs_diff(s.slots, expected.slots), 1e-12);
    EXPECT_LT(checks::max_abs_diff(s.default_slots, expected.defaults), 1e-12);
    for (ag::Index c = 0; c < 3; ++c) EXPECT_NEAR(s.attention.col(c).sum(), 1.0, 1e-12);
}

TEST(Binding, AttentionMapReshapesRealQueries)
{
    SlotSet s;
    s.slots = MatD::Zero(2, 3);
    s.default_slots = MatD::Zero(1, 3);
    s.attention = MatD::Constant(3, 6, 1.0 / 3.0);
    const auto maps = attention_map(s, 2, 3);
    ASSERT_EQ(maps.size(), 2u);
    EXPECT_EQ(maps[0].rows(), 2);
    EXPECT_EQ(maps[0].cols(), 3);
    EXPECT_NEAR(maps[1](1, 2), 1.0 / 3.0, 1e-15);
    try {
        attention_map(s, 4, 2);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
    }
}

TEST(Binding, SingleNodeNoDefaultsGivesAllOnesHeatmap)
{
    BindingConfig cfg;
    cfg.d_bind = 4;
    cfg.num_default_tokens = 0;
    cfg.pre_self_attn_layers = 0;
    FixedBinding b(cfg, 4, 2, 0.5);
    std::mt19937_64 rng(2);
    PatchGrid<double> grid{VarD(checks::random_matrix(rng, 4, 2)), 2, 2, 0};
    const auto maps = attention_map(bind(b.module, VarD(checks::random_matrix(rng, 1, 4)), grid), 2, 2);
    EXPECT_LT((maps[0].array() - 1.0).abs().maxCoeff(), 1e-12);
}

// ---------------------------------------------------------------------------

TEST(Scoring, ObjectScoreCosines)
{
    MatD n(3, 2), s(3, 2);
    n << 1, 0, 0, 1, 3, 4;
    s << 2, 0, 1, 0, 3, 4;
    const auto c = object_score(n, s);
    EXPECT_NEAR(c[0], 1.0, 1e-15);
    EXPECT_NEAR(c[1], 0.0, 1e-15);
    EXPECT_NEAR(c[2], 1.0, 1e-15);
    MatD z = MatD::Zero(1, 2);
    EXPECT_THROW(object_score(z, z), Error);
    EXPECT_THROW(object_score(n, z), Error);
}

TEST(Scoring, ObjectScoreMatchesReferenceCosine)
{
    std::mt19937_64 rng(5);
    for (int t = 0; t < 20; ++t) {
        const MatD a = checks::random_matrix(rng, 1, 64), b = checks::random_matrix(rng, 1, 64);
        EXPECT_NEAR(object_score(a, b)[0], ref::cosine(checks::to_ref(a)[0], checks::to_ref(b)[0]), 1e-12);
    }
}

namespace {

// Relation MLPs reduced to constants: f_s outputs `out`, f_o outputs 0.
struct ConstantRelation {
    nn::ParameterSet<double> params;
    RelationScorer<double> scorer;

    ConstantRelation(const MatD& out, int d_bind, MixCoefficients coeffs = {})
    {
        nn::Initializer init(0);
        scorer = RelationScorer<double>(params, init, static_cast<int>(out.cols()), d_bind, coeffs);
        for (auto& p : params.entries()) {
            if (p.name.rfind("score.f_", 0) == 0) p.var.mutable_value().setZero();
        }
        params.find("score.f_s.fc2.bias")->var.mutable_value() = out;
    }
};

}  // namespace

TEST(Scoring, RelationScoreExtremes)
{
    MatD r(1, 2);
    r << 0.6, 0.8;
    const MatD slot = MatD::Ones(1, 3);
    ConstantRelation same(r, 3);
    EXPECT_NEAR(same.scorer.relation_scores(VarD(r), VarD(slot), VarD(slot)).item(), 1.0, 1e-12);
    ConstantRelation opposite(-r, 3);
    EXPECT_NEAR(opposite.scorer.relation_scores(VarD(r), VarD(slot), VarD(slot)).item(), -1.0, 1e-12);
    ConstantRelation zero(MatD::Zero(1, 2), 3);
    EXPECT_EQ(zero.scorer.relation_scores(VarD(r), VarD(slot), VarD(slot)).item(), 0.0);
    EXPECT_EQ(zero.scorer.zero_norm_count(), 1u);
}

TEST(Scoring, WorkedExampleTwoNodesOneEdge)
{
    // object cosines 0.8 and 0.6, relation score 0.5, alpha 1.5, beta 0.5
    MatD rel_out(1, 2);
    rel_out << 0.5, std::sqrt(3.0) / 2.0;
    ConstantRelation c(rel_out, 2, {1.5, 0.5});
    MatD nodes(2, 2), slots(2, 2), r(1, 2);
    nodes << 1, 0, 1, 0;
    slots << 0.8, 0.6, 0.6, 0.8;
    r << 1, 0;
    const auto b = structured_score(c.scorer, nodes, r, {{0, 1, 0}}, slots);
    EXPECT_NEAR(b.object_scores[0], 0.8, 1e-12);
    EXPECT_NEAR(b.object_scores[1], 0.6, 1e-12);
    EXPECT_NEAR(b.relation_scores[0], 0.5, 1e-12);
    EXPECT_NEAR(b.total, 2.35 / 3.5, 1e-12);
}

TEST(Scoring, NoEdgesGivesMeanObjectCosineForAnyAlpha)
{
    for (double alpha : {0.1, 1.5, 7.0}) {
        ConstantRelation c(MatD::Ones(1, 2), 2, {alpha, 0.5});
        MatD nodes(2, 2), slots(2, 2);
        nodes << 1, 0, 0, 1;
        slots << 1, 0, 1, 0;
        EXPECT_NEAR(structured_score(c.scorer, nodes, MatD::Zero(1, 2), {}, slots).total, 0.5, 1e-12);
    }
    ConstantRelation c(MatD::Ones(1, 2), 2);
    MatD n(1, 2);
    n << 0.3, -0.2;
    EXPECT_NEAR(structured_score(c.scorer, n, MatD::Zero(1, 2), {}, n).total, 1.0, 1e-12);
}

TEST(Scoring, RelationScoreIsNotSymmetricInGeneral)
{
    std::mt19937_64 rng(9);
    nn::ParameterSet<double> params;
    nn::Initializer init(9);
    RelationScorer<double> s(params, init, 4, 6);
    bool witness = false;
    for (int t = 0; t < 10 && !witness; ++t) {
        const VarD r(checks::random_matrix(rng, 1, 4)), a(checks::random_matrix(rng, 1, 6)), b(checks::random_matrix(rng, 1, 6));
        witness = std::abs(s.relation_scores(r, a, b).item() - s.relation_scores(r, b, a).item()) > 1e-6;
    }
    EXPECT_TRUE(witness);
}

TEST(Scoring, BreakdownJsonRoundTrip)
{
    ScoreBreakdown b{{0.5, -0.25}, {0.125}, 1.5, 0.5, 0.3};
    const auto back = ScoreBreakdown::from_json(b.to_json());
    EXPECT_EQ(back.object_scores, b.object_scores);
    EXPECT_EQ(back.relation_scores, b.relation_scores);
    EXPECT_EQ(back.total, b.total);
}

TEST(Scoring, MixCoefficientsStartAtConfiguredValues)
{
    nn::ParameterSet<double> params;
    nn::Initializer init(0);
    RelationScorer<double> s(params, init, 2, 2);
    EXPECT_NEAR(s.coefficients().alpha, 1.5, 1e-12);
    EXPECT_NEAR(s.coefficients().beta, 0.5, 1e-12);
    EXPECT_NEAR(inverse_softplus(std::log1p(std::exp(0.3))), 0.3, 1e-12);
}
