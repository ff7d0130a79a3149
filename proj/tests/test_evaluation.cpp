#include "occlip/errors.hpp"
#include "occlip/evaluation.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <random>
#include <filesystem>
#include <fstream>

using namespace occlip;
namespace fs = std::filesystem;

namespace {

// Scores an image by its top-left red value against the number of words in
// the caption; enough structure to make outcomes predictable.
class FakeScorer : public Scorer {
public:
    Matrix<double> score_matrix(const std::vector<Image>& images, const std::vector<TextQuery>& texts) const override
    {
        Matrix<double> m(static_cast<Index>(images.size()), static_cast<Index>(texts.size()));
        for (std::size_t j = 0; j < images.size(); ++j)
            for (std::size_t i = 0; i < texts.size(); ++i) m(j, i) = score(images[j], texts[i]);
        return m;
    }
    std::vector<double> score_pairs(const std::vector<Image>& images, const std::vector<TextQuery>& texts) const override
    {
        std::vector<double> out;
        for (std::size_t j = 0; j < images.size(); ++j) out.push_back(score(images[j], texts[j]));
        return out;
    }

    std::function<double(const Image&, const TextQuery&)> score;
};

fs::path scratch(const std::string& name)
{
    auto p = fs::temp_directory_path() / ("occlip_eval_" + name);
    fs::remove_all(p);
    return p;
}

SweepGrid small_grid()
{
    return SweepGrid{{0.4, 1.0}, {0.0, 0.3}, {ModelKind::occlip, ModelKind::clip_baseline}, {0, 1}};
}

EvalReport fake_report(const SweepCell& c)
{
    EvalReport r;
    const double acc = c.model == ModelKind::occlip ? 0.5 + 0.4 * c.pair_fraction : 0.5;
    r.splits["seen_pairs"] = SplitAccuracy{static_cast<std::size_t>(acc * 100 + c.seed), 100,
                                           (acc * 100 + c.seed) / 100.0, {}};
    return r;
}

}  // namespace

TEST(Retrieval, TiesCountAsWrong)
{
    EXPECT_TRUE(retrieval_correct(0.5, 0.4));
    EXPECT_FALSE(retrieval_correct(0.4, 0.4));
    EXPECT_FALSE(retrieval_correct(0.3, 0.4));
    const auto a = accuracy_from_scores({1.0, 0.2, 0.5, 0.0}, {0.0, 0.2, 0.6, -1.0});
    EXPECT_EQ(a.correct, 2u);
    EXPECT_EQ(a.total, 4u);
    EXPECT_DOUBLE_EQ(a.accuracy, 0.5);
    ASSERT_EQ(a.margins.size(), 4u);
    EXPECT_DOUBLE_EQ(a.margins[2], -0.1);
    EXPECT_THROW(accuracy_from_scores({1.0}, {}), Error);
}

TEST(Retrieval, RandomSignScorerSitsAtHalf)
{
    std::mt19937_64 rng(17);
    std::bernoulli_distribution coin(0.5);
    std::vector<double> pos, neg;
    for (int i = 0; i < 10000; ++i) {
        pos.push_back(coin(rng) ? 1.0 : -1.0);
        neg.push_back(-pos.back());
    }
    // 3 sigma of a fair binomial over 10k items
    EXPECT_NEAR(accuracy_from_scores(pos, neg).accuracy, 0.5, 0.015);
}

TEST(Retrieval, BinaryAccuracyOnRenderedScenes)
{
    WorldVocab vocab;
    const auto s = build_splits(vocab, SplitSpec{0.4, 0.0, Task::spatial_relation, 0});
    FakeScorer scorer;
    // prefers the caption whose first object is left of / above the second,
    // which is the positive for subject_first relations
    scorer.score = [&](const Image&, const TextQuery& q) {
        return q.caption.size() % 2 ? 1.0 : 0.0;
    };
    const auto items = s.eval_with_tag(SplitTag::unseen_order);
    ASSERT_FALSE(items.empty());
    const auto a = binary_retrieval_accuracy(scorer, items, vocab, 16, 5);
    EXPECT_EQ(a.total, items.size());
    std::size_t expected = 0;
    for (const auto& e : items)
        expected += (e.positive_caption.size() % 2 ? 1.0 : 0.0) > (e.negative_caption.size() % 2 ? 1.0 : 0.0);
    EXPECT_EQ(a.correct, expected);
    EXPECT_THROW(binary_retrieval_accuracy(scorer, {}, vocab, 16), Error);
}

TEST(ZeroShot, ClassQueriesAndArgmax)
{
    const auto q = class_queries({"circle", "square"});
    ASSERT_EQ(q.size(), 2u);
    EXPECT_EQ(q[0].caption, "A photo of a circle");
    ASSERT_EQ(q[1].graph.nodes.size(), 1u);
    EXPECT_EQ(q[1].graph.nodes[0], "square");
    EXPECT_TRUE(q[1].graph.edges.empty());

    FakeScorer scorer;
    scorer.score = [](const Image&, const TextQuery& t) { return t.graph.nodes[0] == "square" ? 0.9 : 0.1; };
    EXPECT_EQ(zero_shot_classify(scorer, Image(4, 4), q), 1u);
    EXPECT_THROW(zero_shot_classify(scorer, Image(4, 4), {}), Error);
    EXPECT_EQ(zero_shot_classify(scorer, Image(4, 4), class_queries({"star"})), 0u);
}

TEST(ZeroShot, PerfectAndChanceScorers)
{
    WorldVocab vocab;
    const auto scenes = single_object_scenes(vocab, false, 7);
    ASSERT_EQ(scenes.size(), vocab.backgrounds.size() * vocab.attributes.size() * vocab.object_classes.size());
    FakeScorer constant;
    constant.score = [](const Image&, const TextQuery&) { return 0.0; };
    const auto a = zero_shot_accuracy(constant, scenes, vocab, 16);
    // every class ties and ties count as wrong
    EXPECT_EQ(a.correct, 0u);
    EXPECT_EQ(a.total, scenes.size());

    // a scorer that sees the class perfectly
    FakeScorer oracle;
    oracle.score = [&](const Image& img, const TextQuery& q) {
        for (const auto& s : scenes)
            if (render(s, vocab, 16) == img) return q.graph.nodes[0] == vocab.object_classes[s.objects[0].object_class] ? 1.0 : 0.0;
        return 0.0;
    };
    EXPECT_DOUBLE_EQ(zero_shot_accuracy(oracle, scenes, vocab, 16).accuracy, 1.0);
}

TEST(Sweep, GridEnumeratesEveryCell)
{
    const auto cells = small_grid().cells();
    EXPECT_EQ(cells.size(), 16u);
    std::set<std::string> keys;
    for (const auto& c : cells) keys.insert(c.key());
    EXPECT_EQ(keys.size(), 16u);
}

TEST(Sweep, ResumesWithoutRerunningFinishedCells)
{
    const auto dir = scratch("resume");
    std::atomic<int> calls{0};
    std::atomic<bool> fail{true};
    CellRunner flaky = [&](const SweepCell& c) {
        ++calls;
        if (fail && c.seed == 1 && c.model == ModelKind::clip_baseline) throw std::runtime_error("interrupted");
        return fake_report(c);
    };
    EXPECT_ANY_THROW(run_sweep(small_grid(), flaky, dir, 1));
    const int first = calls.load();
    EXPECT_GT(first, 0);

    fail = false;
    calls = 0;
    const auto r = run_sweep(small_grid(), flaky, dir, 2);
    EXPECT_LT(calls.load(), 16);
    EXPECT_EQ(r.reports.size(), 16u);

    calls = 0;
    run_sweep(small_grid(), flaky, dir, 1);
    EXPECT_EQ(calls.load(), 0);

    const auto [mean, sd] = r.stats(1.0, 0.0, ModelKind::occlip, "seen_pairs");
    EXPECT_NEAR(mean, 0.905, 1e-12);
    EXPECT_NEAR(sd, 0.005 * std::sqrt(2.0), 1e-9);  // sample std of {0.90, 0.91}
    EXPECT_TRUE(fs::exists(dir / "sweep.json"));
    EXPECT_TRUE(fs::exists(dir / "sweep.csv"));
    int pngs = 0;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".png") ++pngs;
    EXPECT_EQ(pngs, 2);  // one split tag, two models
}

TEST(Sweep, CsvHasOneRowPerModelTagAndCell)
{
    const auto dir = scratch("csv");
    const auto r = run_sweep(small_grid(), fake_report, dir, 1);
    const auto csv = r.to_csv();
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);  // header + 2 models x 4 cells
    EXPECT_EQ(SweepResult{}.to_json().is_object(), true);
}

TEST(Heatmap, SizeGrowsWithGridAndColorsDiffer)
{
    const auto a = render_heatmap({{0.0, 1.0}, {0.5, 0.25}});
    const auto b = render_heatmap({{0.0, 1.0, 0.5}, {0.5, 0.25, 1.0}, {0.1, 0.2, 0.3}});
    EXPECT_GT(a.width, 0);
    EXPECT_GT(b.width, a.width);
    EXPECT_GT(b.height, a.height);
    EXPECT_TRUE(a == render_heatmap({{0.0, 1.0}, {0.5, 0.25}}));
    EXPECT_FALSE(a == render_heatmap({{1.0, 0.0}, {0.5, 0.25}}));
}

TEST(EvalReportJson, RoundTrip)
{
    EvalReport r;
    r.splits["seen_pairs"] = SplitAccuracy{3, 4, 0.75, {0.1, -0.2, 0.3, 0.4}};
    r.zero_shot = SplitAccuracy{1, 8, 0.125, {}};
    r.zero_shot_classes = 8;
    const auto back = EvalReport::from_json(r.to_json());
    EXPECT_EQ(back.splits.at("seen_pairs").correct, 3u);
    EXPECT_EQ(back.splits.at("seen_pairs").margins, r.splits.at("seen_pairs").margins);
    ASSERT_TRUE(back.zero_shot.has_value());
    EXPECT_EQ(back.zero_shot_classes, 8u);
}
