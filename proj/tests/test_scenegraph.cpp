#include "occlip/errors.hpp"
#include "occlip/llm_client.hpp"
#include "occlip/scenegraph.hpp"
#include "occlip/tokenizer.hpp"
#include "occlip/world.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace occlip;
using nlohmann::json;

namespace {

// Answers with the worked example embedded in the prompt itself.
std::string example_answer(const std::string& prompt)
{
    const auto a = prompt.find("[ANS]", prompt.find("Output:"));
    const auto b = prompt.find("[/ANS]", a);
    return prompt.substr(a, b + 6 - a);
}

}  // namespace

TEST(LlmParse, PromptExampleRoundTripsThroughMock)
{
    const std::string caption = "A large brown box with a green toy in it";
    const std::string prompt = build_llm_prompt(caption);
    MockTransport echo(std::map<std::string, std::string>{{caption, example_answer(prompt)}});
    const auto r = parse_with_llm(caption, echo);
    ASSERT_TRUE(r.ok());
    const json expected = json::parse(R"({"entities":["large brown box","green toy"],
        "relationships":[{"relationship":"in","subject":1,"object":0}]})");
    EXPECT_EQ(to_graph_json(r.graph()), expected);
    ASSERT_EQ(echo.prompts().size(), 1u);
    EXPECT_EQ(MockTransport::caption_of_prompt(echo.prompts()[0]), caption);
}

TEST(LlmParse, PromptEndsWithCaption)
{
    const auto p = build_llm_prompt("a red circle");
    EXPECT_EQ(p.substr(p.size() - 21), "Caption: a red circle");
    EXPECT_THROW(build_llm_prompt(""), std::invalid_argument);
}

TEST(LlmParse, ExtractionFailuresAreClassified)
{
    EXPECT_EQ(extract_graph_from_llm_response("no answer").failure_reason(), ParseFailure::NoDelimiters);
    EXPECT_EQ(extract_graph_from_llm_response("[ANS]{oops[/ANS]").failure_reason(), ParseFailure::MalformedJson);
    EXPECT_EQ(extract_graph_from_llm_response(R"([ANS]{"entities":[],"relationships":[]}[/ANS])").failure_reason(),
              ParseFailure::EmptyEntities);
    EXPECT_EQ(extract_graph_from_llm_response(
                  R"([ANS]{"entities":["a"],"relationships":[{"relationship":"in","subject":0,"object":3}]}[/ANS])")
                  .failure_reason(),
              ParseFailure::IndexOutOfRange);
    EXPECT_EQ(extract_graph_from_llm_response(
                  R"([ANS]{"entities":["a","b"],"relationships":[{"relationship":"in","subject":1,"object":1}]}[/ANS])")
                  .failure_reason(),
              ParseFailure::SelfLoop);
}

TEST(LlmParse, TakesFirstAnswerSpan)
{
    const auto r = extract_graph_from_llm_response(
        R"(chatter [ANS]{"entities":["x"],"relationships":[]}[/ANS] [ANS]{"entities":["y"],"relationships":[]}[/ANS])");
    ASSERT_TRUE(r.ok());
    EXPECT_EQ(r.graph().nodes, std::vector<std::string>{"x"});
}

TEST(LlmParse, FuzzedResponsesNeverThrow)
{
    std::mt19937_64 rng(99);
    const std::string good = R"([ANS]{"entities":["large brown box","green toy"],"relationships":[{"relationship":"in","subject":1,"object":0}]}[/ANS])";
    const std::string alphabet = "[]{}\",:ANS/0123456789-.e entitiesrelationshipsubjectobject\n\\\x01\xff";
    std::uniform_int_distribution<int> pick(0, static_cast<int>(alphabet.size()) - 1);
    int parsed = 0;
    for (int t = 0; t < 5000; ++t) {
        std::string s = good;
        const int edits = std::uniform_int_distribution<int>(1, 8)(rng);
        for (int e = 0; e < edits; ++e) {
            const auto pos = std::uniform_int_distribution<std::size_t>(0, s.size())(rng);
            switch (rng() % 3) {
            case 0: s.insert(pos, 1, alphabet[pick(rng)]); break;
            case 1: if (pos < s.size()) s.erase(pos, 1); break;
            default: if (pos < s.size()) s[pos] = alphabet[pick(rng)]; break;
            }
        }
        if (t % 7 == 0) s = s.substr(0, rng() % (s.size() + 1));
        ParseResult r = ParseResult::failure(ParseFailure::NoDelimiters);
        ASSERT_NO_THROW(r = extract_graph_from_llm_response(s)) << s;
        if (r.ok()) {
            ++parsed;
            EXPECT_NO_THROW(validate(r.graph()));
        }
    }
    EXPECT_GT(parsed, 0);
}

TEST(GraphJson, StrictDecode)
{
    EXPECT_THROW(from_graph_json(json::parse(R"({"entities":["a"]})")), Error);
    EXPECT_THROW(from_graph_json(json::parse(R"({"entities":[1],"relationships":[]})")), Error);
    EXPECT_THROW(from_graph_json(json::parse(
                     R"({"entities":["a","b"],"relationships":[{"relationship":"in","subject":0.5,"object":1}]})")),
                 Error);
    const SceneGraph g{{"red circle", "blue square"}, {{"above", 0, 1}}};
    EXPECT_EQ(from_graph_json(to_graph_json(g)), g);
}

TEST(TemplateParse, EveryWorldCaptionRoundTrips)
{
    WorldVocab vocab;
    for (Task task : {Task::attribute_binding, Task::spatial_relation}) {
        const auto s = build_splits(vocab, SplitSpec{1.0, 1.0, task, 0});
        for (const auto& t : s.train) {
            const auto g = parse_template_caption(t.caption, vocab);
            EXPECT_EQ(g, t.graph);
            EXPECT_NO_THROW(validate(g));
        }
    }
}

TEST(TemplateParse, BackgroundIsLastNodeWithInEdges)
{
    WorldVocab vocab;
    Scene s;
    s.background = 1;
    s.objects = {PlacedObject{0, 0, 0.25, 0.5}, PlacedObject{1, 2, 0.75, 0.5}};
    s.mention_background = true;
    const auto g = graph_of(s, vocab);
    ASSERT_EQ(g.nodes.size(), 3u);
    EXPECT_EQ(g.nodes[0], "red circle");
    EXPECT_EQ(g.nodes[1], "blue square");
    EXPECT_EQ(g.nodes[2], "black background");
    ASSERT_EQ(g.edges.size(), 2u);
    for (int i = 0; i < 2; ++i) {
        EXPECT_EQ(g.edges[i].subject, i);
        EXPECT_EQ(g.edges[i].object, 2);
    }
}

TEST(TemplateParse, UnknownCaptionRejected)
{
    WorldVocab vocab;
    try {
        parse_template_caption("a photograph of nothing in particular", vocab);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::UnrecognizedTemplate);
    }
}

TEST(Perturbations, SwapReversesEveryEdge)
{
    const SceneGraph g{{"a", "b", "c"}, {{"left of", 0, 1}, {"above", 2, 0}}};
    const auto s = swap_graph(g);
    EXPECT_EQ(s.nodes, g.nodes);
    EXPECT_EQ(s.edges[0], (Edge{"left of", 1, 0}));
    EXPECT_EQ(s.edges[1], (Edge{"above", 0, 2}));
    EXPECT_EQ(swap_graph(s), g);
    try {
        swap_graph(SceneGraph{{"a"}, {}});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NoEdges);
    }
}

TEST(Perturbations, ShuffleAvoidsOriginalAndSwap)
{
    const SceneGraph g{{"a", "b", "c"}, {{"left of", 0, 1}}};
    EXPECT_TRUE(shuffle_possible(g));
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const auto s = shuffle_graph(g, seed);
        EXPECT_NE(s, g);
        EXPECT_NE(s, swap_graph(g));
        EXPECT_NO_THROW(validate(s));
        EXPECT_EQ(s, shuffle_graph(g, seed));
    }
}

TEST(Perturbations, ShuffleDegenerateCases)
{
    const SceneGraph two{{"a", "b"}, {{"in", 0, 1}}};
    EXPECT_FALSE(shuffle_possible(two));
    try {
        shuffle_graph(two, 0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Degenerate);
    }
    EXPECT_FALSE(shuffle_possible(SceneGraph{{"a", "b"}, {}}));
    EXPECT_THROW(shuffle_graph(SceneGraph{{"a", "b"}, {}}, 0), Error);
}

TEST(GraphValidation, RejectsBadGraphs)
{
    EXPECT_THROW(validate(SceneGraph{}), Error);
    EXPECT_THROW(validate(SceneGraph{{"a", ""}, {}}), Error);
    EXPECT_THROW(validate(SceneGraph{{"a"}, {{"in", 0, 0}}}), Error);
    EXPECT_THROW(validate(SceneGraph{{"a", "b"}, {{"in", 0, 2}}}), Error);
    EXPECT_NO_THROW(validate(SceneGraph{{"a", "b"}, {{"in", 1, 0}}}));
}

TEST(GraphStats, CountsAndLengths)
{
    WorldVocab vocab;
    const auto tok = Tokenizer::for_world(vocab);
    const std::vector<SceneGraph> graphs{{{"red circle", "blue square"}, {{"above", 0, 1}}}, {{"red circle"}, {}}};
    const auto s = graph_stats(graphs, tok);
    EXPECT_EQ(s.entity_count("red circle"), 2u);
    EXPECT_EQ(s.entity_count("blue square"), 1u);
    EXPECT_EQ(s.relation_count("above"), 1u);
    EXPECT_EQ(s.entity_counts.front().first, "red circle");
    EXPECT_TRUE(graph_stats(std::vector<SceneGraph>{}, tok).empty());
}
