#include "occlip/scenegraph.hpp"

#include "occlip/errors.hpp"
#include "occlip/tokenizer.hpp"

#include <algorithm>
#include <random>
#include <set>

namespace occlip {

namespace {

constexpr std::string_view kContainment = "in";

// The parser instruction block; the caption is appended after "Caption:".
constexpr std::string_view kPromptPreamble = R"(Given a caption, your task is to parse it into its constituent noun phrases and relationships. The noun phrases should represent independent visual objects mentioned in the caption without semantic oversimplification.
For each caption, output the parsed noun phrases (e.g., entities) and relationships in JSON format, placing the dictionary between [ANS] and [/ANS] brackets. In the relationships, use indices to specify the subject and object of the relationship mentioned in the caption. The indices of the subject and object should be integers.
Here are a few examples:
Caption: A large brown box with a green toy in it
Output:
[ANS]
{
  "entities": [
    "large brown box",
    "green toy"
  ],
  "relationships": [
    {
      "relationship": "in",
      "subject": 1,
      "object": 0
    }
  ]
}
[/ANS]

PAY ATTENTION to the following:
- Relationships MUST relate two different entities in the caption and NOT be unary. For example, in the caption 'red suitcases stacked upon each other', 'stacked upon each other' is not considered a relationship.
- Do not forget any relationships.
- Relationships MUST be directed. 'and' is not a relationship.
- Pay attention to spatial relationships like 'behind', 'left of', 'with', 'below', 'next to', etc. 'and' is not a relationship.
- Check the right dependencies when the relationships are not direct. In the caption template a X with a Y in it, it refers to X.
- Pay attention to co-references.

Now, parse the following caption into its constituting entities and relationships. You MUST place the answer between [ANS] and [/ANS] delimiters.
Caption: )";

std::string join(const std::vector<std::string>& words, std::size_t from, std::size_t to)
{
    std::string out;
    for (std::size_t i = from; i < to; ++i) {
        if (!out.empty()) out.push_back(' ');
        out += words[i];
    }
    return out;
}

// Cursor over caption words with vocabulary-phrase matching.
class WordCursor {
public:
    explicit WordCursor(std::vector<std::string> words) : words_(std::move(words)) {}

    bool done() const { return pos_ >= words_.size(); }

    bool accept(std::string_view phrase)
    {
        const auto parts = Tokenizer::split(phrase);
        if (pos_ + parts.size() > words_.size()) return false;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            if (words_[pos_ + i] != parts[i]) return false;
        }
        pos_ += parts.size();
        return true;
    }

    /// Longest vocabulary entry matching at the cursor; -1 if none.
    int accept_one_of(const std::vector<std::string>& options)
    {
        int best = -1;
        std::size_t best_len = 0;
        for (std::size_t i = 0; i < options.size(); ++i) {
            const auto parts = Tokenizer::split(options[i]);
            if (parts.size() <= best_len || pos_ + parts.size() > words_.size()) continue;
            if (std::equal(parts.begin(), parts.end(), words_.begin() + static_cast<std::ptrdiff_t>(pos_))) {
                best = static_cast<int>(i);
                best_len = parts.size();
            }
        }
        pos_ += best_len;
        return best;
    }

    std::size_t pos() const { return pos_; }
    const std::vector<std::string>& words() const { return words_; }

private:
    std::vector<std::string> words_;
    std::size_t pos_ = 0;
};

[[noreturn]] void unrecognized(std::string_view caption)
{
    throw Error(ErrorCode::UnrecognizedTemplate, "caption matches no template: '" + std::string(caption) + "'");
}

// "[attribute] class"; returns the node phrase.
std::string read_object(WordCursor& cur, const WorldVocab& vocab, std::string_view caption)
{
    const std::size_t start = cur.pos();
    cur.accept_one_of(vocab.attributes);
    if (cur.accept_one_of(vocab.object_classes) < 0) unrecognized(caption);
    return join(cur.words(), start, cur.pos());
}

}  // namespace

const char* to_string(ParseFailure failure)
{
    switch (failure) {
    case ParseFailure::NoDelimiters: return "NoDelimiters";
    case ParseFailure::MalformedJson: return "MalformedJson";
    case ParseFailure::IndexOutOfRange: return "IndexOutOfRange";
    case ParseFailure::EmptyEntities: return "EmptyEntities";
    case ParseFailure::SelfLoop: return "SelfLoop";
    }
    return "Unknown";
}

void validate(const SceneGraph& graph)
{
    const auto m = static_cast<int>(graph.nodes.size());
    if (m == 0) throw Error(ErrorCode::InvalidGraph, "scene graph has no nodes");
    for (const auto& n : graph.nodes) {
        if (n.empty()) throw Error(ErrorCode::InvalidGraph, "empty node phrase");
    }
    for (const auto& e : graph.edges) {
        if (e.subject < 0 || e.subject >= m || e.object < 0 || e.object >= m) {
            throw Error(ErrorCode::InvalidGraph, "edge index out of range");
        }
        if (e.subject == e.object) throw Error(ErrorCode::InvalidGraph, "self-loop edge");
    }
}

nlohmann::json to_graph_json(const SceneGraph& graph)
{
    nlohmann::json rels = nlohmann::json::array();
    for (const auto& e : graph.edges) {
        rels.push_back({{"relationship", e.relation}, {"subject", e.subject}, {"object", e.object}});
    }
    return {{"entities", graph.nodes}, {"relationships", std::move(rels)}};
}

namespace {

// Shared decode used by the strict reader and the LLM extractor.
ParseResult decode_graph_json(const nlohmann::json& j)
{
    if (!j.is_object() || !j.contains("entities") || !j.contains("relationships")) {
        return ParseResult::failure(ParseFailure::MalformedJson);
    }
    const auto& ents = j.at("entities");
    const auto& rels = j.at("relationships");
    if (!ents.is_array() || !rels.is_array()) return ParseResult::failure(ParseFailure::MalformedJson);
    SceneGraph g;
    for (const auto& e : ents) {
        if (!e.is_string()) return ParseResult::failure(ParseFailure::MalformedJson);
        g.nodes.push_back(e.get<std::string>());
        if (g.nodes.back().empty()) return ParseResult::failure(ParseFailure::MalformedJson);
    }
    if (g.nodes.empty()) return ParseResult::failure(ParseFailure::EmptyEntities);
    const auto m = static_cast<std::int64_t>(g.nodes.size());
    for (const auto& r : rels) {
        if (!r.is_object() || !r.contains("relationship") || !r.contains("subject") || !r.contains("object")) {
            return ParseResult::failure(ParseFailure::MalformedJson);
        }
        const auto& rel = r.at("relationship");
        const auto& s = r.at("subject");
        const auto& o = r.at("object");
        if (!rel.is_string() || !s.is_number_integer() || !o.is_number_integer()) {
            return ParseResult::failure(ParseFailure::MalformedJson);
        }
        const auto si = s.get<std::int64_t>();
        const auto oi = o.get<std::int64_t>();
        if (si < 0 || si >= m || oi < 0 || oi >= m) return ParseResult::failure(ParseFailure::IndexOutOfRange);
        if (si == oi) return ParseResult::failure(ParseFailure::SelfLoop);
        g.edges.push_back(Edge{rel.get<std::string>(), static_cast<int>(si), static_cast<int>(oi)});
    }
    return ParseResult::success(std::move(g));
}

}  // namespace

SceneGraph from_graph_json(const nlohmann::json& j)
{
    auto r = decode_graph_json(j);
    if (!r.ok()) throw Error(ErrorCode::InvalidGraph, std::string("bad GraphJson: ") + to_string(r.failure_reason()));
    return r.graph();
}

SceneGraph parse_template_caption(std::string_view caption, const WorldVocab& vocab)
{
    WordCursor cur(Tokenizer::split(caption));
    if (!cur.accept("a photo of a")) unrecognized(caption);

    SceneGraph g;
    g.nodes.push_back(read_object(cur, vocab, caption));

    std::optional<std::string> relation;
    if (cur.accept("and a")) {
        g.nodes.push_back(read_object(cur, vocab, caption));
    } else {
        const std::size_t mark = cur.pos();
        const int rel = cur.accept_one_of(vocab.relations);
        if (rel >= 0) {
            if (!cur.accept("a")) unrecognized(caption);
            relation = vocab.relations[static_cast<std::size_t>(rel)];
            g.nodes.push_back(read_object(cur, vocab, caption));
        } else if (cur.pos() != mark) {
            unrecognized(caption);
        }
    }
    if (relation) g.edges.push_back(Edge{*relation, 0, 1});

    if (!cur.done()) {
        if (!cur.accept("in a")) unrecognized(caption);
        const int bg = cur.accept_one_of(vocab.backgrounds);
        if (bg < 0 || !cur.accept("background") || !cur.done()) unrecognized(caption);
        const int objects = static_cast<int>(g.nodes.size());
        g.nodes.push_back(vocab.background_phrase(bg));
        for (int i = 0; i < objects; ++i) g.edges.push_back(Edge{std::string(kContainment), i, objects});
    }
    return g;
}

std::string build_llm_prompt(std::string_view caption)
{
    if (caption.empty()) throw std::invalid_argument("build_llm_prompt: empty caption");
    std::string prompt(kPromptPreamble);
    prompt += caption;
    return prompt;
}

ParseResult extract_graph_from_llm_response(std::string_view response) noexcept
{
    try {
        constexpr std::string_view open = "[ANS]";
        constexpr std::string_view close = "[/ANS]";
        const auto begin = response.find(open);
        if (begin == std::string_view::npos) return ParseResult::failure(ParseFailure::NoDelimiters);
        const auto body_start = begin + open.size();
        const auto end = response.find(close, body_start);
        if (end == std::string_view::npos) return ParseResult::failure(ParseFailure::NoDelimiters);
        const auto body = response.substr(body_start, end - body_start);
        auto j = nlohmann::json::parse(body.begin(), body.end(), nullptr, false);
        if (j.is_discarded()) return ParseResult::failure(ParseFailure::MalformedJson);
        return decode_graph_json(j);
    } catch (...) {
        return ParseResult::failure(ParseFailure::MalformedJson);
    }
}

SceneGraph swap_graph(const SceneGraph& graph)
{
    if (graph.edges.empty()) throw Error(ErrorCode::NoEdges, "swap_graph: graph has no edges");
    SceneGraph out = graph;
    for (auto& e : out.edges) std::swap(e.subject, e.object);
    return out;
}

bool shuffle_possible(const SceneGraph& graph)
{
    const auto m = graph.nodes.size();
    const auto p = graph.edges.size();
    if (p == 0 || m < 2) return false;
    return !(m == 2 && p == 1);
}

SceneGraph shuffle_graph(const SceneGraph& graph, std::uint64_t rng_seed)
{
    if (graph.edges.empty()) throw Error(ErrorCode::NoEdges, "shuffle_graph: graph has no edges");
    if (!shuffle_possible(graph)) {
        throw Error(ErrorCode::Degenerate, "shuffle_graph: only the swapped graph differs (M=2, P=1)");
    }
    const SceneGraph swapped = swap_graph(graph);
    const int m = static_cast<int>(graph.nodes.size());
    std::mt19937_64 rng(rng_seed);
    std::uniform_int_distribution<int> first(0, m - 1);
    std::uniform_int_distribution<int> second(0, m - 2);
    SceneGraph out = graph;
    for (;;) {
        for (auto& e : out.edges) {
            e.subject = first(rng);
            const int o = second(rng);
            e.object = o >= e.subject ? o + 1 : o;
        }
        if (out != graph && out != swapped) return out;
    }
}

std::size_t StatsReport::entity_count(std::string_view phrase) const
{
    for (const auto& [p, c] : entity_counts) {
        if (p == phrase) return c;
    }
    return 0;
}

std::size_t StatsReport::relation_count(std::string_view phrase) const
{
    for (const auto& [p, c] : relation_counts) {
        if (p == phrase) return c;
    }
    return 0;
}

nlohmann::json StatsReport::to_json() const
{
    auto table = [](const auto& counts) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& [p, c] : counts) arr.push_back({{"phrase", p}, {"count", c}});
        return arr;
    };
    auto hist = [](const auto& h) {
        nlohmann::json obj = nlohmann::json::object();
        for (const auto& [len, c] : h) obj[std::to_string(len)] = c;
        return obj;
    };
    return {{"entities", table(entity_counts)},
            {"relations", table(relation_counts)},
            {"entity_token_lengths", hist(entity_token_lengths)},
            {"relation_token_lengths", hist(relation_token_lengths)}};
}

StatsReport graph_stats(std::span<const SceneGraph> graphs, const Tokenizer& tokenizer)
{
    std::map<std::string, std::size_t> ents;
    std::map<std::string, std::size_t> rels;
    StatsReport report;
    for (const auto& g : graphs) {
        for (const auto& n : g.nodes) {
            ++ents[n];
            ++report.entity_token_lengths[tokenizer.count_tokens(n)];
        }
        for (const auto& e : g.edges) {
            ++rels[e.relation];
            ++report.relation_token_lengths[tokenizer.count_tokens(e.relation)];
        }
    }
    auto sorted = [](const std::map<std::string, std::size_t>& m) {
        std::vector<std::pair<std::string, std::size_t>> v(m.begin(), m.end());
        std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
        return v;
    };
    report.entity_counts = sorted(ents);
    report.relation_counts = sorted(rels);
    return report;
}

}  // namespace occlip
