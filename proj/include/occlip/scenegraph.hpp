#pragma once

// Scene graphs: the textual supervision unit. Nodes are object phrases with
// their attributes attached; edges are directed (relation, subject, object)
// triples indexing into the node list.

#include "occlip/vocab.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace occlip {

class Tokenizer;

struct Edge {
    std::string relation;
    int subject = 0;
    int object = 0;

    bool operator==(const Edge&) const = default;
};

struct SceneGraph {
    std::vector<std::string> nodes;
    std::vector<Edge> edges;

    std::size_t num_nodes() const { return nodes.size(); }
    std::size_t num_edges() const { return edges.size(); }
    bool operator==(const SceneGraph&) const = default;
};

/// Throws Error(InvalidGraph) unless every index is in range, no edge is a
/// self loop, and every node phrase is non-empty. M = 0 is rejected.
void validate(const SceneGraph& graph);

// GraphJson wire format: {"entities": [...], "relationships": [{"relationship",
// "subject", "object"}, ...]}
nlohmann::json to_graph_json(const SceneGraph& graph);
/// Strict decode; throws Error(InvalidGraph) on any schema violation.
SceneGraph from_graph_json(const nlohmann::json& j);

enum class ParseFailure { NoDelimiters, MalformedJson, IndexOutOfRange, EmptyEntities, SelfLoop };

const char* to_string(ParseFailure failure);

/// Either a validated graph or the reason extraction failed.
class ParseResult {
public:
    static ParseResult success(SceneGraph graph) { return ParseResult(std::move(graph), std::nullopt); }
    static ParseResult failure(ParseFailure reason) { return ParseResult(std::nullopt, reason); }

    bool ok() const { return graph_.has_value(); }
    const SceneGraph& graph() const { return *graph_; }
    ParseFailure failure_reason() const { return *failure_; }

private:
    ParseResult(std::optional<SceneGraph> g, std::optional<ParseFailure> f) : graph_(std::move(g)), failure_(f) {}
    std::optional<SceneGraph> graph_;
    std::optional<ParseFailure> failure_;
};

/// Parses a caption produced by one of the world's templates. Node order is
/// order of first mention; the background, when mentioned, is the last node
/// and every foreground object gets an "in" edge to it.
/// Throws Error(UnrecognizedTemplate).
SceneGraph parse_template_caption(std::string_view caption, const WorldVocab& vocab);

/// Parser instruction prompt followed by "Caption: <caption>".
/// Throws std::invalid_argument for an empty caption.
std::string build_llm_prompt(std::string_view caption);

/// Pulls the first [ANS]...[/ANS] span out of a model response and decodes
/// it. Never throws.
ParseResult extract_graph_from_llm_response(std::string_view response) noexcept;

/// Every edge (r, s, o) becomes (r, o, s). Throws Error(NoEdges) when P = 0.
SceneGraph swap_graph(const SceneGraph& graph);

/// True when a shuffled graph distinct from both the graph and its swap
/// exists (false for M = 2, P = 1, and for P = 0).
bool shuffle_possible(const SceneGraph& graph);

/// Resamples each edge's (subject, object) uniformly over ordered pairs of
/// distinct nodes, rejecting results equal to the graph or its swap.
/// Throws Error(NoEdges) for P = 0 and Error(Degenerate) when M = 2, P = 1.
SceneGraph shuffle_graph(const SceneGraph& graph, std::uint64_t rng_seed);

struct StatsReport {
    std::vector<std::pair<std::string, std::size_t>> entity_counts;    // descending
    std::vector<std::pair<std::string, std::size_t>> relation_counts;  // descending
    std::map<std::size_t, std::size_t> entity_token_lengths;           // tokens -> phrases
    std::map<std::size_t, std::size_t> relation_token_lengths;

    bool empty() const { return entity_counts.empty() && relation_counts.empty(); }
    std::size_t entity_count(std::string_view phrase) const;
    std::size_t relation_count(std::string_view phrase) const;
    nlohmann::json to_json() const;
};

StatsReport graph_stats(std::span<const SceneGraph> graphs, const Tokenizer& tokenizer);

}  // namespace occlip
