#pragma once

// Structured image-graph similarity: node-slot cosines plus relation scores
// cos(r, f_s([r; S_s]) + f_o([r; S_o])), mixed by learned positive weights
// alpha and beta and normalized by alpha*M + beta*P.

#include "occlip/nn.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <vector>

namespace occlip {

using ag::Index;
using ag::Matrix;
using ag::Var;

struct MixCoefficients {
    double alpha = 1.5;
    double beta = 0.5;
};

struct ScoreBreakdown {
    std::vector<double> object_scores;
    std::vector<double> relation_scores;
    double alpha = 0.0;
    double beta = 0.0;
    double total = 0.0;

    nlohmann::json to_json() const;
    static ScoreBreakdown from_json(const nlohmann::json& j);
};

/// Inverse of softplus, for initializing the raw mixing parameters.
double inverse_softplus(double y);

template <typename T>
class RelationScorer {
public:
    RelationScorer() = default;
    RelationScorer(nn::ParameterSet<T>& params, nn::Initializer& init, int d_rel, int d_bind,
                   MixCoefficients init_coeffs = {});

    /// Row-wise relation scores for E edges: r (E x d_rel), subject and
    /// object slots (E x d_bind) -> E x 1. Rows whose MLP output is zero
    /// score 0 and bump zero_norm_count().
    Var<T> relation_scores(const Var<T>& r, const Var<T>& subject_slots, const Var<T>& object_slots) const;

    Var<T> alpha() const { return ag::softplus(alpha_raw_); }
    Var<T> beta() const { return ag::softplus(beta_raw_); }
    MixCoefficients coefficients() const;

    std::size_t zero_norm_count() const { return zero_norm_->load(); }

private:
    struct Mlp {
        nn::Linear<T> fc1;
        nn::Linear<T> fc2;
        Var<T> operator()(const Var<T>& x) const { return fc2(ag::gelu(fc1(x))); }
    };
    Mlp f_s_;
    Mlp f_o_;
    Var<T> alpha_raw_;
    Var<T> beta_raw_;
    std::shared_ptr<std::atomic<std::size_t>> zero_norm_ = std::make_shared<std::atomic<std::size_t>>(0);
};

/// Cosine of each node row with its slot row. Throws Error(ZeroVector) for
/// a zero-norm row and Error(ShapeMismatch) for mismatched shapes.
std::vector<double> object_score(const Matrix<double>& nodes, const Matrix<double>& slots);

/// Edge of a graph by row index into the relation-embedding matrix.
struct EdgeRef {
    Index relation = 0;
    Index subject = 0;
    Index object = 0;
};

/// One (slot block, graph) pair to score.
struct ScorePair {
    Index slot_offset = 0;  // first slot row of the pair's block
    Index graph = 0;
};

/// Padded batch of graphs as seen by the scorer.
template <typename T>
struct ScoringGraphs {
    Var<T> nodes;                           // (G*Mmax) x d_obj, padded rows zero
    std::vector<std::uint8_t> node_mask;    // G*Mmax
    std::vector<int> node_counts;           // M per graph
    Var<T> relations;                       // rows referenced by EdgeRef::relation
    std::vector<std::vector<EdgeRef>> edges;  // per graph, subject/object are node indices
    Index max_nodes = 0;

    Index num_graphs() const { return static_cast<Index>(node_counts.size()); }
};

/// Structured score of each pair, P x 1. `slots` holds the binding output;
/// slot_offset + m addresses the slot of node m.
template <typename T>
Var<T> structured_scores(const RelationScorer<T>& scorer, const Var<T>& slots, const ScoringGraphs<T>& graphs,
                         const std::vector<ScorePair>& pairs);

/// Same with per-pair alternative edge lists (graph perturbations); the
/// object term is unchanged. edges_per_pair[p] replaces graphs.edges.
template <typename T>
Var<T> structured_scores_with_edges(const RelationScorer<T>& scorer, const Var<T>& slots,
                                    const ScoringGraphs<T>& graphs, const std::vector<ScorePair>& pairs,
                                    const std::vector<std::vector<EdgeRef>>& edges_per_pair);

/// Unbatched breakdown for one graph and its slots (double precision).
template <typename T>
ScoreBreakdown structured_score(const RelationScorer<T>& scorer, const Matrix<double>& nodes,
                                const Matrix<double>& relations, const std::vector<EdgeRef>& edges,
                                const Matrix<double>& slots);

}  // namespace occlip
