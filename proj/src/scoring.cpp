#include "occlip/scoring.hpp"

#include "occlip/errors.hpp"

#include <cmath>

namespace occlip {

nlohmann::json ScoreBreakdown::to_json() const
{
    return {{"object_scores", object_scores},
            {"relation_scores", relation_scores},
            {"alpha", alpha},
            {"beta", beta},
            {"total", total}};
}

ScoreBreakdown ScoreBreakdown::from_json(const nlohmann::json& j)
{
    ScoreBreakdown b;
    b.object_scores = j.at("object_scores").get<std::vector<double>>();
    b.relation_scores = j.at("relation_scores").get<std::vector<double>>();
    b.alpha = j.at("alpha").get<double>();
    b.beta = j.at("beta").get<double>();
    b.total = j.at("total").get<double>();
    return b;
}

double inverse_softplus(double y)
{
    if (y <= 0.0) throw Error(ErrorCode::Validation, "softplus output must be positive");
    return y > 30.0 ? y : std::log(std::expm1(y));
}

template <typename T>
RelationScorer<T>::RelationScorer(nn::ParameterSet<T>& params, nn::Initializer& init, int d_rel, int d_bind,
                                  MixCoefficients init_coeffs)
{
    if (d_rel <= 0 || d_bind <= 0) throw Error(ErrorCode::Validation, "relation scorer dims must be positive");
    const auto g = nn::ParamGroup::binding;
    f_s_.fc1 = nn::Linear<T>(params, init, "score.f_s.fc1", d_rel + d_bind, d_rel, g);
    f_s_.fc2 = nn::Linear<T>(params, init, "score.f_s.fc2", d_rel, d_rel, g);
    f_o_.fc1 = nn::Linear<T>(params, init, "score.f_o.fc1", d_rel + d_bind, d_rel, g);
    f_o_.fc2 = nn::Linear<T>(params, init, "score.f_o.fc2", d_rel, d_rel, g);
    alpha_raw_ = params.add("score.alpha_raw", Matrix<T>::Constant(1, 1, static_cast<T>(inverse_softplus(init_coeffs.alpha))),
                            g, false);
    beta_raw_ = params.add("score.beta_raw", Matrix<T>::Constant(1, 1, static_cast<T>(inverse_softplus(init_coeffs.beta))),
                           g, false);
}

template <typename T>
Var<T> RelationScorer<T>::relation_scores(const Var<T>& r, const Var<T>& subject_slots, const Var<T>& object_slots) const
{
    auto f = ag::add(f_s_(ag::concat_cols<T>({r, subject_slots})), f_o_(ag::concat_cols<T>({r, object_slots})));
    for (Index i = 0; i < f.rows(); ++i) {
        if (f.value().row(i).squaredNorm() == T(0)) ++*zero_norm_;
    }
    return ag::row_cosine(r, f);
}

template <typename T>
MixCoefficients RelationScorer<T>::coefficients() const
{
    ag::NoGradGuard guard;
    return {static_cast<double>(alpha().item()), static_cast<double>(beta().item())};
}

std::vector<double> object_score(const Matrix<double>& nodes, const Matrix<double>& slots)
{
    if (nodes.rows() != slots.rows() || nodes.cols() != slots.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "node and slot matrices differ in shape");
    }
    std::vector<double> out;
    for (Index i = 0; i < nodes.rows(); ++i) {
        const double nn = nodes.row(i).norm();
        const double ns = slots.row(i).norm();
        if (nn == 0.0 || ns == 0.0) throw Error(ErrorCode::ZeroVector, "zero-norm row " + std::to_string(i));
        out.push_back(nodes.row(i).dot(slots.row(i)) / (nn * ns));
    }
    return out;
}

template <typename T>
Var<T> structured_scores_with_edges(const RelationScorer<T>& scorer, const Var<T>& slots,
                                    const ScoringGraphs<T>& graphs, const std::vector<ScorePair>& pairs,
                                    const std::vector<std::vector<EdgeRef>>& edges_per_pair)
{
    const Index P = static_cast<Index>(pairs.size());
    const Index mmax = graphs.max_nodes;
    if (static_cast<Index>(edges_per_pair.size()) != P) throw Error(ErrorCode::ShapeMismatch, "edge lists != pairs");

    std::vector<Index> slot_rows;
    std::vector<Index> node_rows;
    Matrix<T> mask(P * mmax, 1);
    Matrix<T> m_count(P, 1);
    Matrix<T> p_count(P, 1);
    for (Index p = 0; p < P; ++p) {
        const auto& pr = pairs[static_cast<std::size_t>(p)];
        for (Index m = 0; m < mmax; ++m) {
            slot_rows.push_back(pr.slot_offset + m);
            node_rows.push_back(pr.graph * mmax + m);
            mask(p * mmax + m, 0) = graphs.node_mask[static_cast<std::size_t>(pr.graph * mmax + m)] ? T(1) : T(0);
        }
        m_count(p, 0) = static_cast<T>(graphs.node_counts[static_cast<std::size_t>(pr.graph)]);
        p_count(p, 0) = static_cast<T>(edges_per_pair[static_cast<std::size_t>(p)].size());
    }
    auto cos = ag::row_cosine(ag::gather_rows(graphs.nodes, std::move(node_rows)), ag::gather_rows(slots, slot_rows));
    auto object_sum = ag::segment_sum(ag::mul_constant(cos, mask), mmax);

    std::vector<Index> r_rows, s_rows, o_rows, owner;
    for (Index p = 0; p < P; ++p) {
        const auto off = pairs[static_cast<std::size_t>(p)].slot_offset;
        for (const auto& e : edges_per_pair[static_cast<std::size_t>(p)]) {
            r_rows.push_back(e.relation);
            s_rows.push_back(off + e.subject);
            o_rows.push_back(off + e.object);
            owner.push_back(p);
        }
    }
    const auto alpha = scorer.alpha();
    const auto beta = scorer.beta();
    auto numerator = ag::mul_scalar(object_sum, alpha);
    if (!r_rows.empty()) {
        auto rel = scorer.relation_scores(ag::gather_rows(graphs.relations, std::move(r_rows)),
                                          ag::gather_rows(slots, std::move(s_rows)),
                                          ag::gather_rows(slots, std::move(o_rows)));
        numerator = ag::add(numerator, ag::mul_scalar(ag::scatter_add_rows(rel, std::move(owner), P), beta));
    }
    auto denominator = ag::add(ag::mul_scalar(Var<T>(m_count), alpha), ag::mul_scalar(Var<T>(p_count), beta));
    return ag::mul(numerator, ag::reciprocal(denominator));
}

template <typename T>
Var<T> structured_scores(const RelationScorer<T>& scorer, const Var<T>& slots, const ScoringGraphs<T>& graphs,
                         const std::vector<ScorePair>& pairs)
{
    std::vector<std::vector<EdgeRef>> edges;
    edges.reserve(pairs.size());
    for (const auto& p : pairs) edges.push_back(graphs.edges.at(static_cast<std::size_t>(p.graph)));
    return structured_scores_with_edges(scorer, slots, graphs, pairs, edges);
}

template <typename T>
ScoreBreakdown structured_score(const RelationScorer<T>& scorer, const Matrix<double>& nodes,
                                const Matrix<double>& relations, const std::vector<EdgeRef>& edges,
                                const Matrix<double>& slots)
{
    if (nodes.rows() < 1) throw Error(ErrorCode::ShapeMismatch, "structured score needs at least one node");
    ag::NoGradGuard guard;
    ScoreBreakdown b;
    b.object_scores = object_score(nodes, slots);
    if (!edges.empty()) {
        Matrix<T> r(static_cast<Index>(edges.size()), relations.cols());
        Matrix<T> s(r.rows(), slots.cols());
        Matrix<T> o(r.rows(), slots.cols());
        for (std::size_t e = 0; e < edges.size(); ++e) {
            const auto i = static_cast<Index>(e);
            if (edges[e].relation < 0 || edges[e].relation >= relations.rows() || edges[e].subject < 0 ||
                edges[e].subject >= slots.rows() || edges[e].object < 0 || edges[e].object >= slots.rows()) {
                throw Error(ErrorCode::ShapeMismatch, "edge index out of range");
            }
            r.row(i) = relations.row(edges[e].relation).template cast<T>();
            s.row(i) = slots.row(edges[e].subject).template cast<T>();
            o.row(i) = slots.row(edges[e].object).template cast<T>();
        }
        const auto v = scorer.relation_scores(Var<T>(r), Var<T>(s), Var<T>(o));
        for (Index i = 0; i < v.rows(); ++i) b.relation_scores.push_back(static_cast<double>(v.value()(i, 0)));
    }
    const auto c = scorer.coefficients();
    b.alpha = c.alpha;
    b.beta = c.beta;
    double so = 0.0;
    double sr = 0.0;
    for (double x : b.object_scores) so += x;
    for (double x : b.relation_scores) sr += x;
    b.total = (c.alpha * so + c.beta * sr) /
              (c.alpha * static_cast<double>(b.object_scores.size()) + c.beta * static_cast<double>(edges.size()));
    return b;
}

#define OCCLIP_INSTANTIATE(T)                                                                                   \
    template class RelationScorer<T>;                                                                           \
    template Var<T> structured_scores<T>(const RelationScorer<T>&, const Var<T>&, const ScoringGraphs<T>&,      \
                                         const std::vector<ScorePair>&);                                        \
    template Var<T> structured_scores_with_edges<T>(const RelationScorer<T>&, const Var<T>&,                    \
                                                    const ScoringGraphs<T>&, const std::vector<ScorePair>&,     \
                                                    const std::vector<std::vector<EdgeRef>>&);                  \
    template ScoreBreakdown structured_score<T>(const RelationScorer<T>&, const Matrix<double>&,                \
                                                const Matrix<double>&, const std::vector<EdgeRef>&,             \
                                                const Matrix<double>&);

OCCLIP_INSTANTIATE(float)
OCCLIP_INSTANTIATE(double)
#undef OCCLIP_INSTANTIATE

}  // namespace occlip
