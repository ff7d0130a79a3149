#include "occlip/model.hpp"

#include "occlip/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace occlip {

const char* to_string(ModelKind kind)
{
    return kind == ModelKind::occlip ? "occlip" : "clip_baseline";
}

ModelKind model_kind_from_string(const std::string& s)
{
    if (s == "occlip") return ModelKind::occlip;
    if (s == "clip_baseline") return ModelKind::clip_baseline;
    throw Error(ErrorCode::Validation, "unknown model: " + s);
}

ModelConfig ModelConfig::desk()
{
    return ModelConfig{};
}

ModelConfig ModelConfig::large()
{
    ModelConfig c;
    c.binding = BindingConfig::large();
    c.text.num_layers = 6;
    c.text.width = 256;
    c.text.d_obj = c.binding.d_bind;
    c.text.d_rel = 128;
    return c;
}

void ModelConfig::validate() const
{
    TextEncoderConfig t = text;
    if (t.vocab_size == 0) t.vocab_size = 2;
    t.validate();
    vision.validate();
    binding.validate();
    loss.validate();
    if (text.d_obj != binding.d_bind) {
        throw Error(ErrorCode::Validation, "text.d_obj must equal binding.d_bind (node-slot cosine)");
    }
    if (!(coefficients.alpha > 0.0) || !(coefficients.beta > 0.0)) {
        throw Error(ErrorCode::Validation, "mixing coefficients must be positive");
    }
    if (baseline_context_length < 1 || baseline_embed_dim < 1) {
        throw Error(ErrorCode::Validation, "baseline context length and embedding width must be positive");
    }
}

nlohmann::json ModelConfig::to_json() const
{
    return {{"kind", to_string(kind)},
            {"text", text.to_json()},
            {"vision", vision.to_json()},
            {"binding", binding.to_json()},
            {"alpha_init", coefficients.alpha},
            {"beta_init", coefficients.beta},
            {"loss", loss.to_json()},
            {"baseline_context_length", baseline_context_length},
            {"baseline_embed_dim", baseline_embed_dim}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j)
{
    ModelConfig c;
    if (j.contains("kind")) c.kind = model_kind_from_string(j.at("kind").get<std::string>());
    if (j.contains("text")) c.text = TextEncoderConfig::from_json(j.at("text"));
    if (j.contains("vision")) c.vision = VisionEncoderConfig::from_json(j.at("vision"));
    if (j.contains("binding")) c.binding = BindingConfig::from_json(j.at("binding"));
    c.coefficients.alpha = j.value("alpha_init", c.coefficients.alpha);
    c.coefficients.beta = j.value("beta_init", c.coefficients.beta);
    if (j.contains("loss")) c.loss = LossConfig::from_json(j.at("loss"));
    c.baseline_context_length = j.value("baseline_context_length", c.baseline_context_length);
    c.baseline_embed_dim = j.value("baseline_embed_dim", c.baseline_embed_dim);
    return c;
}

GraphBatch assemble_batch(const std::vector<SceneGraph>& graphs)
{
    GraphBatch b;
    std::map<std::string, Index> node_ids;
    std::map<std::string, Index> rel_ids;
    for (const auto& g : graphs) {
        if (g.nodes.empty()) throw Error(ErrorCode::InvalidGraph, "graph without nodes");
        b.max_nodes = std::max<Index>(b.max_nodes, static_cast<Index>(g.nodes.size()));
    }
    for (const auto& g : graphs) {
        for (std::size_t m = 0; m < static_cast<std::size_t>(b.max_nodes); ++m) {
            if (m < g.nodes.size()) {
                auto [it, fresh] = node_ids.emplace(g.nodes[m], static_cast<Index>(b.node_phrases.size()));
                if (fresh) b.node_phrases.push_back(g.nodes[m]);
                b.node_slots.push_back(it->second);
                b.node_mask.push_back(1);
            } else {
                b.node_slots.push_back(-1);
                b.node_mask.push_back(0);
            }
        }
        b.node_counts.push_back(static_cast<int>(g.nodes.size()));
        std::vector<EdgeRef> edges;
        for (const auto& e : g.edges) {
            auto [it, fresh] = rel_ids.emplace(e.relation, static_cast<Index>(b.relation_phrases.size()));
            if (fresh) b.relation_phrases.push_back(e.relation);
            edges.push_back(EdgeRef{it->second, e.subject, e.object});
        }
        b.edges.push_back(std::move(edges));
    }
    return b;
}

template <typename T>
Matrix<T> stack_images(const std::vector<Image>& images, const VisionEncoderConfig& cfg)
{
    const Index n = cfg.num_patches();
    Matrix<T> out(static_cast<Index>(images.size()) * n, cfg.patch_dim());
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].height != cfg.image_size || images[i].width != cfg.image_size) {
            throw Error(ErrorCode::BadShape, "image size does not match the vision encoder");
        }
        out.middleRows(static_cast<Index>(i) * n, n) = patchify<T>(images[i], cfg.patch_size);
    }
    return out;
}

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b)
{
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

template <typename T>
Var<T> make_logit_scale(nn::ParameterSet<T>& params, const LossConfig& cfg)
{
    const Matrix<T> raw = Matrix<T>::Constant(1, 1, static_cast<T>(std::log(cfg.logit_scale_init)));
    if (cfg.learn_logit_scale) return params.add("logit_scale_raw", raw, nn::ParamGroup::binding, false);
    return Var<T>(raw);
}

template <typename T>
void clamp_logit_scale(Var<T>& raw, const LossConfig& cfg)
{
    auto& v = raw.mutable_value()(0, 0);
    v = std::min(v, static_cast<T>(std::log(cfg.logit_scale_max)));
}

template <typename T>
void fill_matrix_stats(LossReport& r, const Matrix<T>& s)
{
    const Index b = s.rows();
    double diag = 0.0;
    double off = 0.0;
    for (Index i = 0; i < b; ++i) {
        for (Index j = 0; j < b; ++j) (i == j ? diag : off) += static_cast<double>(s(i, j));
    }
    r.mean_diagonal = diag / static_cast<double>(b);
    r.mean_off_diagonal = b > 1 ? off / static_cast<double>(b * (b - 1)) : 0.0;
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
OcClipModel<T>::OcClipModel(const ModelConfig& cfg, const WorldVocab& vocab, std::uint64_t seed) : cfg_(cfg)
{
    cfg_.validate();
    tokenizer_ = std::make_shared<const Tokenizer>(Tokenizer::for_world(vocab));
    if (cfg_.text.vocab_size == 0) cfg_.text.vocab_size = tokenizer_->size();
    nn::Initializer init(seed);
    text_ = PhraseEncoder<T>(params_, init, cfg_.text, tokenizer_);
    const int blocks = cfg_.vision.num_layers - cfg_.vision.layer_offset;
    vision_ = VisionEncoder<T>(params_, init, cfg_.vision, "vision", blocks, false);
    binding_ = BindingModule<T>(params_, init, cfg_.binding, cfg_.text.d_obj, cfg_.vision.width);
    scorer_ = RelationScorer<T>(params_, init, cfg_.text.d_rel, cfg_.binding.d_bind, cfg_.coefficients);
    logit_scale_raw_ = make_logit_scale(params_, cfg_.loss);
}

template <typename T>
ScoringGraphs<T> OcClipModel<T>::encode_graphs(const GraphBatch& batch) const
{
    ScoringGraphs<T> g;
    const auto unique = text_.encode_phrases(batch.node_phrases, PhraseHead::node);
    const Index pad = unique.rows();
    auto with_zero = ag::concat_rows<T>({unique, Var<T>(Matrix<T>::Zero(1, unique.cols()))});
    std::vector<Index> rows;
    rows.reserve(batch.node_slots.size());
    for (Index s : batch.node_slots) rows.push_back(s < 0 ? pad : s);
    g.nodes = ag::gather_rows(with_zero, std::move(rows));
    g.node_mask = batch.node_mask;
    g.node_counts = batch.node_counts;
    g.max_nodes = batch.max_nodes;
    g.edges = batch.edges;
    if (!batch.relation_phrases.empty()) {
        g.relations = text_.encode_phrases(batch.relation_phrases, PhraseHead::relation);
    } else {
        g.relations = Var<T>(Matrix<T>::Zero(0, cfg_.text.d_rel));
    }
    return g;
}

template <typename T>
Var<T> OcClipModel<T>::slots_for(const Matrix<T>& pixels, Index num_images, const ScoringGraphs<T>& graphs,
                                 bool all_pairs) const
{
    const Index n = cfg_.vision.num_patches();
    const auto kv = binding_.keys_values(vision_.patch_features(pixels, num_images), num_images, n);
    return binding_.attend(binding_.queries(graphs.nodes), graphs.node_mask, graphs.num_graphs(), graphs.max_nodes, kv,
                           all_pairs);
}

template <typename T>
Var<T> OcClipModel<T>::score_matrix(const Matrix<T>& pixels, Index num_images, const GraphBatch& graphs) const
{
    const auto g = encode_graphs(graphs);
    const auto slots = slots_for(pixels, num_images, g, true);
    const Index G = g.num_graphs();
    const Index R = g.max_nodes + cfg_.binding.num_default_tokens;
    std::vector<ScorePair> pairs;
    for (Index j = 0; j < num_images; ++j) {
        for (Index i = 0; i < G; ++i) pairs.push_back({(j * G + i) * R, i});
    }
    return ag::reshape(structured_scores(scorer_, slots, g, pairs), num_images, G);
}

template <typename T>
Var<T> OcClipModel<T>::score_diagonal(const Matrix<T>& pixels, Index num_images, const GraphBatch& graphs) const
{
    if (graphs.num_graphs() != num_images) throw Error(ErrorCode::ShapeMismatch, "diagonal scoring needs I == G");
    const auto g = encode_graphs(graphs);
    const auto slots = slots_for(pixels, num_images, g, false);
    const Index R = g.max_nodes + cfg_.binding.num_default_tokens;
    std::vector<ScorePair> pairs;
    for (Index j = 0; j < num_images; ++j) pairs.push_back({j * R, j});
    return structured_scores(scorer_, slots, g, pairs);
}

template <typename T>
LossOutput<T> OcClipModel<T>::loss(const std::vector<Image>& images, const std::vector<SceneGraph>& graphs,
                                   const std::vector<std::string>& /*captions*/, std::uint64_t perturb_seed) const
{
    const Index B = static_cast<Index>(images.size());
    if (B < 1 || static_cast<Index>(graphs.size()) != B) throw Error(ErrorCode::ShapeMismatch, "batch size mismatch");
    const auto batch = assemble_batch(graphs);
    const auto g = encode_graphs(batch);
    const auto slots = slots_for(stack_images<T>(images, cfg_.vision), B, g, true);
    const Index R = g.max_nodes + cfg_.binding.num_default_tokens;

    std::vector<ScorePair> pairs;
    for (Index j = 0; j < B; ++j) {
        for (Index i = 0; i < B; ++i) pairs.push_back({(j * B + i) * R, i});
    }
    const auto flat = structured_scores(scorer_, slots, g, pairs);
    const auto scores = ag::reshape(flat, B, B);
    const auto scale = logit_scale();
    auto itc = itc_loss(scores, scale);

    LossOutput<T> out;
    out.report.logit_scale = static_cast<double>(scale.item());
    fill_matrix_stats(out.report, scores.value());
    out.report.itc = static_cast<double>(itc.item());
    out.total = itc;
    if (cfg_.loss.use_local_loss) {
        std::vector<ScorePair> diag;
        std::vector<Index> diag_rows;
        for (Index j = 0; j < B; ++j) {
            diag.push_back({(j * B + j) * R, j});
            diag_rows.push_back(j * B + j);
        }
        std::vector<ScorePair> alt_pairs = diag;
        alt_pairs.insert(alt_pairs.end(), diag.begin(), diag.end());
        std::vector<std::vector<EdgeRef>> alt_edges(static_cast<std::size_t>(2 * B));
        std::vector<LocalKind> kinds;
        for (Index j = 0; j < B; ++j) {
            const auto& sg = graphs[static_cast<std::size_t>(j)];
            const auto& refs = batch.edges[static_cast<std::size_t>(j)];
            auto& swapped = alt_edges[static_cast<std::size_t>(j)];
            auto& shuffled = alt_edges[static_cast<std::size_t>(B + j)];
            for (const auto& e : refs) swapped.push_back({e.relation, e.object, e.subject});
            if (refs.empty()) {
                kinds.push_back(LocalKind::skipped);
                ++out.report.rel_skipped;
            } else if (cfg_.loss.local_negatives == LocalNegatives::swap_only || !shuffle_possible(sg)) {
                kinds.push_back(LocalKind::two_way);
                shuffled = swapped;
                ++out.report.rel_two_way;
            } else {
                kinds.push_back(LocalKind::three_way);
                const auto sh = shuffle_graph(sg, mix_seed(perturb_seed, static_cast<std::uint64_t>(j)));
                for (std::size_t e = 0; e < refs.size(); ++e) {
                    shuffled.push_back({refs[e].relation, sh.edges[e].subject, sh.edges[e].object});
                }
            }
        }
        out.report.rel_contributing = static_cast<std::size_t>(B) - out.report.rel_skipped;
        out.report.skipped_fraction = static_cast<double>(out.report.rel_skipped) / static_cast<double>(B);
        const auto alt = structured_scores_with_edges(scorer_, slots, g, alt_pairs, alt_edges);
        const auto three = ag::concat_cols<T>(
            {ag::gather_rows(flat, diag_rows), ag::slice_rows(alt, 0, B), ag::slice_rows(alt, B, B)});
        auto rel = rel_local_loss(three, kinds, scale);
        out.report.rel = static_cast<double>(rel.item());
        out.total = ag::add(itc, rel);
    }
    out.report.total = static_cast<double>(out.total.item());
    return out;
}

template <typename T>
Var<T> OcClipModel<T>::logit_scale() const
{
    return ag::exp(logit_scale_raw_);
}

template <typename T>
void OcClipModel<T>::after_step()
{
    clamp_logit_scale(logit_scale_raw_, cfg_.loss);
}

template <typename T>
SlotSet OcClipModel<T>::bind(const Image& image, const SceneGraph& graph) const
{
    ag::NoGradGuard guard;
    const auto batch = assemble_batch({graph});
    const auto g = encode_graphs(batch);
    return occlip::bind(binding_, g.nodes, encode_image_patches(vision_, image));
}

template <typename T>
ScoreBreakdown OcClipModel<T>::breakdown(const Image& image, const SceneGraph& graph) const
{
    ag::NoGradGuard guard;
    const auto batch = assemble_batch({graph});
    const auto g = encode_graphs(batch);
    const auto slots = occlip::bind(binding_, g.nodes, encode_image_patches(vision_, image));
    return structured_score(scorer_, g.nodes.value().template cast<double>(),
                            g.relations.value().template cast<double>(), batch.edges.front(), slots.slots);
}

template <typename T>
Matrix<double> OcClipModel<T>::score_matrix(const std::vector<Image>& images, const std::vector<TextQuery>& texts) const
{
    ag::NoGradGuard guard;
    std::vector<SceneGraph> graphs;
    for (const auto& t : texts) graphs.push_back(t.graph);
    const auto s = score_matrix(stack_images<T>(images, cfg_.vision), static_cast<Index>(images.size()),
                                assemble_batch(graphs));
    return s.value().template cast<double>();
}

template <typename T>
std::vector<double> OcClipModel<T>::score_pairs(const std::vector<Image>& images,
                                                const std::vector<TextQuery>& texts) const
{
    ag::NoGradGuard guard;
    std::vector<SceneGraph> graphs;
    for (const auto& t : texts) graphs.push_back(t.graph);
    const auto s = score_diagonal(stack_images<T>(images, cfg_.vision), static_cast<Index>(images.size()),
                                  assemble_batch(graphs));
    std::vector<double> out(static_cast<std::size_t>(s.rows()));
    for (Index i = 0; i < s.rows(); ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(s.value()(i, 0));
    return out;
}

// ---------------------------------------------------------------------------

template <typename T>
BaselineModel<T>::BaselineModel(const ModelConfig& cfg, const WorldVocab& vocab, std::uint64_t seed) : cfg_(cfg)
{
    cfg_.validate();
    tokenizer_ = std::make_shared<const Tokenizer>(Tokenizer::for_world(vocab));
    if (cfg_.text.vocab_size == 0) cfg_.text.vocab_size = tokenizer_->size();
    nn::Initializer init(seed);
    TextEncoderConfig tc = cfg_.text;
    tc.context_length = cfg_.baseline_context_length;
    text_ = CaptionEncoder<T>(params_, init, tc, tokenizer_, cfg_.baseline_embed_dim);
    vision_ = VisionEncoder<T>(params_, init, cfg_.vision, "vision", cfg_.vision.num_layers, true);
    image_projection_ = nn::Linear<T>(params_, init, "vision.projection", cfg_.vision.width, cfg_.baseline_embed_dim,
                                      nn::ParamGroup::vision, false);
    logit_scale_raw_ = make_logit_scale(params_, cfg_.loss);
}

template <typename T>
Var<T> BaselineModel<T>::image_embeddings(const Matrix<T>& pixels, Index num_images) const
{
    return ag::row_normalize(image_projection_(vision_.class_features(pixels, num_images)));
}

template <typename T>
Var<T> BaselineModel<T>::caption_embeddings(const std::vector<std::string>& captions) const
{
    return text_.encode(captions);
}

template <typename T>
LossOutput<T> BaselineModel<T>::loss(const std::vector<Image>& images, const std::vector<SceneGraph>& /*graphs*/,
                                     const std::vector<std::string>& captions, std::uint64_t /*perturb_seed*/) const
{
    const Index B = static_cast<Index>(images.size());
    if (B < 1 || static_cast<Index>(captions.size()) != B) throw Error(ErrorCode::ShapeMismatch, "batch size mismatch");
    const auto scores = ag::matmul_nt(image_embeddings(stack_images<T>(images, cfg_.vision), B),
                                      caption_embeddings(captions));
    const auto scale = logit_scale();
    LossOutput<T> out;
    out.total = itc_loss(scores, scale);
    out.report.itc = static_cast<double>(out.total.item());
    out.report.total = out.report.itc;
    out.report.logit_scale = static_cast<double>(scale.item());
    fill_matrix_stats(out.report, scores.value());
    return out;
}

template <typename T>
Var<T> BaselineModel<T>::logit_scale() const
{
    return ag::exp(logit_scale_raw_);
}

template <typename T>
void BaselineModel<T>::after_step()
{
    clamp_logit_scale(logit_scale_raw_, cfg_.loss);
}

template <typename T>
Matrix<double> BaselineModel<T>::score_matrix(const std::vector<Image>& images,
                                              const std::vector<TextQuery>& texts) const
{
    ag::NoGradGuard guard;
    std::vector<std::string> captions;
    for (const auto& t : texts) captions.push_back(t.caption);
    const auto s = ag::matmul_nt(
        image_embeddings(stack_images<T>(images, cfg_.vision), static_cast<Index>(images.size())),
        caption_embeddings(captions));
    return s.value().template cast<double>();
}

template <typename T>
std::vector<double> BaselineModel<T>::score_pairs(const std::vector<Image>& images,
                                                  const std::vector<TextQuery>& texts) const
{
    ag::NoGradGuard guard;
    if (images.size() != texts.size()) throw Error(ErrorCode::ShapeMismatch, "score_pairs needs equal counts");
    std::vector<std::string> captions;
    for (const auto& t : texts) captions.push_back(t.caption);
    const auto a = image_embeddings(stack_images<T>(images, cfg_.vision), static_cast<Index>(images.size()));
    const auto b = caption_embeddings(captions);
    std::vector<double> out(images.size());
    for (Index i = 0; i < a.rows(); ++i) {
        out[static_cast<std::size_t>(i)] = static_cast<double>(a.value().row(i).dot(b.value().row(i)));
    }
    return out;
}

template Matrix<float> stack_images<float>(const std::vector<Image>&, const VisionEncoderConfig&);
template Matrix<double> stack_images<double>(const std::vector<Image>&, const VisionEncoderConfig&);
template class OcClipModel<float>;
template class OcClipModel<double>;
template class BaselineModel<float>;
template class BaselineModel<double>;

}  // namespace occlip
