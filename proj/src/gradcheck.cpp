#include "occlip/gradcheck.hpp"

#include "occlip/binding.hpp"
#include "occlip/encoders.hpp"
#include "occlip/losses.hpp"
#include "occlip/model.hpp"
#include "occlip/scoring.hpp"
#include "occlip/tokenizer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace occlip {

using ag::Var;
using MatD = ag::Matrix<double>;

nlohmann::json GradCheckResult::to_json() const
{
    return {{"name", name}, {"max_rel_error", max_rel_error}, {"worst_entry", worst_entry}, {"checked", checked},
            {"passed", passed}};
}

bool GradCheckReport::passed() const
{
    return !results.empty() && std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
}

nlohmann::json GradCheckReport::to_json() const
{
    nlohmann::json rs = nlohmann::json::array();
    for (const auto& r : results) rs.push_back(r.to_json());
    return {{"passed", passed()}, {"seconds", seconds}, {"results", rs}};
}

double relative_error(double analytic, double numeric)
{
    return std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
}

namespace {

// Ridders' extrapolation: central differences at shrinking steps, refined
// by a Neville tableau; returns the entry with the smallest error estimate.
// Fixed steps fail either on sharply curved directions (layer norm over
// tiny embeddings) or on flat ones (roundoff).
template <typename F>
double ridders_derivative(F&& central, double h0)
{
    constexpr int kTable = 10;
    constexpr double kShrink = 1.6, kShrink2 = kShrink * kShrink;
    double a[kTable][kTable];
    double h = h0;
    a[0][0] = central(h);
    double best = a[0][0];
    double err = std::numeric_limits<double>::infinity();
    for (int i = 1; i < kTable; ++i) {
        h /= kShrink;
        a[0][i] = central(h);
        double fac = kShrink2;
        for (int j = 1; j <= i; ++j) {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= kShrink2;
            const double e = std::max(std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]));
            if (e <= err) {
                err = e;
                best = a[j][i];
            }
        }
        if (std::abs(a[i][i] - a[i - 1][i - 1]) >= 2.0 * err) break;
    }
    return best;
}

}  // namespace

GradCheckResult check_gradients(const std::string& name, const std::vector<NamedLeaf>& leaves,
                                const std::function<Var<double>()>& loss, const GradCheckOptions& options)
{
    for (const auto& [_, leaf] : leaves) const_cast<Var<double>&>(leaf).zero_grad();
    ag::backward(loss());

    GradCheckResult result;
    result.name = name;
    std::mt19937_64 rng(options.seed);
    for (const auto& [leaf_name, leaf_const] : leaves) {
        Var<double> leaf = leaf_const;
        const MatD analytic = leaf.has_grad() ? leaf.grad() : MatD::Zero(leaf.rows(), leaf.cols());
        std::vector<ag::Index> entries(static_cast<std::size_t>(leaf.value().size()));
        std::iota(entries.begin(), entries.end(), 0);
        if (options.max_entries_per_leaf > 0 && entries.size() > options.max_entries_per_leaf) {
            std::shuffle(entries.begin(), entries.end(), rng);
            entries.resize(options.max_entries_per_leaf);
        }
        ag::NoGradGuard no_grad;
        for (ag::Index e : entries) {
            double& x = leaf.mutable_value().data()[e];
            const double saved = x;
            auto central = [&](double h) {
                x = saved + h;
                const double up = loss().item();
                x = saved - h;
                const double down = loss().item();
                x = saved;
                return (up - down) / (2.0 * h);
            };
            const double numeric = ridders_derivative(central, options.step);
            double err = relative_error(analytic.data()[e], numeric);
            if (!std::isfinite(err)) err = 1e300;
            ++result.checked;
            if (result.worst_entry.empty() || err > result.max_rel_error) {
                result.max_rel_error = err;
                result.worst_entry = leaf_name + "[" + std::to_string(e) + "]";
            }
        }
    }
    result.passed = result.checked > 0 && result.max_rel_error < options.tolerance;
    return result;
}

namespace {

MatD random_matrix(std::mt19937_64& rng, ag::Index rows, ag::Index cols, double scale = 1.0)
{
    std::normal_distribution<double> dist(0.0, scale);
    MatD m(rows, cols);
    for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

std::vector<NamedLeaf> leaves_of(nn::ParameterSet<double>& params)
{
    std::vector<NamedLeaf> out;
    for (auto& p : params.entries()) out.emplace_back(p.name, p.var);
    return out;
}

// Weighted sum so that every output entry reaches the loss with a distinct
// coefficient.
Var<double> weighted_sum(const Var<double>& x, const MatD& w)
{
    return ag::sum(ag::mul_constant(x, w));
}

GradCheckResult binding_check(const std::string& name, BindingConfig cfg, std::uint64_t seed,
                              const GradCheckOptions& opt)
{
    std::mt19937_64 rng(seed);
    nn::ParameterSet<double> params;
    nn::Initializer init(seed);
    const int d_obj = 6, width = 5;
    BindingModule<double> module(params, init, cfg, d_obj, width);

    const ag::Index images = 2, keys = 4, graphs = 2, max_q = 3;
    Var<double> patches(random_matrix(rng, images * keys, width), true);
    Var<double> nodes(random_matrix(rng, graphs * max_q, d_obj), true);
    const std::vector<std::uint8_t> mask{1, 1, 1, 1, 1, 0};

    auto leaves = leaves_of(params);
    leaves.emplace_back("patches", patches);
    leaves.emplace_back("nodes", nodes);
    auto loss = [&] {
        auto kv = module.keys_values(patches, images, keys);
        auto slots = module.attend(module.queries(nodes), mask, graphs, max_q, kv, true);
        return ag::sum(slots);
    };
    return check_gradients(name, leaves, loss, opt);
}

GradCheckResult scoring_check(std::uint64_t seed, const GradCheckOptions& opt)
{
    std::mt19937_64 rng(seed);
    nn::ParameterSet<double> params;
    nn::Initializer init(seed);
    const int d_obj = 5, d_rel = 4;
    RelationScorer<double> scorer(params, init, d_rel, d_obj, {1.3, 0.7});

    ScoringGraphs<double> g;
    g.max_nodes = 3;
    g.node_counts = {3, 2};
    g.node_mask = {1, 1, 1, 1, 1, 0};
    MatD nodes = random_matrix(rng, 6, d_obj);
    nodes.row(5).setZero();
    g.nodes = Var<double>(nodes, true);
    g.relations = Var<double>(random_matrix(rng, 3, d_rel), true);
    g.edges = {{{0, 0, 1}, {1, 2, 0}}, {{2, 1, 0}}};

    // two images x two graphs, blocks of max_nodes rows
    Var<double> slots(random_matrix(rng, 4 * 3, d_obj), true);
    const std::vector<ScorePair> pairs{{0, 0}, {3, 1}, {6, 0}, {9, 1}};
    const MatD w = random_matrix(rng, 4, 1);

    auto leaves = leaves_of(params);
    leaves.emplace_back("nodes", g.nodes);
    leaves.emplace_back("relations", g.relations);
    leaves.emplace_back("slots", slots);
    auto loss = [&] { return weighted_sum(structured_scores(scorer, slots, g, pairs), w); };
    return check_gradients("scoring", leaves, loss, opt);
}

GradCheckResult itc_check(std::uint64_t seed, const GradCheckOptions& opt)
{
    std::mt19937_64 rng(seed);
    Var<double> scores(random_matrix(rng, 4, 4, 0.3), true);
    Var<double> scale = Var<double>::scalar(7.0, true);
    return check_gradients("itc_loss", {{"scores", scores}, {"scale", scale}},
                           [&] { return itc_loss(scores, scale); }, opt);
}

GradCheckResult rel_check(std::uint64_t seed, const GradCheckOptions& opt)
{
    std::mt19937_64 rng(seed);
    Var<double> scores(random_matrix(rng, 4, 3, 0.3), true);
    Var<double> scale = Var<double>::scalar(5.0, true);
    const std::vector<LocalKind> kinds{LocalKind::three_way, LocalKind::two_way, LocalKind::skipped,
                                       LocalKind::three_way};
    return check_gradients("rel_local_loss", {{"scores", scores}, {"scale", scale}},
                           [&] { return rel_local_loss(scores, kinds, scale); }, opt);
}

ModelConfig tiny_model_config()
{
    ModelConfig c;
    c.text.context_length = 10;
    c.text.num_layers = 1;
    c.text.width = 8;
    c.text.num_heads = 2;
    c.text.d_obj = 6;
    c.text.d_rel = 4;
    c.vision.image_size = 8;
    c.vision.patch_size = 4;
    c.vision.width = 8;
    c.vision.num_layers = 2;
    c.vision.num_heads = 2;
    c.vision.layer_offset = 1;
    c.binding.d_bind = 6;
    c.binding.pre_self_attn_layers = 1;
    c.binding.pre_self_attn_heads = 2;
    c.baseline_context_length = 16;
    c.baseline_embed_dim = 6;
    return c;
}

std::vector<Image> random_images(std::mt19937_64& rng, int n, int size)
{
    std::uniform_int_distribution<int> px(0, 255);
    std::vector<Image> out;
    for (int i = 0; i < n; ++i) {
        Image im(size, size);
        for (auto& p : im.pixels) p = static_cast<std::uint8_t>(px(rng));
        out.push_back(std::move(im));
    }
    return out;
}

// Three graphs: one admitting swap and shuffle, one swap only, one without
// edges.
std::vector<SceneGraph> tiny_graphs()
{
    return {
        {{"red circle", "blue square", "green star"}, {{"to the left of", 0, 1}, {"above", 2, 1}}},
        {{"yellow ring", "red bar"}, {{"below", 0, 1}}},
        {{"blue cross"}, {}},
    };
}

template <typename Model>
GradCheckResult model_loss_check(const std::string& name, ModelConfig cfg, std::uint64_t seed,
                                 const GradCheckOptions& opt)
{
    std::mt19937_64 rng(seed);
    WorldVocab vocab;
    Model model(cfg, vocab, seed);
    const auto images = random_images(rng, 3, cfg.vision.image_size);
    const auto graphs = tiny_graphs();
    const std::vector<std::string> captions{"a red circle to the left of a blue square", "a yellow ring below a red bar",
                                            "a blue cross"};
    auto loss = [&] { return model.loss(images, graphs, captions, seed).total; };
    return check_gradients(name, leaves_of(model.params()), loss, opt);
}

GradCheckResult text_encoder_check(std::uint64_t seed, const GradCheckOptions& opt)
{
    std::mt19937_64 rng(seed);
    WorldVocab vocab;
    auto tok = std::make_shared<const Tokenizer>(Tokenizer::for_world(vocab));
    auto cfg = tiny_model_config().text;
    nn::ParameterSet<double> params;
    nn::Initializer init(seed);
    PhraseEncoder<double> enc(params, init, cfg, tok);
    const std::vector<std::string> nodes{"red circle", "blue square", "gray background"};
    const std::vector<std::string> rels{"to the left of", "above"};
    const MatD wn = random_matrix(rng, 3, cfg.d_obj);
    const MatD wr = random_matrix(rng, 2, cfg.d_rel);
    auto loss = [&] {
        return ag::add(weighted_sum(enc.encode_phrases(nodes, PhraseHead::node), wn),
                       weighted_sum(enc.encode_phrases(rels, PhraseHead::relation), wr));
    };
    return check_gradients("text_encoder", leaves_of(params), loss, opt);
}

GradCheckResult vision_encoder_check(std::uint64_t seed, const GradCheckOptions& opt)
{
    std::mt19937_64 rng(seed);
    auto cfg = tiny_model_config().vision;
    nn::ParameterSet<double> params;
    nn::Initializer init(seed);
    VisionEncoder<double> enc(params, init, cfg, "vision", cfg.num_layers, true);
    const auto images = random_images(rng, 2, cfg.image_size);
    const MatD pixels = stack_images<double>(images, cfg);
    const MatD wp = random_matrix(rng, 2 * cfg.num_patches(), cfg.width);
    const MatD wc = random_matrix(rng, 2, cfg.width);
    auto loss = [&] {
        return ag::add(weighted_sum(enc.patch_features(pixels, 2), wp), weighted_sum(enc.class_features(pixels, 2), wc));
    };
    return check_gradients("vision_encoder", leaves_of(params), loss, opt);
}

GradCheckResult caption_encoder_check(std::uint64_t seed, const GradCheckOptions& opt)
{
    std::mt19937_64 rng(seed);
    WorldVocab vocab;
    auto tok = std::make_shared<const Tokenizer>(Tokenizer::for_world(vocab));
    auto cfg = tiny_model_config().text;
    cfg.context_length = 16;
    nn::ParameterSet<double> params;
    nn::Initializer init(seed);
    CaptionEncoder<double> enc(params, init, cfg, tok, 6);
    const std::vector<std::string> caps{"a red circle to the left of a blue square", "a green star"};
    const MatD w = random_matrix(rng, 2, 6);
    return check_gradients("caption_encoder", leaves_of(params), [&] { return weighted_sum(enc.encode(caps), w); },
                           opt);
}

}  // namespace

GradCheckReport run_gradient_suite(std::uint64_t seed, double tolerance)
{
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckOptions opt;
    opt.tolerance = tolerance;
    opt.seed = seed;

    BindingConfig b;
    b.d_bind = 6;
    b.pre_self_attn_layers = 1;
    b.pre_self_attn_heads = 2;
    b.num_default_tokens = 2;

    GradCheckReport report;
    report.results.push_back(binding_check("binding_competitive", b, seed, opt));
    BindingConfig b2 = b;
    b2.competitive = false;
    b2.cross_attn_heads = 2;
    report.results.push_back(binding_check("binding_key_softmax_two_heads", b2, seed + 1, opt));
    report.results.push_back(scoring_check(seed, opt));
    report.results.push_back(itc_check(seed, opt));
    report.results.push_back(rel_check(seed, opt));
    report.results.push_back(text_encoder_check(seed, opt));
    report.results.push_back(vision_encoder_check(seed, opt));
    report.results.push_back(caption_encoder_check(seed, opt));
    report.results.push_back(model_loss_check<OcClipModel<double>>("occlip_losses_end_to_end", tiny_model_config(), seed, opt));
    auto base = tiny_model_config();
    base.kind = ModelKind::clip_baseline;
    report.results.push_back(model_loss_check<BaselineModel<double>>("baseline_itc_end_to_end", base, seed, opt));
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace occlip
