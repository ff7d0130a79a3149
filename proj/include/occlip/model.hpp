#pragma once

// Full models: the structured OC-CLIP scorer (phrase encoder, ViT, binding,
// relation scorer) and the single-vector dual-encoder baseline, behind a
// common scoring interface used by evaluation.

#include "occlip/binding.hpp"
#include "occlip/encoders.hpp"
#include "occlip/image.hpp"
#include "occlip/losses.hpp"
#include "occlip/scenegraph.hpp"
#include "occlip/scoring.hpp"
#include "occlip/vocab.hpp"

#include <nlohmann/json.hpp>

#include <memory>
#include <string>
#include <vector>

namespace occlip {

enum class ModelKind { occlip, clip_baseline };

const char* to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);

struct ModelConfig {
    ModelKind kind = ModelKind::occlip;
    TextEncoderConfig text;
    VisionEncoderConfig vision;
    BindingConfig binding;
    MixCoefficients coefficients;
    LossConfig loss;
    int baseline_context_length = 77;
    int baseline_embed_dim = 64;

    /// Desk-scale defaults; large() raises the binding and relation widths.
    static ModelConfig desk();
    static ModelConfig large();

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

/// Caption and its scene graph; the baseline reads the caption, OC-CLIP the
/// graph.
struct TextQuery {
    std::string caption;
    SceneGraph graph;
};

/// Anything that scores images against text.
class Scorer {
public:
    virtual ~Scorer() = default;
    /// Entry (j, i) = S(image j, text i).
    virtual Matrix<double> score_matrix(const std::vector<Image>& images, const std::vector<TextQuery>& texts) const = 0;
    /// S(image j, text j).
    virtual std::vector<double> score_pairs(const std::vector<Image>& images,
                                            const std::vector<TextQuery>& texts) const = 0;
};

/// Variable-size graphs padded to the batch maximum. Phrases are
/// deduplicated so each distinct phrase is encoded once.
struct GraphBatch {
    std::vector<std::string> node_phrases;
    std::vector<std::string> relation_phrases;
    std::vector<Index> node_slots;           // G*Mmax entries, index into node_phrases or -1 for padding
    std::vector<std::uint8_t> node_mask;     // G*Mmax
    std::vector<int> node_counts;
    std::vector<std::vector<EdgeRef>> edges;  // relation indexes relation_phrases
    Index max_nodes = 0;

    Index num_graphs() const { return static_cast<Index>(node_counts.size()); }
};

/// Throws Error(InvalidGraph) for graphs without nodes.
GraphBatch assemble_batch(const std::vector<SceneGraph>& graphs);

/// Stacked patch pixels, (B*N) x patch_dim.
template <typename T>
Matrix<T> stack_images(const std::vector<Image>& images, const VisionEncoderConfig& cfg);

template <typename T>
struct LossOutput {
    Var<T> total;
    LossReport report;
};

template <typename T>
class OcClipModel : public Scorer {
public:
    using Scalar = T;
    OcClipModel(const ModelConfig& cfg, const WorldVocab& vocab, std::uint64_t seed);

    nn::ParameterSet<T>& params() { return params_; }
    const nn::ParameterSet<T>& params() const { return params_; }
    const ModelConfig& config() const { return cfg_; }

    ScoringGraphs<T> encode_graphs(const GraphBatch& batch) const;

    /// I x G structured scores.
    Var<T> score_matrix(const Matrix<T>& pixels, Index num_images, const GraphBatch& graphs) const;
    /// I x 1 scores of image j with graph j.
    Var<T> score_diagonal(const Matrix<T>& pixels, Index num_images, const GraphBatch& graphs) const;

    /// L_itc over all B^2 pairs plus L_rel on the diagonal pairs.
    LossOutput<T> loss(const std::vector<Image>& images, const std::vector<SceneGraph>& graphs,
                       const std::vector<std::string>& captions, std::uint64_t perturb_seed) const;

    Var<T> logit_scale() const;
    /// Keeps the learned logit scale within its maximum.
    void after_step();

    SlotSet bind(const Image& image, const SceneGraph& graph) const;
    ScoreBreakdown breakdown(const Image& image, const SceneGraph& graph) const;
    MixCoefficients coefficients() const { return scorer_.coefficients(); }
    std::size_t zero_norm_relations() const { return scorer_.zero_norm_count(); }

    Matrix<double> score_matrix(const std::vector<Image>& images, const std::vector<TextQuery>& texts) const override;
    std::vector<double> score_pairs(const std::vector<Image>& images,
                                    const std::vector<TextQuery>& texts) const override;

    const PhraseEncoder<T>& text() const { return text_; }
    const VisionEncoder<T>& vision() const { return vision_; }
    const BindingModule<T>& binding() const { return binding_; }
    const RelationScorer<T>& scorer() const { return scorer_; }

private:
    Var<T> slots_for(const Matrix<T>& pixels, Index num_images, const ScoringGraphs<T>& graphs, bool all_pairs) const;

    ModelConfig cfg_;
    nn::ParameterSet<T> params_;
    std::shared_ptr<const Tokenizer> tokenizer_;
    PhraseEncoder<T> text_;
    VisionEncoder<T> vision_;
    BindingModule<T> binding_;
    RelationScorer<T> scorer_;
    Var<T> logit_scale_raw_;
};

template <typename T>
class BaselineModel : public Scorer {
public:
    using Scalar = T;
    BaselineModel(const ModelConfig& cfg, const WorldVocab& vocab, std::uint64_t seed);

    nn::ParameterSet<T>& params() { return params_; }
    const nn::ParameterSet<T>& params() const { return params_; }
    const ModelConfig& config() const { return cfg_; }

    /// B x embed_dim unit image embeddings.
    Var<T> image_embeddings(const Matrix<T>& pixels, Index num_images) const;
    Var<T> caption_embeddings(const std::vector<std::string>& captions) const;

    LossOutput<T> loss(const std::vector<Image>& images, const std::vector<SceneGraph>& graphs,
                       const std::vector<std::string>& captions, std::uint64_t perturb_seed) const;

    Var<T> logit_scale() const;
    void after_step();

    Matrix<double> score_matrix(const std::vector<Image>& images, const std::vector<TextQuery>& texts) const override;
    std::vector<double> score_pairs(const std::vector<Image>& images,
                                    const std::vector<TextQuery>& texts) const override;

    const CaptionEncoder<T>& text() const { return text_; }

private:
    ModelConfig cfg_;
    nn::ParameterSet<T> params_;
    std::shared_ptr<const Tokenizer> tokenizer_;
    CaptionEncoder<T> text_;
    VisionEncoder<T> vision_;
    nn::Linear<T> image_projection_;
    Var<T> logit_scale_raw_;
};

}  // namespace occlip
