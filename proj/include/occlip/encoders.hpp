#pragma once

// Small from-scratch transformers: a text encoder producing node and
// relation phrase embeddings (and caption embeddings for the baseline) and a
// ViT producing patch features.

#include "occlip/image.hpp"
#include "occlip/nn.hpp"
#include "occlip/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <memory>
#include <string>
#include <vector>

namespace occlip {

using ag::Index;
using ag::Matrix;
using ag::Var;

struct TextEncoderConfig {
    int vocab_size = 0;  // filled from the tokenizer when 0
    int context_length = 20;
    int num_layers = 2;
    int width = 64;
    int num_heads = 4;
    int mlp_ratio = 2;
    int d_obj = 64;
    int d_rel = 32;

    void validate() const;
    nlohmann::json to_json() const;
    static TextEncoderConfig from_json(const nlohmann::json& j);
};

struct VisionEncoderConfig {
    int image_size = 64;
    int patch_size = 8;
    int width = 64;
    int num_layers = 4;
    int num_heads = 4;
    int mlp_ratio = 2;
    int layer_offset = 2;  // patch features come from layer L - layer_offset

    int grid() const { return image_size / patch_size; }
    int num_patches() const { return grid() * grid(); }
    int patch_dim() const { return patch_size * patch_size * 3; }

    void validate() const;
    nlohmann::json to_json() const;
    static VisionEncoderConfig from_json(const nlohmann::json& j);
};

enum class PhraseHead { node, relation };

/// Patch pixels scaled to [-1, 1], one row per patch in raster order, each
/// row laid out (py, px, channel). Throws Error(BadShape) when the image is
/// not square of side image_size or not divisible by the patch size.
template <typename T>
Matrix<T> patchify(const Image& image, int patch_size);

template <typename T>
struct PatchGrid {
    Var<T> patches;  // N x width
    int rows = 0;
    int cols = 0;
    int source_layer = 0;
};

/// Causal transformer over word tokens; pooled output is the final-norm
/// hidden state of the last content token.
template <typename T>
class TextEncoder {
public:
    TextEncoder() = default;
    TextEncoder(nn::ParameterSet<T>& params, nn::Initializer& init, const TextEncoderConfig& cfg,
                const std::string& name);

    /// n x width pooled states. Sequences run at the batch's longest length;
    /// trailing pads never influence content positions under causal masking.
    Var<T> pooled(const std::vector<Tokenizer::Encoded>& tokens) const;

    const TextEncoderConfig& config() const { return cfg_; }

private:
    TextEncoderConfig cfg_;
    Var<T> token_embedding_;
    Var<T> position_embedding_;
    std::vector<nn::TransformerBlock<T>> blocks_;
    nn::LayerNorm<T> ln_final_;
};

/// Text backbone shared by node and relation phrases, with one linear head
/// per output type.
template <typename T>
class PhraseEncoder {
public:
    PhraseEncoder() = default;
    PhraseEncoder(nn::ParameterSet<T>& params, nn::Initializer& init, const TextEncoderConfig& cfg,
                  std::shared_ptr<const Tokenizer> tokenizer);

    Var<T> encode_phrases(const std::vector<std::string>& phrases, PhraseHead head) const;

    const Tokenizer& tokenizer() const { return *tokenizer_; }

private:
    std::shared_ptr<const Tokenizer> tokenizer_;
    TextEncoder<T> backbone_;
    nn::Linear<T> node_head_;
    nn::Linear<T> relation_head_;
};

/// ViT with a class token. `num_blocks` limits how many layers are built;
/// layers past the feature layer would receive no gradient.
template <typename T>
class VisionEncoder {
public:
    VisionEncoder() = default;
    VisionEncoder(nn::ParameterSet<T>& params, nn::Initializer& init, const VisionEncoderConfig& cfg,
                  const std::string& name, int num_blocks, bool with_final_norm);

    /// pixels: (B*N) x patch_dim. Returns (B*(N+1)) x width after `layers`
    /// blocks; per image the N patch rows come first, then the class token.
    Var<T> tokens(const Matrix<T>& pixels, Index batch, int layers) const;

    /// Patch rows of layer L - layer_offset, (B*N) x width.
    Var<T> patch_features(const Matrix<T>& pixels, Index batch) const;

    /// Final-norm class token after all layers, B x width.
    Var<T> class_features(const Matrix<T>& pixels, Index batch) const;

    int feature_layer() const { return cfg_.num_layers - cfg_.layer_offset; }
    int built_blocks() const { return static_cast<int>(blocks_.size()); }
    const VisionEncoderConfig& config() const { return cfg_; }

private:
    VisionEncoderConfig cfg_;
    nn::Linear<T> patch_embed_;
    Var<T> class_token_;
    Var<T> position_embedding_;
    nn::LayerNorm<T> ln_pre_;
    std::vector<nn::TransformerBlock<T>> blocks_;
    nn::LayerNorm<T> ln_post_;
};

template <typename T>
PatchGrid<T> encode_image_patches(const VisionEncoder<T>& encoder, const Image& image);

/// Caption tower of the single-vector baseline: text transformer, final norm,
/// linear projection, L2 normalization.
template <typename T>
class CaptionEncoder {
public:
    CaptionEncoder() = default;
    CaptionEncoder(nn::ParameterSet<T>& params, nn::Initializer& init, const TextEncoderConfig& cfg,
                   std::shared_ptr<const Tokenizer> tokenizer, int embed_dim);

    /// n x embed_dim, unit rows.
    Var<T> encode(const std::vector<std::string>& captions) const;

private:
    std::shared_ptr<const Tokenizer> tokenizer_;
    TextEncoder<T> backbone_;
    nn::Linear<T> projection_;
};

template <typename T>
std::vector<T> encode_caption_baseline(const CaptionEncoder<T>& encoder, const std::string& caption);

}  // namespace occlip
