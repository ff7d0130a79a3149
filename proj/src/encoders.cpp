#include "occlip/encoders.hpp"

#include "occlip/errors.hpp"

#include <algorithm>
#include <cmath>

namespace occlip {

namespace {

void require(bool ok, const std::string& what)
{
    if (!ok) throw Error(ErrorCode::Validation, what);
}

}  // namespace

void TextEncoderConfig::validate() const
{
    require(vocab_size >= 2, "text.vocab_size must be at least 2");
    require(context_length >= 1, "text.context_length must be positive");
    require(num_layers >= 0, "text.num_layers must be non-negative");
    require(width > 0 && num_heads > 0 && width % num_heads == 0, "text.width must be a positive multiple of heads");
    require(mlp_ratio >= 1, "text.mlp_ratio must be positive");
    require(d_obj > 0 && d_rel > 0, "text.d_obj and text.d_rel must be positive");
}

nlohmann::json TextEncoderConfig::to_json() const
{
    return {{"vocab_size", vocab_size}, {"context_length", context_length}, {"num_layers", num_layers},
            {"width", width},           {"num_heads", num_heads},           {"mlp_ratio", mlp_ratio},
            {"d_obj", d_obj},           {"d_rel", d_rel}};
}

TextEncoderConfig TextEncoderConfig::from_json(const nlohmann::json& j)
{
    TextEncoderConfig c;
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.context_length = j.value("context_length", c.context_length);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.width = j.value("width", c.width);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.d_obj = j.value("d_obj", c.d_obj);
    c.d_rel = j.value("d_rel", c.d_rel);
    return c;
}

void VisionEncoderConfig::validate() const
{
    require(patch_size > 0 && image_size > 0, "vision sizes must be positive");
    if (image_size % patch_size != 0) {
        throw Error(ErrorCode::BadShape, "image_size must be divisible by patch_size");
    }
    require(width > 0 && num_heads > 0 && width % num_heads == 0, "vision.width must be a positive multiple of heads");
    require(num_layers >= 0 && mlp_ratio >= 1, "vision.num_layers/mlp_ratio out of range");
    require(layer_offset >= 0 && layer_offset <= num_layers, "vision.layer_offset must be in [0, num_layers]");
}

nlohmann::json VisionEncoderConfig::to_json() const
{
    return {{"image_size", image_size}, {"patch_size", patch_size}, {"width", width},
            {"num_layers", num_layers}, {"num_heads", num_heads},   {"mlp_ratio", mlp_ratio},
            {"layer_offset", layer_offset}};
}

VisionEncoderConfig VisionEncoderConfig::from_json(const nlohmann::json& j)
{
    VisionEncoderConfig c;
    c.image_size = j.value("image_size", c.image_size);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.width = j.value("width", c.width);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.layer_offset = j.value("layer_offset", c.layer_offset);
    return c;
}

template <typename T>
Matrix<T> patchify(const Image& image, int patch_size)
{
    if (patch_size <= 0 || image.height % patch_size != 0 || image.width % patch_size != 0) {
        throw Error(ErrorCode::BadShape, "image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                             " not divisible by patch size " + std::to_string(patch_size));
    }
    const int gr = image.height / patch_size;
    const int gc = image.width / patch_size;
    Matrix<T> out(gr * gc, patch_size * patch_size * 3);
    for (int r = 0; r < gr; ++r) {
        for (int c = 0; c < gc; ++c) {
            T* row = out.row(r * gc + c).data();
            for (int py = 0; py < patch_size; ++py) {
                for (int px = 0; px < patch_size; ++px) {
                    for (int ch = 0; ch < 3; ++ch) {
                        *row++ = static_cast<T>(image.at(r * patch_size + py, c * patch_size + px, ch)) / T(127.5) - T(1);
                    }
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

template <typename T>
TextEncoder<T>::TextEncoder(nn::ParameterSet<T>& params, nn::Initializer& init, const TextEncoderConfig& cfg,
                            const std::string& name)
    : cfg_(cfg)
{
    cfg_.validate();
    token_embedding_ =
        params.add(name + ".token_embedding", init.normal<T>(cfg.vocab_size, cfg.width, 0.02), nn::ParamGroup::text, true);
    position_embedding_ = params.add(name + ".position_embedding", init.normal<T>(cfg.context_length, cfg.width, 0.01),
                                     nn::ParamGroup::text, false);
    for (int l = 0; l < cfg.num_layers; ++l) {
        blocks_.emplace_back(params, init, name + ".block" + std::to_string(l), cfg.width, cfg.num_heads, cfg.mlp_ratio,
                             nn::ParamGroup::text, cfg.num_layers);
    }
    ln_final_ = nn::LayerNorm<T>(params, name + ".ln_final", cfg.width, nn::ParamGroup::text);
}

template <typename T>
Var<T> TextEncoder<T>::pooled(const std::vector<Tokenizer::Encoded>& tokens) const
{
    const Index n = static_cast<Index>(tokens.size());
    if (n == 0) return Var<T>(Matrix<T>(0, cfg_.width));
    int len = 1;
    for (const auto& t : tokens) len = std::max(len, t.length);
    len = std::min(len, cfg_.context_length);

    std::vector<Index> ids;
    std::vector<Index> pos;
    ids.reserve(static_cast<std::size_t>(n * len));
    pos.reserve(ids.capacity());
    for (const auto& t : tokens) {
        for (int i = 0; i < len; ++i) {
            ids.push_back(static_cast<std::size_t>(i) < t.ids.size() ? t.ids[static_cast<std::size_t>(i)] : Tokenizer::kPad);
            pos.push_back(i);
        }
    }
    for (Index id : ids) {
        if (id < 0 || id >= cfg_.vocab_size) throw Error(ErrorCode::BadShape, "token id outside the embedding table");
    }
    auto x = ag::add(ag::gather_rows(token_embedding_, std::move(ids)), ag::gather_rows(position_embedding_, std::move(pos)));
    for (const auto& b : blocks_) x = b(x, n, len, true);

    std::vector<Index> last;
    last.reserve(static_cast<std::size_t>(n));
    for (Index s = 0; s < n; ++s) {
        const int l = std::clamp(tokens[static_cast<std::size_t>(s)].length, 1, len);
        last.push_back(s * len + l - 1);
    }
    return ln_final_(ag::gather_rows(x, std::move(last)));
}

template <typename T>
PhraseEncoder<T>::PhraseEncoder(nn::ParameterSet<T>& params, nn::Initializer& init, const TextEncoderConfig& cfg,
                                std::shared_ptr<const Tokenizer> tokenizer)
    : tokenizer_(std::move(tokenizer))
{
    TextEncoderConfig c = cfg;
    if (c.vocab_size == 0) c.vocab_size = tokenizer_->size();
    backbone_ = TextEncoder<T>(params, init, c, "text");
    node_head_ = nn::Linear<T>(params, init, "text.node_head", c.width, c.d_obj, nn::ParamGroup::text, false);
    relation_head_ = nn::Linear<T>(params, init, "text.relation_head", c.width, c.d_rel, nn::ParamGroup::text, false);
}

template <typename T>
Var<T> PhraseEncoder<T>::encode_phrases(const std::vector<std::string>& phrases, PhraseHead head) const
{
    std::vector<Tokenizer::Encoded> tokens;
    tokens.reserve(phrases.size());
    for (const auto& p : phrases) tokens.push_back(tokenizer_->encode(p, backbone_.config().context_length));
    const auto h = backbone_.pooled(tokens);
    return head == PhraseHead::node ? node_head_(h) : relation_head_(h);
}

// ---------------------------------------------------------------------------

template <typename T>
VisionEncoder<T>::VisionEncoder(nn::ParameterSet<T>& params, nn::Initializer& init, const VisionEncoderConfig& cfg,
                                const std::string& name, int num_blocks, bool with_final_norm)
    : cfg_(cfg)
{
    cfg_.validate();
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.width));
    patch_embed_ = nn::Linear<T>(params, init, name + ".patch_embed", cfg.patch_dim(), cfg.width,
                                 nn::ParamGroup::vision, false);
    class_token_ = params.add(name + ".class_token", init.normal<T>(1, cfg.width, scale), nn::ParamGroup::vision, false);
    position_embedding_ = params.add(name + ".position_embedding", init.normal<T>(cfg.num_patches() + 1, cfg.width, scale),
                                     nn::ParamGroup::vision, false);
    ln_pre_ = nn::LayerNorm<T>(params, name + ".ln_pre", cfg.width, nn::ParamGroup::vision);
    for (int l = 0; l < num_blocks; ++l) {
        blocks_.emplace_back(params, init, name + ".block" + std::to_string(l), cfg.width, cfg.num_heads, cfg.mlp_ratio,
                             nn::ParamGroup::vision, cfg.num_layers);
    }
    if (with_final_norm) ln_post_ = nn::LayerNorm<T>(params, name + ".ln_post", cfg.width, nn::ParamGroup::vision);
}

template <typename T>
Var<T> VisionEncoder<T>::tokens(const Matrix<T>& pixels, Index batch, int layers) const
{
    const Index n = cfg_.num_patches();
    if (pixels.rows() != batch * n || pixels.cols() != cfg_.patch_dim()) {
        throw Error(ErrorCode::BadShape, "pixel matrix does not match the patch layout");
    }
    if (layers > built_blocks()) throw Error(ErrorCode::BadShape, "requested more vision layers than were built");
    auto emb = patch_embed_(Var<T>(pixels));
    // append the class token row once, then lay out [patches; cls] per image
    auto all = ag::concat_rows<T>({emb, class_token_});
    std::vector<Index> order;
    std::vector<Index> pos;
    order.reserve(static_cast<std::size_t>(batch * (n + 1)));
    pos.reserve(order.capacity());
    for (Index b = 0; b < batch; ++b) {
        for (Index i = 0; i < n; ++i) {
            order.push_back(b * n + i);
            pos.push_back(i + 1);
        }
        order.push_back(batch * n);
        pos.push_back(0);
    }
    auto x = ag::add(ag::gather_rows(all, std::move(order)), ag::gather_rows(position_embedding_, std::move(pos)));
    x = ln_pre_(x);
    for (int l = 0; l < layers; ++l) x = blocks_[static_cast<std::size_t>(l)](x, batch, n + 1, false);
    return x;
}

template <typename T>
Var<T> VisionEncoder<T>::patch_features(const Matrix<T>& pixels, Index batch) const
{
    const Index n = cfg_.num_patches();
    auto x = tokens(pixels, batch, feature_layer());
    std::vector<Index> rows;
    rows.reserve(static_cast<std::size_t>(batch * n));
    for (Index b = 0; b < batch; ++b) {
        for (Index i = 0; i < n; ++i) rows.push_back(b * (n + 1) + i);
    }
    return ag::gather_rows(x, std::move(rows));
}

template <typename T>
Var<T> VisionEncoder<T>::class_features(const Matrix<T>& pixels, Index batch) const
{
    const Index n = cfg_.num_patches();
    auto x = tokens(pixels, batch, cfg_.num_layers);
    std::vector<Index> rows;
    for (Index b = 0; b < batch; ++b) rows.push_back(b * (n + 1) + n);
    auto cls = ag::gather_rows(x, std::move(rows));
    return ln_post_.gain.defined() ? ln_post_(cls) : cls;
}

template <typename T>
PatchGrid<T> encode_image_patches(const VisionEncoder<T>& encoder, const Image& image)
{
    const auto& cfg = encoder.config();
    if (image.height != cfg.image_size || image.width != cfg.image_size) {
        throw Error(ErrorCode::BadShape, "image size does not match the vision encoder");
    }
    PatchGrid<T> g;
    g.patches = encoder.patch_features(patchify<T>(image, cfg.patch_size), 1);
    g.rows = cfg.grid();
    g.cols = cfg.grid();
    g.source_layer = encoder.feature_layer();
    return g;
}

// ---------------------------------------------------------------------------

template <typename T>
CaptionEncoder<T>::CaptionEncoder(nn::ParameterSet<T>& params, nn::Initializer& init, const TextEncoderConfig& cfg,
                                  std::shared_ptr<const Tokenizer> tokenizer, int embed_dim)
    : tokenizer_(std::move(tokenizer))
{
    TextEncoderConfig c = cfg;
    if (c.vocab_size == 0) c.vocab_size = tokenizer_->size();
    backbone_ = TextEncoder<T>(params, init, c, "caption_text");
    projection_ = nn::Linear<T>(params, init, "caption_text.projection", c.width, embed_dim, nn::ParamGroup::text, false);
}

template <typename T>
Var<T> CaptionEncoder<T>::encode(const std::vector<std::string>& captions) const
{
    std::vector<Tokenizer::Encoded> tokens;
    tokens.reserve(captions.size());
    for (const auto& c : captions) tokens.push_back(tokenizer_->encode(c, backbone_.config().context_length));
    return ag::row_normalize(projection_(backbone_.pooled(tokens)));
}

template <typename T>
std::vector<T> encode_caption_baseline(const CaptionEncoder<T>& encoder, const std::string& caption)
{
    ag::NoGradGuard guard;
    const auto v = encoder.encode({caption});
    return std::vector<T>(v.value().data(), v.value().data() + v.value().size());
}

#define OCCLIP_INSTANTIATE(T)                                                                  \
    template Matrix<T> patchify<T>(const Image&, int);                                          \
    template class TextEncoder<T>;                                                             \
    template class PhraseEncoder<T>;                                                           \
    template class VisionEncoder<T>;                                                           \
    template class CaptionEncoder<T>;                                                          \
    template PatchGrid<T> encode_image_patches<T>(const VisionEncoder<T>&, const Image&);      \
    template std::vector<T> encode_caption_baseline<T>(const CaptionEncoder<T>&, const std::string&);

OCCLIP_INSTANTIATE(float)
OCCLIP_INSTANTIATE(double)
#undef OCCLIP_INSTANTIATE

}  // namespace occlip
