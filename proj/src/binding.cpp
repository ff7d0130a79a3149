#include "occlip/binding.hpp"

#include "occlip/errors.hpp"

#include <cmath>

namespace occlip {

BindingConfig BindingConfig::desk()
{
    return BindingConfig{};
}

BindingConfig BindingConfig::large()
{
    BindingConfig c;
    c.d_bind = 256;
    return c;
}

void BindingConfig::validate() const
{
    auto require = [](bool ok, const char* what) {
        if (!ok) throw Error(ErrorCode::Validation, what);
    };
    require(d_bind > 0, "binding.d_bind must be positive");
    require(num_default_tokens >= 0, "binding.num_default_tokens must be non-negative");
    require(pre_self_attn_layers >= 0, "binding.pre_self_attn_layers must be non-negative");
    require(pre_self_attn_heads > 0 && d_bind % pre_self_attn_heads == 0,
            "binding.d_bind must be divisible by pre_self_attn_heads");
    require(cross_attn_heads > 0 && d_bind % cross_attn_heads == 0,
            "binding.d_bind must be divisible by cross_attn_heads");
    require(mlp_ratio >= 1, "binding.mlp_ratio must be positive");
}

nlohmann::json BindingConfig::to_json() const
{
    return {{"d_bind", d_bind},
            {"num_default_tokens", num_default_tokens},
            {"pre_self_attn_layers", pre_self_attn_layers},
            {"pre_self_attn_heads", pre_self_attn_heads},
            {"mlp_ratio", mlp_ratio},
            {"cross_attn_heads", cross_attn_heads},
            {"competitive", competitive}};
}

BindingConfig BindingConfig::from_json(const nlohmann::json& j)
{
    BindingConfig c;
    c.d_bind = j.value("d_bind", c.d_bind);
    c.num_default_tokens = j.value("num_default_tokens", c.num_default_tokens);
    c.pre_self_attn_layers = j.value("pre_self_attn_layers", c.pre_self_attn_layers);
    c.pre_self_attn_heads = j.value("pre_self_attn_heads", c.pre_self_attn_heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.cross_attn_heads = j.value("cross_attn_heads", c.cross_attn_heads);
    c.competitive = j.value("competitive", c.competitive);
    return c;
}

template <typename T>
BindingModule<T>::BindingModule(nn::ParameterSet<T>& params, nn::Initializer& init, const BindingConfig& cfg,
                                int d_obj, int vision_width)
    : cfg_(cfg)
{
    cfg_.validate();
    if (d_obj <= 0 || vision_width <= 0) throw Error(ErrorCode::Validation, "binding input widths must be positive");
    const auto g = nn::ParamGroup::binding;
    in_proj_ = nn::Linear<T>(params, init, "binding.in_proj", vision_width, cfg.d_bind, g);
    ln_in_ = nn::LayerNorm<T>(params, "binding.ln_in", cfg.d_bind, g);
    for (int l = 0; l < cfg.pre_self_attn_layers; ++l) {
        blocks_.emplace_back(params, init, "binding.block" + std::to_string(l), cfg.d_bind, cfg.pre_self_attn_heads,
                             cfg.mlp_ratio, g, cfg.pre_self_attn_layers);
    }
    ln_kv_ = nn::LayerNorm<T>(params, "binding.ln_kv", cfg.d_bind, g);
    w_q_ = nn::Linear<T>(params, init, "binding.w_q", d_obj, cfg.d_bind, g, false);
    w_k_ = nn::Linear<T>(params, init, "binding.w_k", cfg.d_bind, cfg.d_bind, g, false);
    w_v_ = nn::Linear<T>(params, init, "binding.w_v", cfg.d_bind, cfg.d_bind, g, false);
    if (cfg.num_default_tokens > 0) {
        default_queries_ = params.add("binding.default_queries",
                                      init.normal<T>(cfg.num_default_tokens, cfg.d_bind, 1.0), g, false);
    } else {
        default_queries_ = Var<T>(Matrix<T>(0, cfg.d_bind));
    }
    if (cfg.cross_attn_heads > 1) merge_ = nn::Linear<T>(params, init, "binding.merge", cfg.d_bind, cfg.d_bind, g);
}

template <typename T>
typename BindingModule<T>::KeysValues BindingModule<T>::keys_values(const Var<T>& patches, Index num_images,
                                                                     Index num_keys) const
{
    if (patches.rows() != num_images * num_keys) throw Error(ErrorCode::BadShape, "patch rows != images * keys");
    auto x = ln_in_(in_proj_(patches));
    for (const auto& b : blocks_) x = b(x, num_images, num_keys, false);
    x = ln_kv_(x);
    return KeysValues{w_k_(x), w_v_(x), num_images, num_keys};
}

template <typename T>
Var<T> BindingModule<T>::queries(const Var<T>& node_embeddings) const
{
    return w_q_(node_embeddings);
}

template <typename T>
Var<T> BindingModule<T>::attend(const Var<T>& queries, const std::vector<std::uint8_t>& query_mask, Index num_graphs,
                                Index max_queries, const KeysValues& kv, bool all_pairs, Matrix<T>* attention) const
{
    ag::CrossAttentionLayout layout;
    layout.num_graphs = num_graphs;
    layout.max_queries = max_queries;
    layout.num_images = kv.num_images;
    layout.num_keys = kv.num_keys;
    layout.heads = cfg_.cross_attn_heads;
    layout.competitive = cfg_.competitive;
    layout.all_pairs = all_pairs;
    auto slots = ag::competitive_attention(queries, default_queries_, kv.keys, kv.values, query_mask, layout, attention);
    return merge_.weight.defined() ? merge_(slots) : slots;
}

template <typename T>
SlotSet bind(const BindingModule<T>& module, const Var<T>& node_embeddings, const PatchGrid<T>& patches)
{
    const Index m = node_embeddings.rows();
    const Index n = patches.patches.rows();
    if (m < 1 || n < 1) throw Error(ErrorCode::BadShape, "bind needs at least one node and one patch");
    const auto kv = module.keys_values(patches.patches, 1, n);
    Matrix<T> attn;
    const std::vector<std::uint8_t> mask(static_cast<std::size_t>(m), 1);
    const auto out = module.attend(module.queries(node_embeddings), mask, 1, m, kv, true, &attn);
    SlotSet s;
    s.slots = out.value().topRows(m).template cast<double>();
    s.default_slots = out.value().bottomRows(out.rows() - m).template cast<double>();
    s.attention = attn.template cast<double>();
    return s;
}

std::vector<Matrix<double>> attention_map(const SlotSet& slots, int rows, int cols)
{
    if (rows <= 0 || cols <= 0 || slots.attention.cols() != static_cast<Index>(rows) * cols) {
        throw Error(ErrorCode::ShapeMismatch, "attention width does not match the patch grid");
    }
    std::vector<Matrix<double>> maps;
    for (Index i = 0; i < slots.slots.rows(); ++i) {
        maps.push_back(Eigen::Map<const Matrix<double>>(slots.attention.row(i).data(), rows, cols));
    }
    return maps;
}

template class BindingModule<float>;
template class BindingModule<double>;
template SlotSet bind<float>(const BindingModule<float>&, const Var<float>&, const PatchGrid<float>&);
template SlotSet bind<double>(const BindingModule<double>&, const Var<double>&, const PatchGrid<double>&);

}  // namespace occlip
