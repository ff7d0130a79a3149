#pragma once

// Scene-graph-conditioned binding: node embeddings query the image patches
// through a cross-attention whose softmax runs over the queries, so nodes
// compete for patches. Learned default queries soak up unmentioned content
// and their slots are discarded.

#include "occlip/encoders.hpp"
#include "occlip/nn.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <vector>

namespace occlip {

struct BindingConfig {
    int d_bind = 64;
    int num_default_tokens = 1;
    int pre_self_attn_layers = 2;
    int pre_self_attn_heads = 4;
    int mlp_ratio = 2;
    int cross_attn_heads = 1;
    bool competitive = true;  // false: softmax over keys

    static BindingConfig desk();
    static BindingConfig large();

    void validate() const;
    nlohmann::json to_json() const;
    static BindingConfig from_json(const nlohmann::json& j);
};

/// Slots of one (image, graph) pair.
struct SlotSet {
    Matrix<double> slots;          // M x d_bind, row i bound to node i
    Matrix<double> default_slots;  // N_d x d_bind
    Matrix<double> attention;      // (M + N_d) x N, head-averaged
};

template <typename T>
class BindingModule {
public:
    BindingModule() = default;
    BindingModule(nn::ParameterSet<T>& params, nn::Initializer& init, const BindingConfig& cfg, int d_obj,
                  int vision_width);

    struct KeysValues {
        Var<T> keys;    // (I*N) x d_bind
        Var<T> values;  // (I*N) x d_bind
        Index num_images = 0;
        Index num_keys = 0;
    };

    /// Linear + layer norm on patches, pre-self-attention, final norm, then
    /// the key and value projections.
    KeysValues keys_values(const Var<T>& patches, Index num_images, Index num_keys) const;

    /// W_q applied to node embeddings, (rows) x d_bind.
    Var<T> queries(const Var<T>& node_embeddings) const;

    /// Slots for every (image j, graph i) pair (all_pairs) or for image j
    /// with graph j. Rows per pair: max_queries real slots then N_d default
    /// slots; pairs ordered p = j*G + i.
    Var<T> attend(const Var<T>& queries, const std::vector<std::uint8_t>& query_mask, Index num_graphs,
                  Index max_queries, const KeysValues& kv, bool all_pairs, Matrix<T>* attention = nullptr) const;

    const BindingConfig& config() const { return cfg_; }
    const Var<T>& default_queries() const { return default_queries_; }

private:
    BindingConfig cfg_;
    nn::Linear<T> in_proj_;
    nn::LayerNorm<T> ln_in_;
    std::vector<nn::TransformerBlock<T>> blocks_;
    nn::LayerNorm<T> ln_kv_;
    nn::Linear<T> w_q_;
    nn::Linear<T> w_k_;
    nn::Linear<T> w_v_;
    Var<T> default_queries_;  // N_d x d_bind
    nn::Linear<T> merge_;     // only with more than one head
};

/// Binds one graph's nodes (M x d_obj) to one image's patch grid.
template <typename T>
SlotSet bind(const BindingModule<T>& module, const Var<T>& node_embeddings, const PatchGrid<T>& patches);

/// Each real query's attention row reshaped to the patch grid. Throws
/// Error(ShapeMismatch) when the attention width is not rows*cols.
std::vector<Matrix<double>> attention_map(const SlotSet& slots, int rows, int cols);

}  // namespace occlip
