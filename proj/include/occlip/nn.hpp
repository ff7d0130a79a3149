#pragma once

// Parameter registry and the small set of layers the encoders and the
// binding module are built from.

#include "occlip/autograd.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace occlip::nn {

using ag::Index;
using ag::Matrix;
using ag::Var;

/// Optimizer parameter groups; each group gets its own learning-rate
/// multiplier and warmup length.
enum class ParamGroup { binding, text, vision };

const char* to_string(ParamGroup group);

template <typename T>
struct Parameter {
    std::string name;
    Var<T> var;
    ParamGroup group = ParamGroup::binding;
    bool decay = true;
};

/// Owns every trainable tensor of a model, addressable by name.
template <typename T>
class ParameterSet {
public:
    Var<T> add(std::string name, Matrix<T> init, ParamGroup group, bool decay);

    std::vector<Parameter<T>>& entries() { return entries_; }
    const std::vector<Parameter<T>>& entries() const { return entries_; }

    const Parameter<T>* find(const std::string& name) const;
    Parameter<T>* find(const std::string& name);

    std::size_t scalar_count() const;
    void zero_grad();

private:
    std::vector<Parameter<T>> entries_;
};

/// Deterministic initializer shared by all layers of one model.
class Initializer {
public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}

    template <typename T>
    Matrix<T> normal(Index rows, Index cols, double stddev)
    {
        std::normal_distribution<double> dist(0.0, stddev);
        Matrix<T> m(rows, cols);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng_));
        return m;
    }

private:
    std::mt19937_64 rng_;
};

template <typename T>
struct Linear {
    Var<T> weight;  // in x out
    Var<T> bias;    // 1 x out, undefined when bias-free

    Linear() = default;
    Linear(ParameterSet<T>& params, Initializer& init, const std::string& name, Index in, Index out, ParamGroup group,
           bool with_bias = true, double gain = 1.0);

    Var<T> operator()(const Var<T>& x) const;
};

template <typename T>
struct LayerNorm {
    Var<T> gain;
    Var<T> bias;

    LayerNorm() = default;
    LayerNorm(ParameterSet<T>& params, const std::string& name, Index width, ParamGroup group);

    Var<T> operator()(const Var<T>& x) const;
};

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
template <typename T>
struct TransformerBlock {
    LayerNorm<T> ln_attn;
    Linear<T> qkv;
    Linear<T> attn_out;
    LayerNorm<T> ln_mlp;
    Linear<T> fc_in;
    Linear<T> fc_out;
    Index heads = 1;

    TransformerBlock() = default;
    TransformerBlock(ParameterSet<T>& params, Initializer& init, const std::string& name, Index width, Index heads,
                     Index mlp_ratio, ParamGroup group, int depth_for_scaling);

    /// x holds num_seq sequences of seq_len rows.
    Var<T> operator()(const Var<T>& x, Index num_seq, Index seq_len, bool causal) const;
};

}  // namespace occlip::nn
