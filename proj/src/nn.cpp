#include "occlip/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace occlip::nn {

const char* to_string(ParamGroup group)
{
    switch (group) {
    case ParamGroup::binding: return "binding";
    case ParamGroup::text: return "text";
    case ParamGroup::vision: return "vision";
    }
    return "unknown";
}

template <typename T>
Var<T> ParameterSet<T>::add(std::string name, Matrix<T> init, ParamGroup group, bool decay)
{
    if (find(name)) throw std::logic_error("duplicate parameter name: " + name);
    Var<T> v(std::move(init), true);
    entries_.push_back(Parameter<T>{std::move(name), v, group, decay});
    return v;
}

template <typename T>
const Parameter<T>* ParameterSet<T>::find(const std::string& name) const
{
    for (const auto& e : entries_) {
        if (e.name == name) return &e;
    }
    return nullptr;
}

template <typename T>
Parameter<T>* ParameterSet<T>::find(const std::string& name)
{
    for (auto& e : entries_) {
        if (e.name == name) return &e;
    }
    return nullptr;
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const
{
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.var.value().size());
    return n;
}

template <typename T>
void ParameterSet<T>::zero_grad()
{
    for (auto& e : entries_) e.var.zero_grad();
}

template <typename T>
Linear<T>::Linear(ParameterSet<T>& params, Initializer& init, const std::string& name, Index in, Index out,
                  ParamGroup group, bool with_bias, double gain)
{
    weight = params.add(name + ".weight", init.normal<T>(in, out, gain / std::sqrt(static_cast<double>(in))), group,
                        true);
    if (with_bias) bias = params.add(name + ".bias", Matrix<T>::Zero(1, out), group, false);
}

template <typename T>
Var<T> Linear<T>::operator()(const Var<T>& x) const
{
    auto y = ag::matmul(x, weight);
    return bias.defined() ? ag::add_row(y, bias) : y;
}

template <typename T>
LayerNorm<T>::LayerNorm(ParameterSet<T>& params, const std::string& name, Index width, ParamGroup group)
{
    gain = params.add(name + ".gain", Matrix<T>::Ones(1, width), group, false);
    bias = params.add(name + ".bias", Matrix<T>::Zero(1, width), group, false);
}

template <typename T>
Var<T> LayerNorm<T>::operator()(const Var<T>& x) const
{
    return ag::layer_norm(x, gain, bias);
}

template <typename T>
TransformerBlock<T>::TransformerBlock(ParameterSet<T>& params, Initializer& init, const std::string& name,
                                      Index width, Index num_heads, Index mlp_ratio, ParamGroup group,
                                      int depth_for_scaling)
    : heads(num_heads)
{
    if (width % num_heads != 0) throw std::invalid_argument(name + ": width not divisible by heads");
    const double residual_gain = 1.0 / std::sqrt(2.0 * std::max(1, depth_for_scaling));
    ln_attn = LayerNorm<T>(params, name + ".ln_attn", width, group);
    qkv = Linear<T>(params, init, name + ".qkv", width, 3 * width, group);
    attn_out = Linear<T>(params, init, name + ".attn_out", width, width, group, true, residual_gain);
    ln_mlp = LayerNorm<T>(params, name + ".ln_mlp", width, group);
    fc_in = Linear<T>(params, init, name + ".fc_in", width, mlp_ratio * width, group);
    fc_out = Linear<T>(params, init, name + ".fc_out", mlp_ratio * width, width, group, true, residual_gain);
}

template <typename T>
Var<T> TransformerBlock<T>::operator()(const Var<T>& x, Index num_seq, Index seq_len, bool causal) const
{
    auto h = ag::self_attention(qkv(ln_attn(x)), num_seq, seq_len, heads, causal);
    auto y = ag::add(x, attn_out(h));
    auto m = fc_out(ag::gelu(fc_in(ln_mlp(y))));
    return ag::add(y, m);
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct TransformerBlock<float>;
template struct TransformerBlock<double>;

}  // namespace occlip::nn
