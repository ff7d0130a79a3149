#pragma once

// Brute-force double-precision reference for the binding module and the
// structured score. Plain loops over nested vectors; nothing here calls the
// library's math so the two implementations can disagree.

#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace ref {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major, rows of equal length
using Weights = std::map<std::string, Mat>;

inline std::size_t rows(const Mat& a) { return a.size(); }
inline std::size_t cols(const Mat& a) { return a.empty() ? 0 : a[0].size(); }

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, Vec(c, 0.0)); }

inline const Mat& get(const Weights& w, const std::string& name)
{
    auto it = w.find(name);
    if (it == w.end()) throw std::out_of_range("reference: missing weight " + name);
    return it->second;
}

inline bool has(const Weights& w, const std::string& name) { return w.count(name) > 0; }

inline Mat matmul(const Mat& a, const Mat& b)
{
    Mat out = zeros(rows(a), cols(b));
    for (std::size_t i = 0; i < rows(a); ++i)
        for (std::size_t j = 0; j < cols(b); ++j) {
            double s = 0;
            for (std::size_t k = 0; k < cols(a); ++k) s += a[i][k] * b[k][j];
            out[i][j] = s;
        }
    return out;
}

// x W (+ b) with W stored in x out.
inline Mat linear(const Mat& x, const Weights& w, const std::string& name)
{
    Mat y = matmul(x, get(w, name + ".weight"));
    if (has(w, name + ".bias")) {
        const Vec& b = get(w, name + ".bias")[0];
        for (auto& row : y)
            for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
    }
    return y;
}

inline Mat layer_norm(const Mat& x, const Weights& w, const std::string& name)
{
    const Vec& g = get(w, name + ".gain")[0];
    const Vec& b = get(w, name + ".bias")[0];
    Mat out = x;
    for (auto& row : out) {
        const double n = static_cast<double>(row.size());
        double mu = 0;
        for (double v : row) mu += v;
        mu /= n;
        double var = 0;
        for (double v : row) var += (v - mu) * (v - mu);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mu) * inv * g[j] + b[j];
    }
    return out;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline Mat add(const Mat& a, const Mat& b)
{
    Mat out = a;
    for (std::size_t i = 0; i < rows(a); ++i)
        for (std::size_t j = 0; j < cols(a); ++j) out[i][j] += b[i][j];
    return out;
}

// Multi-head self-attention over one sequence given the fused qkv rows.
inline Mat self_attention(const Mat& qkv, std::size_t heads)
{
    const std::size_t n = rows(qkv), width = cols(qkv) / 3, dh = width / heads;
    Mat out = zeros(n, width);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
            Vec logits(n);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0;
                for (std::size_t d = 0; d < dh; ++d) s += qkv[i][h * dh + d] * qkv[j][width + h * dh + d];
                logits[j] = s / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, logits[j]);
            }
            double z = 0;
            for (double& l : logits) z += (l = std::exp(l - mx));
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t d = 0; d < dh; ++d) out[i][h * dh + d] += logits[j] / z * qkv[j][2 * width + h * dh + d];
        }
    }
    return out;
}

inline Mat transformer_block(const Mat& x, const Weights& w, const std::string& name, std::size_t heads)
{
    Mat h = self_attention(linear(layer_norm(x, w, name + ".ln_attn"), w, name + ".qkv"), heads);
    Mat y = add(x, linear(h, w, name + ".attn_out"));
    Mat m = linear(layer_norm(y, w, name + ".ln_mlp"), w, name + ".fc_in");
    for (auto& row : m)
        for (double& v : row) v = gelu(v);
    return add(y, linear(m, w, name + ".fc_out"));
}

struct BindingSpec {
    std::size_t pre_self_attn_layers = 0;
    std::size_t pre_self_attn_heads = 1;
    std::size_t cross_heads = 1;
    bool competitive = true;
};

struct BindingResult {
    Mat slots;      // M rows
    Mat defaults;   // N_d rows
    Mat attention;  // (M + N_d) x N, head-averaged
};

// nodes: M x d_obj for one graph, patches: N x vision width for one image.
inline BindingResult bind(const Mat& nodes, const Mat& patches, const Weights& w, const BindingSpec& spec)
{
    Mat x = layer_norm(linear(patches, w, "binding.in_proj"), w, "binding.ln_in");
    for (std::size_t l = 0; l < spec.pre_self_attn_layers; ++l)
        x = transformer_block(x, w, "binding.block" + std::to_string(l), spec.pre_self_attn_heads);
    x = layer_norm(x, w, "binding.ln_kv");
    const Mat k = matmul(x, get(w, "binding.w_k.weight"));
    const Mat v = matmul(x, get(w, "binding.w_v.weight"));
    Mat q = matmul(nodes, get(w, "binding.w_q.weight"));
    const std::size_t m = rows(q);
    if (has(w, "binding.default_queries"))
        for (const auto& row : get(w, "binding.default_queries")) q.push_back(row);

    const std::size_t r = rows(q), n = rows(k), d = cols(q), dh = d / spec.cross_heads;
    Mat slots = zeros(r, cols(v));
    Mat attention = zeros(r, n);
    for (std::size_t h = 0; h < spec.cross_heads; ++h) {
        Mat a = zeros(r, n);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0;
                for (std::size_t c = 0; c < dh; ++c) s += q[i][h * dh + c] * k[j][h * dh + c];
                a[i][j] = s / std::sqrt(static_cast<double>(dh));
            }
        if (spec.competitive) {
            for (std::size_t j = 0; j < n; ++j) {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t i = 0; i < r; ++i) mx = std::max(mx, a[i][j]);
                double z = 0;
                for (std::size_t i = 0; i < r; ++i) z += (a[i][j] = std::exp(a[i][j] - mx));
                for (std::size_t i = 0; i < r; ++i) a[i][j] /= z;
            }
        } else {
            for (auto& row : a) {
                double mx = -std::numeric_limits<double>::infinity();
                for (double l : row) mx = std::max(mx, l);
                double z = 0;
                for (double& l : row) z += (l = std::exp(l - mx));
                for (double& l : row) l /= z;
            }
        }
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                attention[i][j] += a[i][j] / static_cast<double>(spec.cross_heads);
                for (std::size_t c = 0; c < dh; ++c) slots[i][h * dh + c] += a[i][j] * v[j][h * dh + c];
            }
    }
    if (spec.cross_heads > 1) slots = linear(slots, w, "binding.merge");

    BindingResult out;
    out.slots.assign(slots.begin(), slots.begin() + static_cast<std::ptrdiff_t>(m));
    out.defaults.assign(slots.begin() + static_cast<std::ptrdiff_t>(m), slots.end());
    out.attention = attention;
    return out;
}

inline double cosine(const Vec& a, const Vec& b)
{
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline Vec mlp(const Vec& in, const Weights& w, const std::string& name)
{
    Mat h = linear(Mat{in}, w, name + ".fc1");
    for (double& v : h[0]) v = gelu(v);
    return linear(h, w, name + ".fc2")[0];
}

inline double relation_score(const Vec& r, const Vec& subject, const Vec& object, const Weights& w)
{
    Vec rs = r, ro = r;
    rs.insert(rs.end(), subject.begin(), subject.end());
    ro.insert(ro.end(), object.begin(), object.end());
    const Vec fs = mlp(rs, w, "score.f_s");
    const Vec fo = mlp(ro, w, "score.f_o");
    Vec f(fs.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = fs[i] + fo[i];
    return cosine(r, f);
}

inline double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }

struct Edge {
    std::size_t relation, subject, object;
};

// (alpha * sum_i cos(N_i, S_i) + beta * sum_k f(r_k, S_s, S_o)) / (alpha M + beta P)
inline double structured_score(const Mat& nodes, const Mat& relations, const std::vector<Edge>& edges, const Mat& slots,
                               const Weights& w, double alpha, double beta)
{
    double obj = 0;
    for (std::size_t i = 0; i < rows(nodes); ++i) obj += cosine(nodes[i], slots[i]);
    double rel = 0;
    for (const auto& e : edges) rel += relation_score(relations[e.relation], slots[e.subject], slots[e.object], w);
    return (alpha * obj + beta * rel) / (alpha * static_cast<double>(rows(nodes)) + beta * static_cast<double>(edges.size()));
}

inline double structured_score(const Mat& nodes, const Mat& relations, const std::vector<Edge>& edges, const Mat& slots,
                               const Weights& w)
{
    return structured_score(nodes, relations, edges, slots, w, softplus(get(w, "score.alpha_raw")[0][0]),
                            softplus(get(w, "score.beta_raw")[0][0]));
}

// Symmetric InfoNCE over S (rows images, columns graphs) at logit scale s.
inline double itc_loss(const Mat& scores, double s)
{
    const std::size_t b = rows(scores);
    double total = 0;
    for (std::size_t i = 0; i < b; ++i) {
        double zc = 0, zr = 0;
        for (std::size_t j = 0; j < b; ++j) {
            zc += std::exp(s * scores[j][i]);
            zr += std::exp(s * scores[i][j]);
        }
        total -= (s * scores[i][i] - std::log(zc)) + (s * scores[i][i] - std::log(zr));
    }
    return total / static_cast<double>(b);
}

// -log softmax of the first entry among the given candidate scores.
inline double local_term(const Vec& candidates, double s)
{
    double z = 0;
    for (double c : candidates) z += std::exp(s * c);
    return -(s * candidates[0] - std::log(z));
}

}  // namespace ref
