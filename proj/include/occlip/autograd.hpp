#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value is a 2-D matrix; scalars are 1x1. Templated on the
// scalar type so the same model code runs in float (training) and double
// (gradient verification).

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace occlip::ag {

using Index = Eigen::Index;

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Matrix<T>& grad_ref()
    {
        if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
            grad.setZero(value.rows(), value.cols());
        }
        return grad;
    }
    bool has_grad() const { return grad.size() > 0 && grad.size() == value.size(); }
};

namespace detail {
inline thread_local int no_grad_depth = 0;
}

/// Disables graph construction for its lifetime (inference).
class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(Matrix<T> value, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>())
    {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Var scalar(T v, bool requires_grad = false)
    {
        Matrix<T> m(1, 1);
        m(0, 0) = v;
        return Var(std::move(m), requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Matrix<T>& value() const { return node_->value; }
    Matrix<T>& mutable_value() { return node_->value; }
    const Matrix<T>& grad() const { return node_->grad; }
    Matrix<T>& mutable_grad() { return node_->grad_ref(); }
    bool has_grad() const { return node_->has_grad(); }
    void zero_grad() { node_->grad.resize(0, 0); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    T item() const
    {
        if (node_->value.size() != 1) throw std::logic_error("item() on non-scalar");
        return node_->value(0, 0);
    }
    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& shared() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T, typename Fn>
Var<T> make_op(Matrix<T> value, std::initializer_list<Var<T>> inputs, Fn&& fn)
{
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& v : inputs) needs = needs || v.requires_grad();
    }
    if (!needs) return Var<T>(std::move(value));
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& v : inputs) node->parents.push_back(v.shared());
    node->backward_fn = std::forward<Fn>(fn);
    return Var<T>(std::move(node));
}

template <typename T, typename Fn>
Var<T> make_op_n(Matrix<T> value, const std::vector<Var<T>>& inputs, Fn&& fn)
{
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& v : inputs) needs = needs || v.requires_grad();
    }
    if (!needs) return Var<T>(std::move(value));
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& v : inputs) node->parents.push_back(v.shared());
    node->backward_fn = std::forward<Fn>(fn);
    return Var<T>(std::move(node));
}

inline void check(bool ok, const char* what)
{
    if (!ok) throw std::invalid_argument(std::string("autograd shape error: ") + what);
}

}  // namespace detail

/// Runs reverse accumulation from a 1x1 root.
template <typename T>
void backward(const Var<T>& root)
{
    detail::check(root.rows() == 1 && root.cols() == 1, "backward root must be 1x1");
    if (!root.requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->grad_ref().setOnes();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b)
{
    detail::check(a.cols() == b.rows(), "matmul");
    Matrix<T> out(a.rows(), b.cols());
    out.noalias() = a.value() * b.value();
    return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
        auto& A = *self.parents[0];
        auto& B = *self.parents[1];
        if (A.requires_grad) A.grad_ref().noalias() += self.grad * B.value.transpose();
        if (B.requires_grad) B.grad_ref().noalias() += A.value.transpose() * self.grad;
    });
}

/// a * b^T
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b)
{
    detail::check(a.cols() == b.cols(), "matmul_nt");
    Matrix<T> out(a.rows(), b.rows());
    out.noalias() = a.value() * b.value().transpose();
    return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
        auto& A = *self.parents[0];
        auto& B = *self.parents[1];
        if (A.requires_grad) A.grad_ref().noalias() += self.grad * B.value;
        if (B.requires_grad) B.grad_ref().noalias() += self.grad.transpose() * A.value;
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a)
{
    Matrix<T> out = a.value().transpose();
    return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
        auto& A = *self.parents[0];
        A.grad_ref() += self.grad.transpose();
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Index rows, Index cols)
{
    detail::check(rows * cols == a.value().size(), "reshape");
    Matrix<T> out = Eigen::Map<const Matrix<T>>(a.value().data(), rows, cols);
    return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
        auto& A = *self.parents[0];
        auto& g = A.grad_ref();
        Eigen::Map<Matrix<T>>(g.data(), self.grad.rows(), self.grad.cols()) += self.grad;
    });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b)
{
    detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add");
    Matrix<T> out = a.value() + b.value();
    return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (auto& p : self.parents) {
            if (p->requires_grad) p->grad_ref() += self.grad;
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b)
{
    detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
    Matrix<T> out = a.value() - b.value();
    return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
        auto& A = *self.parents[0];
        auto& B = *self.parents[1];
        if (A.requires_grad) A.grad_ref() += self.grad;
        if (B.requires_grad) B.grad_ref() -= self.grad;
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b)
{
    detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "mul");
    Matrix<T> out = a.value().cwiseProduct(b.value());
    return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
        auto& A = *self.parents[0];
        auto& B = *self.parents[1];
        if (A.requires_grad) A.grad_ref() += self.grad.cwiseProduct(B.value);
        if (B.requires_grad) B.grad_ref() += self.grad.cwiseProduct(A.value);
    });
}

/// a + broadcast(row) where row is 1 x cols.
template <typename T>
Var<T> add_row(const Var<T>& a, const Var<T>& row)
{
    detail::check(row.rows() == 1 && row.cols() == a.cols(), "add_row");
    Matrix<T> out = a.value().rowwise() + row.value().row(0);
    return detail::make_op<T>(std::move(out), {a, row}, [](Node<T>& self) {
        auto& A = *self.parents[0];
        auto& R = *self.parents[1];
        if (A.requires_grad) A.grad_ref() += self.grad;
        if (R.requires_grad) R.grad_ref() += self.grad.colwise().sum();
    });
}

/// a * c for a constant c.
template <typename T>
Var<T> scale(const Var<T>& a, T c)
{
    Matrix<T> out = a.value() * c;
    return detail::make_op<T>(std::move(out), {a}, [c](Node<T>& self) {
        self.parents[0]->grad_ref() += self.grad * c;
    });
}

/// a * s for a 1x1 variable s.
template <typename T>
Var<T> mul_scalar(const Var<T>& a, const Var<T>& s)
{
    detail::check(s.rows() == 1 && s.cols() == 1, "mul_scalar");
    Matrix<T> out = a.value() * s.value()(0, 0);
    return detail::make_op<T>(std::move(out), {a, s}, [](Node<T>& self) {
        auto& A = *self.parents[0];
        auto& S = *self.parents[1];
        if (A.requires_grad) A.grad_ref() += self.grad * S.value(0, 0);
        if (S.requires_grad) S.grad_ref()(0, 0) += self.grad.cwiseProduct(A.value).sum();
    });
}

/// a + c elementwise, c a constant matrix of the same shape (masks).
template <typename T>
Var<T> add_constant(const Var<T>& a, const Matrix<T>& c)
{
    detail::check(a.rows() == c.rows() && a.cols() == c.cols(), "add_constant");
    Matrix<T> out = a.value() + c;
    return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
        self.parents[0]->grad_ref() += self.grad;
    });
}

/// a * c elementwise with a constant matrix c.
template <typename T>
Var<T> mul_constant(const Var<T>& a, const Matrix<T>& c)
{
    detail::check(a.rows() == c.rows() && a.cols() == c.cols(), "mul_constant");
    Matrix<T> out = a.value().cwiseProduct(c);
    return detail::make_op<T>(std::move(out), {a}, [c](Node<T>& self) {
        self.parents[0]->grad_ref() += self.grad.cwiseProduct(c);
    });
}

template <typename T>
Var<T> exp(const Var<T>& a)
{
    Matrix<T> out = a.value().array().exp().matrix();
    return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
        self.parents[0]->grad_ref() += self.grad.cwiseProduct(self.value);
    });
}

template <typename T>
Var<T> log(const Var<T>& a)
{
    Matrix<T> out = a.value().array().log().matrix();
    return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
        auto& A = *self.parents[0];
        A.grad_ref().array() += self.grad.array() / A.value.array();
    });
}

template <typename T>
Var<T> reciprocal(const Var<T>& a)
{
    Matrix<T> out = a.value().array().inverse().matrix();
    return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
        auto& A = *self.parents[0];
        A.grad_ref().array() -= self.grad.array() * self.value.array().square();
    });
}

/// log(1 + e^x), numerically stable.
template <typename T>
Var<T> softplus(const Var<T>& a)
{
    Matrix<T> out = a.value().unaryExpr([](T x) {
        return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    });
    return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
        auto& A = *self.parents[0];
        Matrix<T> sig = A.value.unaryExpr([](T x) { return T(1) / (T(1) + std::exp(-x)); });
        A.grad_ref() += self.grad.cwiseProduct(sig);
    });
}

/// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(const Var<T>& a)
{
    const T inv_sqrt2 = T(0.70710678118654752440);
    Matrix<T> out = a.value().unaryExpr(
        [inv_sqrt2](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); });
    return detail::make_op<T>(std::move(out), {a}, [inv_sqrt2](Node<T>& self) {
        auto& A = *self.parents[0];
        const T inv_sqrt2pi = T(0.39894228040143267794);
        Matrix<T> d = A.value.unaryExpr([&](T x) {
            return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
        });
        A.grad_ref() += self.grad.cwiseProduct(d);
    });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& a)
{
    Matrix<T> out(1, 1);
    out(0, 0) = a.value().sum();
    return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
        self.parents[0]->grad_ref().array() += self.grad(0, 0);
    });
}

template <typename T>
Var<T> mean(const Var<T>& a)
{
    return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

/// Sums consecutive groups of `group` rows: (n*group) x c -> n x c.
template <typename T>
Var<T> segment_sum(const Var<T>& a, Index group)
{
    detail::check(group > 0 && a.rows() % group == 0, "segment_sum");
    const Index n = a.rows() / group;
    Matrix<T> out = Matrix<T>::Zero(n, a.cols());
    for (Index i = 0; i < n; ++i) out.row(i) = a.value().middleRows(i * group, group).colwise().sum();
    return detail::make_op<T>(std::move(out), {a}, [group, n](Node<T>& self) {
        auto& g = self.parents[0]->grad_ref();
        for (Index i = 0; i < n; ++i) g.middleRows(i * group, group).rowwise() += self.grad.row(i);
    });
}

/// Diagonal of a square matrix as an n x 1 column.
template <typename T>
Var<T> diagonal(const Var<T>& a)
{
    detail::check(a.rows() == a.cols(), "diagonal");
    Matrix<T> out = a.value().diagonal();
    return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
        auto& g = self.parents[0]->grad_ref();
        for (Index i = 0; i < g.rows(); ++i) g(i, i) += self.grad(i, 0);
    });
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Var<T> slice_rows(const Var<T>& a, Index start, Index count)
{
    detail::check(start >= 0 && start + count <= a.rows(), "slice_rows");
    Matrix<T> out = a.value().middleRows(start, count);
    return detail::make_op<T>(std::move(out), {a}, [start, count](Node<T>& self) {
        self.parents[0]->grad_ref().middleRows(start, count) += self.grad;
    });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, Index start, Index count)
{
    detail::check(start >= 0 && start + count <= a.cols(), "slice_cols");
    Matrix<T> out = a.value().middleCols(start, count);
    return detail::make_op<T>(std::move(out), {a}, [start, count](Node<T>& self) {
        self.parents[0]->grad_ref().middleCols(start, count) += self.grad;
    });
}

template <typename T>
Var<T> gather_rows(const Var<T>& a, std::vector<Index> indices)
{
    Matrix<T> out(static_cast<Index>(indices.size()), a.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        detail::check(indices[i] >= 0 && indices[i] < a.rows(), "gather_rows index");
        out.row(static_cast<Index>(i)) = a.value().row(indices[i]);
    }
    return detail::make_op<T>(std::move(out), {a}, [idx = std::move(indices)](Node<T>& self) {
        auto& g = self.parents[0]->grad_ref();
        for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Index>(i));
    });
}

/// out.row(indices[i]) += a.row(i); out has `rows` rows.
template <typename T>
Var<T> scatter_add_rows(const Var<T>& a, std::vector<Index> indices, Index rows)
{
    detail::check(static_cast<Index>(indices.size()) == a.rows(), "scatter_add_rows size");
    Matrix<T> out = Matrix<T>::Zero(rows, a.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        detail::check(indices[i] >= 0 && indices[i] < rows, "scatter_add_rows index");
        out.row(indices[i]) += a.value().row(static_cast<Index>(i));
    }
    return detail::make_op<T>(std::move(out), {a}, [idx = std::move(indices)](Node<T>& self) {
        auto& g = self.parents[0]->grad_ref();
        for (std::size_t i = 0; i < idx.size(); ++i) g.row(static_cast<Index>(i)) += self.grad.row(idx[i]);
    });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts)
{
    detail::check(!parts.empty(), "concat_rows empty");
    Index rows = 0;
    const Index cols = parts.front().cols();
    for (const auto& p : parts) {
        detail::check(p.cols() == cols, "concat_rows cols");
        rows += p.rows();
    }
    Matrix<T> out(rows, cols);
    Index r = 0;
    for (const auto& p : parts) {
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    return detail::make_op_n<T>(std::move(out), parts, [](Node<T>& self) {
        Index r = 0;
        for (auto& p : self.parents) {
            const Index n = p->value.rows();
            if (p->requires_grad) p->grad_ref() += self.grad.middleRows(r, n);
            r += n;
        }
    });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts)
{
    detail::check(!parts.empty(), "concat_cols empty");
    Index cols = 0;
    const Index rows = parts.front().rows();
    for (const auto& p : parts) {
        detail::check(p.rows() == rows, "concat_cols rows");
        cols += p.cols();
    }
    Matrix<T> out(rows, cols);
    Index c = 0;
    for (const auto& p : parts) {
        out.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    return detail::make_op_n<T>(std::move(out), parts, [](Node<T>& self) {
        Index c = 0;
        for (auto& p : self.parents) {
            const Index n = p->value.cols();
            if (p->requires_grad) p->grad_ref() += self.grad.middleCols(c, n);
            c += n;
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization and similarity

template <typename T>
Var<T> layer_norm(const Var<T>& a, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5))
{
    detail::check(gain.cols() == a.cols() && bias.cols() == a.cols(), "layer_norm");
    const Index n = a.rows();
    const Index d = a.cols();
    Matrix<T> xhat(n, d);
    Matrix<T> inv_std(n, 1);
    for (Index i = 0; i < n; ++i) {
        const T mu = a.value().row(i).mean();
        const T var = (a.value().row(i).array() - mu).square().mean();
        inv_std(i, 0) = T(1) / std::sqrt(var + eps);
        xhat.row(i) = (a.value().row(i).array() - mu) * inv_std(i, 0);
    }
    Matrix<T> out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
    out.rowwise() += bias.value().row(0);
    return detail::make_op<T>(
        std::move(out), {a, gain, bias},
        [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
            auto& A = *self.parents[0];
            auto& G = *self.parents[1];
            auto& B = *self.parents[2];
            if (G.requires_grad) G.grad_ref() += self.grad.cwiseProduct(xhat).colwise().sum();
            if (B.requires_grad) B.grad_ref() += self.grad.colwise().sum();
            if (A.requires_grad) {
                auto& ga = A.grad_ref();
                const T d = static_cast<T>(xhat.cols());
                for (Index i = 0; i < xhat.rows(); ++i) {
                    auto dx = (self.grad.row(i).array() * G.value.row(0).array()).eval();
                    const T m1 = dx.sum() / d;
                    const T m2 = (dx * xhat.row(i).array()).sum() / d;
                    ga.row(i).array() += inv_std(i, 0) * (dx - m1 - xhat.row(i).array() * m2);
                }
            }
        });
}

/// Row-wise cosine similarity of two equally shaped matrices -> n x 1.
/// Rows whose norm product falls below eps score eps-clamped (zero vectors
/// give 0).
template <typename T>
Var<T> row_cosine(const Var<T>& a, const Var<T>& b, T eps = T(1e-8))
{
    detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "row_cosine");
    const Index n = a.rows();
    Matrix<T> out(n, 1);
    Matrix<T> na(n, 1), nb(n, 1), dots(n, 1);
    for (Index i = 0; i < n; ++i) {
        na(i, 0) = a.value().row(i).norm();
        nb(i, 0) = b.value().row(i).norm();
        dots(i, 0) = a.value().row(i).dot(b.value().row(i));
        out(i, 0) = dots(i, 0) / std::max(na(i, 0) * nb(i, 0), eps);
    }
    return detail::make_op<T>(
        std::move(out), {a, b}, [na, nb, dots, eps](Node<T>& self) {
            auto& A = *self.parents[0];
            auto& B = *self.parents[1];
            for (Index i = 0; i < na.rows(); ++i) {
                const T g = self.grad(i, 0);
                if (g == T(0)) continue;
                const T prod = na(i, 0) * nb(i, 0);
                if (prod <= eps) {
                    if (A.requires_grad) A.grad_ref().row(i) += g * B.value.row(i) / eps;
                    if (B.requires_grad) B.grad_ref().row(i) += g * A.value.row(i) / eps;
                    continue;
                }
                const T c = dots(i, 0) / prod;
                if (A.requires_grad) {
                    A.grad_ref().row(i) += g * (B.value.row(i) / prod - c * A.value.row(i) / (na(i, 0) * na(i, 0)));
                }
                if (B.requires_grad) {
                    B.grad_ref().row(i) += g * (A.value.row(i) / prod - c * B.value.row(i) / (nb(i, 0) * nb(i, 0)));
                }
            }
        });
}

/// Scales every row to unit L2 norm.
template <typename T>
Var<T> row_normalize(const Var<T>& a, T eps = T(1e-12))
{
    const Index n = a.rows();
    Matrix<T> norms(n, 1);
    Matrix<T> out(n, a.cols());
    for (Index i = 0; i < n; ++i) {
        norms(i, 0) = std::max(a.value().row(i).norm(), eps);
        out.row(i) = a.value().row(i) / norms(i, 0);
    }
    return detail::make_op<T>(std::move(out), {a}, [norms](Node<T>& self) {
        auto& g = self.parents[0]->grad_ref();
        for (Index i = 0; i < norms.rows(); ++i) {
            const auto y = self.value.row(i);
            const auto gy = self.grad.row(i);
            g.row(i) += (gy - y * gy.dot(y)) / norms(i, 0);
        }
    });
}

/// Row-wise log-softmax. Entries equal to -inf stay -inf and receive no
/// gradient.
template <typename T>
Var<T> log_softmax_rows(const Var<T>& a)
{
    const Index n = a.rows();
    Matrix<T> out(n, a.cols());
    Matrix<T> prob(n, a.cols());
    for (Index i = 0; i < n; ++i) {
        const T mx = a.value().row(i).maxCoeff();
        const T lse = mx + std::log((a.value().row(i).array() - mx).exp().sum());
        out.row(i) = a.value().row(i).array() - lse;
        prob.row(i) = out.row(i).array().exp();
    }
    return detail::make_op<T>(std::move(out), {a}, [prob = std::move(prob)](Node<T>& self) {
        auto& g = self.parents[0]->grad_ref();
        for (Index i = 0; i < prob.rows(); ++i) {
            T s = 0;
            for (Index j = 0; j < prob.cols(); ++j) {
                if (prob(i, j) > T(0)) s += self.grad(i, j);
            }
            for (Index j = 0; j < prob.cols(); ++j) {
                if (prob(i, j) > T(0)) g(i, j) += self.grad(i, j) - prob(i, j) * s;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Fused attention kernels

/// Multi-head scaled dot-product self-attention over `num_seq` sequences of
/// `seq_len` tokens stacked row-wise. qkv is (num_seq*seq_len) x (3*width)
/// laid out as [Q | K | V]. Returns (num_seq*seq_len) x width.
template <typename T>
Var<T> self_attention(const Var<T>& qkv, Index num_seq, Index seq_len, Index heads, bool causal)
{
    detail::check(qkv.rows() == num_seq * seq_len && qkv.cols() % 3 == 0, "self_attention shape");
    const Index width = qkv.cols() / 3;
    detail::check(heads > 0 && width % heads == 0, "self_attention heads");
    const Index dh = width / heads;
    const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
    const auto& x = qkv.value();

    Matrix<T> out(num_seq * seq_len, width);
    // probabilities, one seq_len x seq_len block per (sequence, head)
    auto probs = std::make_shared<Matrix<T>>(num_seq * heads * seq_len, seq_len);
    Matrix<T> scores(seq_len, seq_len);
    for (Index s = 0; s < num_seq; ++s) {
        for (Index h = 0; h < heads; ++h) {
            const auto q = x.block(s * seq_len, h * dh, seq_len, dh);
            const auto k = x.block(s * seq_len, width + h * dh, seq_len, dh);
            const auto v = x.block(s * seq_len, 2 * width + h * dh, seq_len, dh);
            scores.noalias() = q * k.transpose();
            scores *= inv_scale;
            for (Index i = 0; i < seq_len; ++i) {
                const Index lim = causal ? i + 1 : seq_len;
                const T mx = scores.row(i).head(lim).maxCoeff();
                T z = 0;
                for (Index j = 0; j < lim; ++j) {
                    scores(i, j) = std::exp(scores(i, j) - mx);
                    z += scores(i, j);
                }
                for (Index j = 0; j < lim; ++j) scores(i, j) /= z;
                for (Index j = lim; j < seq_len; ++j) scores(i, j) = 0;
            }
            probs->middleRows((s * heads + h) * seq_len, seq_len) = scores;
            out.block(s * seq_len, h * dh, seq_len, dh).noalias() = scores * v;
        }
    }
    return detail::make_op<T>(
        std::move(out), {qkv}, [probs, num_seq, seq_len, heads, dh, width, inv_scale](Node<T>& self) {
            auto& X = *self.parents[0];
            auto& g = X.grad_ref();
            const auto& x = X.value;
            Matrix<T> dp(seq_len, seq_len);
            for (Index s = 0; s < num_seq; ++s) {
                for (Index h = 0; h < heads; ++h) {
                    const auto p = probs->middleRows((s * heads + h) * seq_len, seq_len);
                    const auto q = x.block(s * seq_len, h * dh, seq_len, dh);
                    const auto k = x.block(s * seq_len, width + h * dh, seq_len, dh);
                    const auto v = x.block(s * seq_len, 2 * width + h * dh, seq_len, dh);
                    const auto go = self.grad.block(s * seq_len, h * dh, seq_len, dh);
                    g.block(s * seq_len, 2 * width + h * dh, seq_len, dh).noalias() += p.transpose() * go;
                    dp.noalias() = go * v.transpose();
                    for (Index i = 0; i < seq_len; ++i) {
                        const T dot = p.row(i).dot(dp.row(i));
                        dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix() * inv_scale;
                    }
                    g.block(s * seq_len, h * dh, seq_len, dh).noalias() += dp * k;
                    g.block(s * seq_len, width + h * dh, seq_len, dh).noalias() += dp.transpose() * q;
                }
            }
        });
}

/// Layout and options for competitive_attention.
struct CrossAttentionLayout {
    Index num_graphs = 0;      // G
    Index max_queries = 0;     // Mmax, real query rows per graph (padded)
    Index num_images = 0;      // I
    Index num_keys = 0;        // N keys per image
    Index heads = 1;
    bool competitive = true;   // softmax over queries (true) or keys (false)
    bool all_pairs = true;     // every (image, graph) pair, else image j with graph j
};

/// Cross-attention between per-graph query blocks (plus shared default
/// queries) and per-image key/value blocks.
///
/// q: (G*Mmax) x D, q_default: Nd x D, k: (I*N) x D, v: (I*N) x Dv.
/// query_mask: G*Mmax entries, 0 marks padding rows which get zero weight.
/// Output rows for pair p hold Mmax real slots followed by Nd default slots,
/// (P*(Mmax+Nd)) x Dv, where pairs are ordered image-major: p = j*G + i
/// (all_pairs) or p = j (diagonal). If attention_out is given it receives the
/// head-averaged attention, (P*(Mmax+Nd)) x N.
template <typename T>
Var<T> competitive_attention(const Var<T>& q, const Var<T>& q_default, const Var<T>& k, const Var<T>& v,
                             const std::vector<std::uint8_t>& query_mask, const CrossAttentionLayout& L,
                             Matrix<T>* attention_out = nullptr)
{
    const Index G = L.num_graphs, Mq = L.max_queries, I = L.num_images, N = L.num_keys;
    const Index Nd = q_default.rows();
    const Index D = q.cols();
    const Index Dv = v.cols();
    const Index R = Mq + Nd;
    detail::check(q.rows() == G * Mq && q_default.cols() == D, "competitive_attention q");
    detail::check(k.rows() == I * N && v.rows() == I * N && k.cols() == D, "competitive_attention kv");
    detail::check(static_cast<Index>(query_mask.size()) == G * Mq, "competitive_attention mask");
    detail::check(L.heads > 0 && D % L.heads == 0 && Dv % L.heads == 0, "competitive_attention heads");
    detail::check(L.all_pairs || G == I, "competitive_attention diagonal needs G == I");
    const Index H = L.heads, dh = D / H, dvh = Dv / H;
    const Index graphs_per_image = L.all_pairs ? G : 1;
    const Index P = I * graphs_per_image;
    const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
    const T neg_inf = -std::numeric_limits<T>::infinity();

    // Stacked queries per graph: rows [graph real queries; defaults].
    auto qstack = std::make_shared<Matrix<T>>(G * R, D);
    for (Index i = 0; i < G; ++i) {
        qstack->middleRows(i * R, Mq) = q.value().middleRows(i * Mq, Mq);
        if (Nd > 0) qstack->middleRows(i * R + Mq, Nd) = q_default.value();
    }
    // Attention per head: rows p*R.., one block of (P*R) x N per head.
    auto attn = std::make_shared<Matrix<T>>(H * P * R, N);
    Matrix<T> out = Matrix<T>::Zero(P * R, Dv);

    auto graph_of = [&](Index j, Index local) { return L.all_pairs ? local : j; };

    for (Index h = 0; h < H; ++h) {
        for (Index j = 0; j < I; ++j) {
            const auto kj = k.value().block(j * N, h * dh, N, dh);
            const auto vj = v.value().block(j * N, h * dvh, N, dvh);
            const Index first = L.all_pairs ? 0 : j;
            // logits for the graphs paired with image j (contiguous in qstack)
            auto a = attn->block(h * P * R + j * graphs_per_image * R, 0, graphs_per_image * R, N);
            a.noalias() = qstack->block(first * R, h * dh, graphs_per_image * R, dh) * kj.transpose();
            a *= inv_scale;
            for (Index local = 0; local < graphs_per_image; ++local) {
                const Index gi = graph_of(j, local);
                auto blk = a.middleRows(local * R, R);
                for (Index m = 0; m < Mq; ++m) {
                    if (!query_mask[gi * Mq + m]) blk.row(m).setConstant(neg_inf);
                }
                if (L.competitive) {
                    for (Index c = 0; c < N; ++c) {
                        T mx = neg_inf;
                        for (Index r = 0; r < R; ++r) mx = std::max(mx, blk(r, c));
                        T z = 0;
                        for (Index r = 0; r < R; ++r) {
                            const T e = blk(r, c) == neg_inf ? T(0) : std::exp(blk(r, c) - mx);
                            blk(r, c) = e;
                            z += e;
                        }
                        for (Index r = 0; r < R; ++r) blk(r, c) /= z;
                    }
                } else {
                    for (Index r = 0; r < R; ++r) {
                        if (blk(r, 0) == neg_inf) {
                            blk.row(r).setZero();
                            continue;
                        }
                        const T mx = blk.row(r).maxCoeff();
                        blk.row(r) = (blk.row(r).array() - mx).exp().matrix();
                        blk.row(r) /= blk.row(r).sum();
                    }
                }
            }
            out.block(j * graphs_per_image * R, h * dvh, graphs_per_image * R, dvh).noalias() = a * vj;
        }
    }
    if (attention_out) {
        *attention_out = Matrix<T>::Zero(P * R, N);
        for (Index h = 0; h < H; ++h) *attention_out += attn->middleRows(h * P * R, P * R);
        *attention_out /= static_cast<T>(H);
    }

    return detail::make_op<T>(
        std::move(out), {q, q_default, k, v},
        [qstack, attn, L, G, Mq, I, N, Nd, R, H, dh, dvh, P, graphs_per_image, inv_scale](Node<T>& self) {
            auto& Q = *self.parents[0];
            auto& QD = *self.parents[1];
            auto& K = *self.parents[2];
            auto& V = *self.parents[3];
            Matrix<T> dstack = Matrix<T>::Zero(G * R, qstack->cols());
            Matrix<T> da;
            for (Index h = 0; h < H; ++h) {
                for (Index j = 0; j < I; ++j) {
                    const Index rows = graphs_per_image * R;
                    const Index first = L.all_pairs ? 0 : j;
                    const auto a = attn->block(h * P * R + j * rows, 0, rows, N);
                    const auto go = self.grad.block(j * rows, h * dvh, rows, dvh);
                    const auto kj = K.value.block(j * N, h * dh, N, dh);
                    const auto vj = V.value.block(j * N, h * dvh, N, dvh);
                    if (V.requires_grad) V.grad_ref().block(j * N, h * dvh, N, dvh).noalias() += a.transpose() * go;
                    da.noalias() = go * vj.transpose();
                    // softmax backward into logits (in place in da)
                    for (Index local = 0; local < graphs_per_image; ++local) {
                        auto ab = a.middleRows(local * R, R);
                        auto db = da.middleRows(local * R, R);
                        if (L.competitive) {
                            for (Index c = 0; c < N; ++c) {
                                T s = 0;
                                for (Index r = 0; r < R; ++r) s += ab(r, c) * db(r, c);
                                for (Index r = 0; r < R; ++r) db(r, c) = ab(r, c) * (db(r, c) - s);
                            }
                        } else {
                            for (Index r = 0; r < R; ++r) {
                                const T s = ab.row(r).dot(db.row(r));
                                db.row(r) = (ab.row(r).array() * (db.row(r).array() - s)).matrix();
                            }
                        }
                    }
                    da *= inv_scale;
                    dstack.block(first * R, h * dh, rows, dh).noalias() += da * kj;
                    if (K.requires_grad) {
                        K.grad_ref().block(j * N, h * dh, N, dh).noalias() +=
                            da.transpose() * qstack->block(first * R, h * dh, rows, dh);
                    }
                }
            }
            if (Q.requires_grad) {
                auto& gq = Q.grad_ref();
                for (Index i = 0; i < G; ++i) gq.middleRows(i * Mq, Mq) += dstack.middleRows(i * R, Mq);
            }
            if (QD.requires_grad && Nd > 0) {
                auto& gd = QD.grad_ref();
                for (Index i = 0; i < G; ++i) gd += dstack.middleRows(i * R + Mq, Nd);
            }
        });
}

}  // namespace occlip::ag
