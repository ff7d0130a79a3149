#include "occlip/losses.hpp"

#include "occlip/errors.hpp"

#include <cmath>
#include <limits>

namespace occlip {

using ag::Index;
using ag::Matrix;

const char* to_string(LocalNegatives n)
{
    return n == LocalNegatives::swap_and_shuffle ? "swap_and_shuffle" : "swap_only";
}

LocalNegatives local_negatives_from_string(const std::string& s)
{
    if (s == "swap_and_shuffle") return LocalNegatives::swap_and_shuffle;
    if (s == "swap_only") return LocalNegatives::swap_only;
    throw Error(ErrorCode::Validation, "unknown local_negatives: " + s);
}

void LossConfig::validate() const
{
    if (!(logit_scale_init > 0.0) || !(logit_scale_max >= logit_scale_init)) {
        throw Error(ErrorCode::Validation, "logit scale must satisfy 0 < init <= max");
    }
}

nlohmann::json LossConfig::to_json() const
{
    return {{"use_local_loss", use_local_loss},
            {"logit_scale_init", logit_scale_init},
            {"logit_scale_max", logit_scale_max},
            {"learn_logit_scale", learn_logit_scale},
            {"local_negatives", to_string(local_negatives)}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j)
{
    LossConfig c;
    c.use_local_loss = j.value("use_local_loss", c.use_local_loss);
    c.logit_scale_init = j.value("logit_scale_init", c.logit_scale_init);
    c.logit_scale_max = j.value("logit_scale_max", c.logit_scale_max);
    c.learn_logit_scale = j.value("learn_logit_scale", c.learn_logit_scale);
    if (j.contains("local_negatives")) c.local_negatives = local_negatives_from_string(j.at("local_negatives"));
    return c;
}

nlohmann::json LossReport::to_json() const
{
    return {{"itc", itc},
            {"rel", rel},
            {"total", total},
            {"mean_diagonal", mean_diagonal},
            {"mean_off_diagonal", mean_off_diagonal},
            {"logit_scale", logit_scale},
            {"rel_contributing", rel_contributing},
            {"rel_two_way", rel_two_way},
            {"rel_skipped", rel_skipped},
            {"skipped_fraction", skipped_fraction}};
}

template <typename T>
Var<T> itc_loss(const Var<T>& scores, const Var<T>& scale)
{
    if (scores.rows() != scores.cols() || scores.rows() < 1) {
        throw Error(ErrorCode::ShapeMismatch, "itc_loss needs a square, non-empty score matrix");
    }
    const Index b = scores.rows();
    const auto logits = ag::mul_scalar(scores, scale);
    const auto per_image = ag::diagonal(ag::log_softmax_rows(logits));
    const auto per_graph = ag::diagonal(ag::log_softmax_rows(ag::transpose(logits)));
    return ag::scale(ag::sum(ag::add(per_image, per_graph)), T(-1) / static_cast<T>(b));
}

template <typename T>
Var<T> rel_local_loss(const Var<T>& scores, const std::vector<LocalKind>& kinds, const Var<T>& scale)
{
    if (scores.cols() != 3 || static_cast<Index>(kinds.size()) != scores.rows()) {
        throw Error(ErrorCode::ShapeMismatch, "rel_local_loss needs B x 3 scores and B kinds");
    }
    const Index b = scores.rows();
    Matrix<T> drop = Matrix<T>::Zero(b, 3);
    Matrix<T> weight = Matrix<T>::Zero(b, 1);
    std::size_t contributing = 0;
    for (Index i = 0; i < b; ++i) {
        const auto k = kinds[static_cast<std::size_t>(i)];
        if (k == LocalKind::skipped) continue;
        if (k == LocalKind::two_way) drop(i, 2) = -std::numeric_limits<T>::infinity();
        weight(i, 0) = T(1);
        ++contributing;
    }
    if (contributing == 0) return ag::scale(ag::sum(ag::slice_cols(scores, 0, 1)), T(0));
    const auto logits = ag::add_constant(ag::mul_scalar(scores, scale), drop);
    const auto first = ag::slice_cols(ag::log_softmax_rows(logits), 0, 1);
    return ag::scale(ag::sum(ag::mul_constant(first, weight)), T(-1) / static_cast<T>(contributing));
}

template Var<float> itc_loss<float>(const Var<float>&, const Var<float>&);
template Var<double> itc_loss<double>(const Var<double>&, const Var<double>&);
template Var<float> rel_local_loss<float>(const Var<float>&, const std::vector<LocalKind>&, const Var<float>&);
template Var<double> rel_local_loss<double>(const Var<double>&, const std::vector<LocalKind>&, const Var<double>&);

}  // namespace occlip
