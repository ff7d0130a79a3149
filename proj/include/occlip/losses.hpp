#pragma once

// Contrastive objectives. L_itc is symmetric InfoNCE over a B x B score
// matrix (rows images, columns graphs); L_rel contrasts each graph against
// its edge-swapped and edge-shuffled versions on the same image.

#include "occlip/autograd.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <vector>

namespace occlip {

using ag::Var;

enum class LocalNegatives { swap_and_shuffle, swap_only };

const char* to_string(LocalNegatives n);
LocalNegatives local_negatives_from_string(const std::string& s);

struct LossConfig {
    bool use_local_loss = true;
    double logit_scale_init = 10.0;
    double logit_scale_max = 100.0;
    bool learn_logit_scale = true;
    LocalNegatives local_negatives = LocalNegatives::swap_and_shuffle;

    void validate() const;
    nlohmann::json to_json() const;
    static LossConfig from_json(const nlohmann::json& j);
};

struct LossReport {
    double itc = 0.0;
    double rel = 0.0;
    double total = 0.0;
    double mean_diagonal = 0.0;
    double mean_off_diagonal = 0.0;
    double logit_scale = 0.0;
    std::size_t rel_contributing = 0;
    std::size_t rel_two_way = 0;
    std::size_t rel_skipped = 0;  // graphs without edges
    double skipped_fraction = 0.0;

    nlohmann::json to_json() const;
};

/// How a sample enters L_rel.
enum class LocalKind : std::uint8_t { three_way, two_way, skipped };

/// Mean over i of -[log softmax_j(s*S)(i | column i) + log softmax_i(s*S)(row i)].
/// scores: B x B with entry (j, i) = S(image j, graph i); scale: 1 x 1.
template <typename T>
Var<T> itc_loss(const Var<T>& scores, const Var<T>& scale);

/// scores: B x 3 holding [S(G), S(swap G), S(shuffle G)] per sample. Two-way
/// samples ignore column 2, skipped samples contribute nothing; mean over
/// contributing samples (0 when none contribute).
template <typename T>
Var<T> rel_local_loss(const Var<T>& scores, const std::vector<LocalKind>& kinds, const Var<T>& scale);

}  // namespace occlip
