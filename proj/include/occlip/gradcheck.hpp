#pragma once

// Central finite-difference checks of the reverse-mode gradients, run in
// double precision on tiny configurations.

#include "occlip/autograd.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace occlip {

struct GradCheckResult {
    std::string name;
    double max_rel_error = 0.0;
    std::string worst_entry;  // "<leaf>[index]"
    std::size_t checked = 0;
    bool passed = false;

    nlohmann::json to_json() const;
};

struct GradCheckReport {
    std::vector<GradCheckResult> results;
    double seconds = 0.0;

    bool passed() const;
    nlohmann::json to_json() const;
};

/// |a - n| / max(|a| + |n|, 1e-6).
double relative_error(double analytic, double numeric);

struct GradCheckOptions {
    double step = 1e-3;  // initial step of the extrapolation
    double tolerance = 1e-4;
    std::size_t max_entries_per_leaf = 0;  // 0: every entry
    std::uint64_t seed = 0;               // picks entries when capped
};

using NamedLeaf = std::pair<std::string, ag::Var<double>>;

/// Compares backward() of `loss` against central differences for the
/// entries of every leaf.
GradCheckResult check_gradients(const std::string& name, const std::vector<NamedLeaf>& leaves,
                                const std::function<ag::Var<double>()>& loss, const GradCheckOptions& options = {});

/// Binding, structured score (with alpha and beta), both losses end to end,
/// and the text and vision encoders.
GradCheckReport run_gradient_suite(std::uint64_t seed = 0, double tolerance = 1e-4);

}  // namespace occlip
