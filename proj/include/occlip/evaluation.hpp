#pragma once

// Binary caption-vs-hard-negative retrieval, zero-shot classification with
// single-node graphs, and the pair-fraction x hard-negative sweep grid with
// CSV/JSON/heatmap output.

#include "occlip/model.hpp"
#include "occlip/world.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace occlip {

struct SplitAccuracy {
    std::size_t correct = 0;
    std::size_t total = 0;
    double accuracy = 0.0;
    std::vector<double> margins;  // S(x, G+) - S(x, G-)

    nlohmann::json to_json() const;
    static SplitAccuracy from_json(const nlohmann::json& j);
};

struct EvalReport {
    std::map<std::string, SplitAccuracy> splits;
    std::optional<SplitAccuracy> zero_shot;
    std::size_t zero_shot_classes = 0;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

/// Correct iff positive > negative; ties count as incorrect.
bool retrieval_correct(double positive, double negative);

/// Accuracy from precomputed scores.
SplitAccuracy accuracy_from_scores(const std::vector<double>& positive, const std::vector<double>& negative);

/// Renders each item's scene and compares S(x, G+) with S(x, G-), chunk
/// images at a time. Throws Error(Validation) on an empty item list.
SplitAccuracy binary_retrieval_accuracy(const Scorer& scorer, const std::vector<EvalItem>& items,
                                        const WorldVocab& vocab, int image_size, std::size_t chunk = 64);

/// Text queries "A photo of a {class}" with single-node graphs.
std::vector<TextQuery> class_queries(const std::vector<std::string>& class_names);

/// Index of the best-scoring class. Throws Error(Validation) with fewer than
/// one class.
std::size_t zero_shot_classify(const Scorer& scorer, const Image& image, const std::vector<TextQuery>& classes);

/// Zero-shot accuracy over single-object scenes labelled by object class.
SplitAccuracy zero_shot_accuracy(const Scorer& scorer, const std::vector<Scene>& scenes, const WorldVocab& vocab,
                                 int image_size, std::size_t chunk = 64);

/// Evaluates every split tag present in `items`.
EvalReport evaluate(const Scorer& scorer, const std::vector<EvalItem>& items, const WorldVocab& vocab, int image_size);

// ---------------------------------------------------------------------------
// Sweeps

struct SweepCell {
    double pair_fraction = 0.0;
    double hard_negative_fraction = 0.0;
    ModelKind model = ModelKind::occlip;
    std::uint64_t seed = 0;

    std::string key() const;
};

struct SweepGrid {
    std::vector<double> pair_fractions;
    std::vector<double> hard_negative_fractions;
    std::vector<ModelKind> models;
    std::vector<std::uint64_t> seeds;

    std::vector<SweepCell> cells() const;
};

struct SweepResult {
    SweepGrid grid;
    std::map<std::string, EvalReport> reports;  // by SweepCell::key()

    /// Mean and std over seeds of one split's accuracy.
    std::pair<double, double> stats(double pair_fraction, double hard_fraction, ModelKind model,
                                    const std::string& tag) const;
    nlohmann::json to_json() const;
    std::string to_csv() const;
};

using CellRunner = std::function<EvalReport(const SweepCell&)>;

/// Runs every cell not already stored under out_dir/cells (resumable), with
/// up to `workers` concurrent cells, then writes sweep.json, sweep.csv and one
/// heatmap PNG per (model, split tag).
SweepResult run_sweep(const SweepGrid& grid, const CellRunner& runner, const std::filesystem::path& out_dir,
                      int workers);

/// Cell values in [0, 1] drawn as a colored grid with percentages, row 0
/// at the top.
Image render_heatmap(const std::vector<std::vector<double>>& values);

}  // namespace occlip
