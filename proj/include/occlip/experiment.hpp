#pragma once

// Run configuration (one JSON file per experiment), dataset manifests on
// disk, and the train-then-evaluate pipeline shared by the CLI, sweeps and
// the acceptance suite.

#include "occlip/evaluation.hpp"
#include "occlip/model.hpp"
#include "occlip/training.hpp"
#include "occlip/world.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace occlip {

struct EvalConfig {
    bool zero_shot = true;
    std::uint64_t zero_shot_seed = 7;  // placements of the held-out single-object renders
    std::size_t chunk = 64;

    nlohmann::json to_json() const;
    static EvalConfig from_json(const nlohmann::json& j);
};

struct SweepConfig {
    std::vector<double> pair_fractions{0.1, 0.4, 0.7, 1.0};
    std::vector<double> hard_negative_fractions{0.0, 0.3, 0.7};
    std::vector<ModelKind> models{ModelKind::occlip, ModelKind::clip_baseline};
    std::vector<std::uint64_t> seeds{0, 1, 2};

    nlohmann::json to_json() const;
    static SweepConfig from_json(const nlohmann::json& j);
};

struct RunConfig {
    WorldVocab vocab;
    SplitSpec split;
    ModelConfig model = ModelConfig::desk();
    TrainConfig train;
    EvalConfig eval;
    SweepConfig sweep;
    int precision = 32;

    void validate() const;
    nlohmann::json to_json() const;
    /// Rejects unknown keys and mistyped values with Error(Validation).
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::filesystem::path& path);

    /// Short hash of the full configuration, used in output paths.
    std::string hash() const;
};

/// Writes images/, train.jsonl, eval.jsonl and split_summary.json.
void write_dataset(const Splits& splits, const WorldVocab& vocab, int image_size, const std::filesystem::path& dir);

std::vector<DatasetItem> read_train_manifest(const std::filesystem::path& path);
std::vector<EvalItem> read_eval_manifest(const std::filesystem::path& path);

struct ExperimentResult {
    EvalReport report;
    long steps = 0;
    double train_seconds = 0.0;
    MixCoefficients coefficients;
    LossReport last_loss;
};

struct ExperimentOptions {
    std::optional<std::filesystem::path> out_dir;  // log + checkpoint when set
    std::optional<std::filesystem::path> resume_from;
    bool verbose = false;
};

/// Builds the splits, trains the configured model and evaluates it.
ExperimentResult run_experiment(const RunConfig& cfg, const ExperimentOptions& options = {});

/// Evaluation of a saved model on the configured splits.
EvalReport evaluate_checkpoint(const RunConfig& cfg, const std::filesystem::path& checkpoint);

/// <out>/<model>_<hash>: where a run of `cfg` keeps its outputs.
std::filesystem::path run_directory(const std::filesystem::path& out, const RunConfig& cfg);

}  // namespace occlip
