#pragma once

// AdamW training loop shared by OC-CLIP and the baseline: per-group
// learning rates with linear warmup and cosine decay, decoupled weight decay
// on weight matrices only, placement-augmented batches, JSON-lines logging
// and resumable checkpoints.

#include "occlip/checkpoint.hpp"
#include "occlip/model.hpp"
#include "occlip/world.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

namespace occlip {

struct TrainConfig {
    int epochs = 60;
    int batch_size = 64;
    double lr = 2e-4;
    double lr_mult_binding = 1.0;
    double lr_mult_text = 0.5;
    double lr_mult_vision = 0.5;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.2;
    double warmup_binding = 0.01;  // fractions of the total step count
    double warmup_text = 0.01;
    double warmup_vision = 0.05;
    double grad_clip = 0.0;        // global norm; 0 disables
    bool placement_augmentation = true;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;      // steps; 0: only at the end

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

/// Learning rate of a group at a step: linear warmup then cosine decay to 0.
double scheduled_lr(double base, double warmup_fraction, long step, long total_steps);

/// Decoupled-weight-decay Adam over a ParameterSet.
template <typename T>
class AdamW {
public:
    AdamW(nn::ParameterSet<T>& params, double beta1, double beta2, double eps, double weight_decay);

    /// lr_for_group indexed by ParamGroup.
    void step(const std::array<double, 3>& lr_for_group);

    long steps_taken() const { return t_; }
    void save(TensorArchive& archive) const;
    void load(const TensorArchive& archive);

private:
    nn::ParameterSet<T>* params_;
    double beta1_, beta2_, eps_, wd_;
    long t_ = 0;
    std::vector<Matrix<T>> m_;
    std::vector<Matrix<T>> v_;
};

struct StepRecord {
    long step = 0;
    int epoch = 0;
    double lr_binding = 0.0;
    LossReport loss;
    double alpha = 0.0;
    double beta = 0.0;

    nlohmann::json to_json() const;
};

struct TrainResult {
    long steps = 0;
    std::vector<StepRecord> history;
};

struct TrainHooks {
    std::function<void(const StepRecord&)> on_step;
    std::function<void(int epoch)> on_epoch;
    std::optional<std::filesystem::path> log_path;         // JSON lines, appended
    std::optional<std::filesystem::path> checkpoint_path;  // archive written at checkpoints and the end
    std::optional<std::filesystem::path> resume_from;      // continue from this archive
    std::optional<long> stop_after;                        // stop before this step
    nlohmann::json run_config;                             // stored in checkpoint sidecars
};

long total_steps(const TrainConfig& cfg, std::size_t dataset_size);

/// Trains in place. The batch of a step depends only on (seed, step), so a
/// run resumed from a checkpoint replays the same trajectory.
template <typename Model>
TrainResult train(Model& model, const std::vector<DatasetItem>& data, const WorldVocab& vocab,
                  const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Restores parameters and optimizer state; returns the saved step.
template <typename Model>
long resume(Model& model, AdamW<typename Model::Scalar>& optimizer, const std::filesystem::path& checkpoint);

template <typename Model>
void save_checkpoint(const Model& model, const AdamW<typename Model::Scalar>* optimizer, long step,
                     const nlohmann::json& run_config, const std::filesystem::path& path);

/// Copies archive tensors into the model parameters; throws Error(Io) when a
/// parameter is missing or has the wrong shape.
template <typename Model>
void load_parameters(Model& model, const TensorArchive& archive);

}  // namespace occlip
