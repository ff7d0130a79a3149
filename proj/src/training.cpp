#include "occlip/training.hpp"

#include "occlip/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

namespace occlip {

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b)
{
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t kOrderStream = 1;
constexpr std::uint64_t kPlacementStream = 2;
constexpr std::uint64_t kPerturbStream = 3;

std::size_t group_index(nn::ParamGroup g)
{
    return static_cast<std::size_t>(g);
}

}  // namespace

void TrainConfig::validate() const
{
    auto require = [](bool ok, const char* what) {
        if (!ok) throw Error(ErrorCode::Validation, what);
    };
    require(epochs >= 0, "train.epochs must be non-negative");
    require(batch_size >= 2, "train.batch_size must be at least 2");
    require(lr > 0.0 && lr_mult_binding > 0.0 && lr_mult_text > 0.0 && lr_mult_vision > 0.0,
            "learning rates must be positive");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "train.betas must be in [0, 1)");
    require(eps > 0.0 && weight_decay >= 0.0, "train.eps must be positive and weight_decay non-negative");
    for (double w : {warmup_binding, warmup_text, warmup_vision}) require(w >= 0.0 && w < 1.0, "warmup fractions must be in [0, 1)");
    require(grad_clip >= 0.0, "train.grad_clip must be non-negative");
    require(checkpoint_every >= 0, "train.checkpoint_every must be non-negative");
}

nlohmann::json TrainConfig::to_json() const
{
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"lr", lr},
            {"lr_mult_binding", lr_mult_binding},
            {"lr_mult_text", lr_mult_text},
            {"lr_mult_vision", lr_mult_vision},
            {"beta1", beta1},
            {"beta2", beta2},
            {"eps", eps},
            {"weight_decay", weight_decay},
            {"warmup_binding", warmup_binding},
            {"warmup_text", warmup_text},
            {"warmup_vision", warmup_vision},
            {"grad_clip", grad_clip},
            {"placement_augmentation", placement_augmentation},
            {"seed", seed},
            {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j)
{
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.lr_mult_binding = j.value("lr_mult_binding", c.lr_mult_binding);
    c.lr_mult_text = j.value("lr_mult_text", c.lr_mult_text);
    c.lr_mult_vision = j.value("lr_mult_vision", c.lr_mult_vision);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.warmup_binding = j.value("warmup_binding", c.warmup_binding);
    c.warmup_text = j.value("warmup_text", c.warmup_text);
    c.warmup_vision = j.value("warmup_vision", c.warmup_vision);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.placement_augmentation = j.value("placement_augmentation", c.placement_augmentation);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    return c;
}

double scheduled_lr(double base, double warmup_fraction, long step, long total_steps)
{
    if (total_steps <= 0) return base;
    const long warmup = static_cast<long>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
    if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const long span = std::max(1L, total_steps - warmup);
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------

template <typename T>
AdamW<T>::AdamW(nn::ParameterSet<T>& params, double beta1, double beta2, double eps, double weight_decay)
    : params_(&params), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay)
{
    for (const auto& p : params.entries()) {
        m_.push_back(Matrix<T>::Zero(p.var.rows(), p.var.cols()));
        v_.push_back(Matrix<T>::Zero(p.var.rows(), p.var.cols()));
    }
}

template <typename T>
void AdamW<T>::step(const std::array<double, 3>& lr_for_group)
{
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto& entries = params_->entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        auto& p = entries[i];
        if (!p.var.has_grad()) continue;
        const double lr = lr_for_group[group_index(p.group)];
        auto& w = p.var.mutable_value();
        const auto& g = p.var.grad();
        m_[i] = static_cast<T>(beta1_) * m_[i] + static_cast<T>(1.0 - beta1_) * g;
        v_[i] = static_cast<T>(beta2_) * v_[i] + static_cast<T>(1.0 - beta2_) * g.cwiseProduct(g);
        if (p.decay && wd_ > 0.0) w *= static_cast<T>(1.0 - lr * wd_);
        const auto mhat = m_[i].array() / static_cast<T>(bc1);
        const auto vhat = v_[i].array() / static_cast<T>(bc2);
        w.array() -= static_cast<T>(lr) * mhat / (vhat.sqrt() + static_cast<T>(eps_));
    }
}

template <typename T>
void AdamW<T>::save(TensorArchive& archive) const
{
    const auto& entries = params_->entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        archive.tensors["adam.m/" + entries[i].name] = m_[i].template cast<double>();
        archive.tensors["adam.v/" + entries[i].name] = v_[i].template cast<double>();
    }
    archive.tensors["adam.t"] = Matrix<double>::Constant(1, 1, static_cast<double>(t_));
}

template <typename T>
void AdamW<T>::load(const TensorArchive& archive)
{
    const auto& entries = params_->entries();
    auto fetch = [&](const std::string& key, const Matrix<T>& like) {
        auto it = archive.tensors.find(key);
        if (it == archive.tensors.end() || it->second.rows() != like.rows() || it->second.cols() != like.cols()) {
            throw Error(ErrorCode::Io, "checkpoint lacks optimizer state " + key);
        }
        return Matrix<T>(it->second.template cast<T>());
    };
    for (std::size_t i = 0; i < entries.size(); ++i) {
        m_[i] = fetch("adam.m/" + entries[i].name, m_[i]);
        v_[i] = fetch("adam.v/" + entries[i].name, v_[i]);
    }
    auto it = archive.tensors.find("adam.t");
    if (it == archive.tensors.end()) throw Error(ErrorCode::Io, "checkpoint lacks optimizer step");
    t_ = static_cast<long>(it->second(0, 0));
}

nlohmann::json StepRecord::to_json() const
{
    return {{"step", step}, {"epoch", epoch}, {"lr_binding", lr_binding}, {"loss", loss.to_json()},
            {"alpha", alpha}, {"beta", beta}};
}

long total_steps(const TrainConfig& cfg, std::size_t dataset_size)
{
    if (dataset_size == 0) return 0;
    const long per_epoch = std::max<long>(1, static_cast<long>(dataset_size) / cfg.batch_size);
    return per_epoch * cfg.epochs;
}

namespace {

template <typename Model>
MixCoefficients coefficients_of(const Model& model)
{
    if constexpr (requires { model.coefficients(); }) {
        return model.coefficients();
    } else {
        return {0.0, 0.0};
    }
}

void clip_gradients(auto& params, double max_norm)
{
    double sq = 0.0;
    for (auto& p : params.entries()) {
        if (p.var.has_grad()) sq += static_cast<double>(p.var.grad().squaredNorm());
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) return;
    const double s = max_norm / norm;
    for (auto& p : params.entries()) {
        if (p.var.has_grad()) p.var.mutable_grad() *= static_cast<typename std::decay_t<decltype(p.var.grad())>::Scalar>(s);
    }
}

}  // namespace

template <typename Model>
void save_checkpoint(const Model& model, const AdamW<typename Model::Scalar>* optimizer, long step,
                     const nlohmann::json& run_config, const std::filesystem::path& path)
{
    TensorArchive a;
    for (const auto& p : model.params().entries()) a.tensors[p.name] = p.var.value().template cast<double>();
    if (optimizer) optimizer->save(a);
    a.meta = {{"step", step},
              {"model", model.config().to_json()},
              {"run_config", run_config},
              {"config_hash", config_hash(run_config)}};
    a.save(path);
}

template <typename Model>
void load_parameters(Model& model, const TensorArchive& archive)
{
    using T = typename Model::Scalar;
    for (auto& p : model.params().entries()) {
        auto it = archive.tensors.find(p.name);
        if (it == archive.tensors.end()) throw Error(ErrorCode::Io, "checkpoint lacks parameter " + p.name);
        if (it->second.rows() != p.var.rows() || it->second.cols() != p.var.cols()) {
            throw Error(ErrorCode::Io, "checkpoint shape mismatch for " + p.name);
        }
        p.var.mutable_value() = it->second.template cast<T>();
    }
}

template <typename Model>
long resume(Model& model, AdamW<typename Model::Scalar>& optimizer, const std::filesystem::path& checkpoint)
{
    const auto a = TensorArchive::load(checkpoint);
    load_parameters(model, a);
    optimizer.load(a);
    return a.meta.value("step", 0L);
}

template <typename Model>
TrainResult train(Model& model, const std::vector<DatasetItem>& data, const WorldVocab& vocab,
                  const TrainConfig& cfg, const TrainHooks& hooks)
{
    cfg.validate();
    using T = typename Model::Scalar;
    AdamW<T> opt(model.params(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    long start = 0;
    if (hooks.resume_from) start = resume(model, opt, *hooks.resume_from);

    const std::size_t n = data.size();
    const long total = total_steps(cfg, n);
    const long per_epoch = total > 0 ? total / std::max(1, cfg.epochs) : 1;
    const std::size_t b = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), n);
    const long end = hooks.stop_after ? std::min(total, *hooks.stop_after) : total;
    const int image_size = model.config().vision.image_size;

    std::ofstream log;
    if (hooks.log_path) {
        if (hooks.log_path->has_parent_path()) std::filesystem::create_directories(hooks.log_path->parent_path());
        log.open(*hooks.log_path, std::ios::app);
        if (!log) throw Error(ErrorCode::Io, "cannot open log " + hooks.log_path->string());
    }

    TrainResult result;
    std::vector<std::size_t> order;
    long order_epoch = -1;
    for (long step = start; step < end; ++step) {
        const long epoch = step / per_epoch;
        if (epoch != order_epoch) {
            order.resize(n);
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::mt19937_64 rng(mix_seed(mix_seed(cfg.seed, kOrderStream), static_cast<std::uint64_t>(epoch)));
            std::shuffle(order.begin(), order.end(), rng);
            order_epoch = epoch;
        }
        const std::size_t first = static_cast<std::size_t>(step % per_epoch) * b;
        std::mt19937_64 place(mix_seed(mix_seed(cfg.seed, kPlacementStream), static_cast<std::uint64_t>(step)));
        std::vector<Image> images;
        std::vector<SceneGraph> graphs;
        std::vector<std::string> captions;
        for (std::size_t k = 0; k < b; ++k) {
            const auto& item = data[order[first + k]];
            const Scene scene = cfg.placement_augmentation ? place_objects(item.scene, vocab, place) : item.scene;
            images.push_back(render(scene, vocab, image_size));
            graphs.push_back(item.graph);
            captions.push_back(item.caption);
        }

        model.params().zero_grad();
        auto out = model.loss(images, graphs, captions,
                              mix_seed(mix_seed(cfg.seed, kPerturbStream), static_cast<std::uint64_t>(step)));
        if (!std::isfinite(out.report.total)) {
            throw Error(ErrorCode::NonFiniteLoss,
                        "non-finite loss at step " + std::to_string(step) + " (batch " + std::to_string(step) + ")");
        }
        ag::backward(out.total);
        if (cfg.grad_clip > 0.0) clip_gradients(model.params(), cfg.grad_clip);
        std::array<double, 3> lrs{};
        lrs[group_index(nn::ParamGroup::binding)] =
            scheduled_lr(cfg.lr * cfg.lr_mult_binding, cfg.warmup_binding, step, total);
        lrs[group_index(nn::ParamGroup::text)] = scheduled_lr(cfg.lr * cfg.lr_mult_text, cfg.warmup_text, step, total);
        lrs[group_index(nn::ParamGroup::vision)] =
            scheduled_lr(cfg.lr * cfg.lr_mult_vision, cfg.warmup_vision, step, total);
        opt.step(lrs);
        model.after_step();

        StepRecord rec;
        rec.step = step;
        rec.epoch = static_cast<int>(epoch);
        rec.lr_binding = lrs[0];
        rec.loss = out.report;
        const auto c = coefficients_of(model);
        rec.alpha = c.alpha;
        rec.beta = c.beta;
        if (log) log << rec.to_json().dump() << "\n";
        if (hooks.on_step) hooks.on_step(rec);
        result.history.push_back(rec);
        result.steps = step + 1;

        if ((step + 1) % per_epoch == 0 && hooks.on_epoch) hooks.on_epoch(static_cast<int>(epoch));
        if (hooks.checkpoint_path && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            save_checkpoint(model, &opt, step + 1, hooks.run_config, *hooks.checkpoint_path);
        }
    }
    if (result.steps == 0) result.steps = start;
    if (hooks.checkpoint_path) save_checkpoint(model, &opt, std::max(start, result.steps), hooks.run_config, *hooks.checkpoint_path);
    return result;
}

template class AdamW<float>;
template class AdamW<double>;

#define OCCLIP_INSTANTIATE(M)                                                                                     \
    template TrainResult train<M>(M&, const std::vector<DatasetItem>&, const WorldVocab&, const TrainConfig&,     \
                                  const TrainHooks&);                                                             \
    template long resume<M>(M&, AdamW<M::Scalar>&, const std::filesystem::path&);                                 \
    template void save_checkpoint<M>(const M&, const AdamW<M::Scalar>*, long, const nlohmann::json&,              \
                                     const std::filesystem::path&);                                               \
    template void load_parameters<M>(M&, const TensorArchive&);

OCCLIP_INSTANTIATE(OcClipModel<float>)
OCCLIP_INSTANTIATE(OcClipModel<double>)
OCCLIP_INSTANTIATE(BaselineModel<float>)
OCCLIP_INSTANTIATE(BaselineModel<double>)
#undef OCCLIP_INSTANTIATE

}  // namespace occlip
