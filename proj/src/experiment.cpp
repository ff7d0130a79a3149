#include "occlip/experiment.hpp"

#include "occlip/errors.hpp"

#include <chrono>
#include <fstream>
#include <iostream>

namespace occlip {

nlohmann::json EvalConfig::to_json() const
{
    return {{"zero_shot", zero_shot}, {"zero_shot_seed", zero_shot_seed}, {"chunk", chunk}};
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j)
{
    EvalConfig c;
    c.zero_shot = j.value("zero_shot", c.zero_shot);
    c.zero_shot_seed = j.value("zero_shot_seed", c.zero_shot_seed);
    c.chunk = j.value("chunk", c.chunk);
    return c;
}

nlohmann::json SweepConfig::to_json() const
{
    nlohmann::json models_json = nlohmann::json::array();
    for (auto m : models) models_json.push_back(to_string(m));
    return {{"pair_fractions", pair_fractions},
            {"hard_negative_fractions", hard_negative_fractions},
            {"models", models_json},
            {"seeds", seeds}};
}

SweepConfig SweepConfig::from_json(const nlohmann::json& j)
{
    SweepConfig c;
    c.pair_fractions = j.value("pair_fractions", c.pair_fractions);
    c.hard_negative_fractions = j.value("hard_negative_fractions", c.hard_negative_fractions);
    if (j.contains("models")) {
        c.models.clear();
        for (const auto& m : j.at("models")) c.models.push_back(model_kind_from_string(m.get<std::string>()));
    }
    c.seeds = j.value("seeds", c.seeds);
    return c;
}

namespace {

nlohmann::json split_to_json(const SplitSpec& s)
{
    return {{"task", to_string(s.task)},
            {"pair_fraction", s.pair_fraction},
            {"hard_negative_fraction", s.hard_negative_fraction},
            {"seed", s.seed}};
}

SplitSpec split_from_json(const nlohmann::json& j)
{
    SplitSpec s;
    if (j.contains("task")) s.task = task_from_string(j.at("task").get<std::string>());
    s.pair_fraction = j.value("pair_fraction", s.pair_fraction);
    s.hard_negative_fraction = j.value("hard_negative_fraction", s.hard_negative_fraction);
    s.seed = j.value("seed", s.seed);
    return s;
}

bool same_kind(const nlohmann::json& a, const nlohmann::json& b)
{
    if (a.is_number() && b.is_number()) return true;
    return a.type() == b.type();
}

void check_schema(const nlohmann::json& input, const nlohmann::json& schema, const std::string& path)
{
    if (!input.is_object()) throw Error(ErrorCode::Validation, "config: " + path + " must be an object");
    for (const auto& [key, value] : input.items()) {
        const std::string where = path.empty() ? key : path + "." + key;
        if (!schema.contains(key)) throw Error(ErrorCode::Validation, "config: unknown key " + where);
        const auto& expected = schema.at(key);
        if (!same_kind(value, expected)) throw Error(ErrorCode::Validation, "config: wrong type for " + where);
        if (expected.is_object()) check_schema(value, expected, where);
    }
}

}  // namespace

void RunConfig::validate() const
{
    vocab.validate();
    split.validate();
    model.validate();
    train.validate();
    if (precision != 32 && precision != 64) throw Error(ErrorCode::Validation, "precision must be 32 or 64");
    if (eval.chunk == 0) throw Error(ErrorCode::Validation, "eval.chunk must be positive");
    for (double p : sweep.pair_fractions) {
        if (!(p > 0.0 && p <= 1.0)) throw Error(ErrorCode::Validation, "sweep pair fractions must be in (0, 1]");
    }
    for (double h : sweep.hard_negative_fractions) {
        if (!(h >= 0.0 && h <= 1.0)) throw Error(ErrorCode::Validation, "sweep hard-negative fractions must be in [0, 1]");
    }
}

nlohmann::json RunConfig::to_json() const
{
    nlohmann::json v = vocab;
    return {{"world", {{"vocab", v}, {"split", split_to_json(split)}}},
            {"model", model.to_json()},
            {"train", train.to_json()},
            {"eval", eval.to_json()},
            {"sweep", sweep.to_json()},
            {"precision", precision}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j)
{
    check_schema(j, RunConfig{}.to_json(), "");
    RunConfig c;
    try {
        if (j.contains("world")) {
            const auto& w = j.at("world");
            if (w.contains("vocab")) c.vocab = w.at("vocab").get<WorldVocab>();
            if (w.contains("split")) c.split = split_from_json(w.at("split"));
        }
        if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
        if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
        if (j.contains("eval")) c.eval = EvalConfig::from_json(j.at("eval"));
        if (j.contains("sweep")) c.sweep = SweepConfig::from_json(j.at("sweep"));
        c.precision = j.value("precision", c.precision);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Validation, std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is) throw Error(ErrorCode::Io, "cannot read config " + path.string());
    auto j = nlohmann::json::parse(is, nullptr, false);
    if (j.is_discarded()) throw Error(ErrorCode::Validation, "config is not valid JSON: " + path.string());
    return from_json(j);
}

std::string RunConfig::hash() const
{
    return config_hash(to_json()).substr(0, 12);
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json item_json(const std::string& image_path, const std::string& caption, const SceneGraph& graph,
                         const Scene& scene)
{
    return {{"image_path", image_path}, {"caption", caption}, {"graph", to_graph_json(graph)}, {"scene", scene_to_json(scene)}};
}

}  // namespace

void write_dataset(const Splits& splits, const WorldVocab& vocab, int image_size, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir / "images");
    std::ofstream train(dir / "train.jsonl");
    std::ofstream eval(dir / "eval.jsonl");
    if (!train || !eval) throw Error(ErrorCode::Io, "cannot write manifests under " + dir.string());
    for (std::size_t i = 0; i < splits.train.size(); ++i) {
        const auto& it = splits.train[i];
        const std::string rel = "images/train_" + std::to_string(i) + ".png";
        write_png(dir / rel, render(it.scene, vocab, image_size));
        train << item_json(rel, it.caption, it.graph, it.scene).dump() << "\n";
    }
    for (std::size_t i = 0; i < splits.eval.size(); ++i) {
        const auto& it = splits.eval[i];
        const std::string rel = "images/eval_" + std::to_string(i) + ".png";
        write_png(dir / rel, render(it.scene, vocab, image_size));
        auto j = item_json(rel, it.positive_caption, it.positive_graph, it.scene);
        j["negative_caption"] = it.negative_caption;
        j["negative_graph"] = to_graph_json(it.negative_graph);
        j["tag"] = to_string(it.tag);
        eval << j.dump() << "\n";
    }
    std::ofstream summary(dir / "split_summary.json");
    summary << splits.summary.to_json().dump(2) << "\n";
    if (!train || !eval || !summary) throw Error(ErrorCode::Io, "failed writing dataset under " + dir.string());
}

namespace {

template <typename F>
void for_each_line(const std::filesystem::path& path, F&& f)
{
    std::ifstream is(path);
    if (!is) throw Error(ErrorCode::Io, "cannot read " + path.string());
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
        ++n;
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw Error(ErrorCode::Validation, path.string() + ":" + std::to_string(n) + ": bad JSON");
        try {
            f(j);
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::Validation, path.string() + ":" + std::to_string(n) + ": " + e.what());
        }
    }
}

}  // namespace

std::vector<DatasetItem> read_train_manifest(const std::filesystem::path& path)
{
    std::vector<DatasetItem> out;
    for_each_line(path, [&](const nlohmann::json& j) {
        out.push_back({scene_from_json(j.at("scene")), j.at("caption").get<std::string>(), from_graph_json(j.at("graph"))});
    });
    return out;
}

std::vector<EvalItem> read_eval_manifest(const std::filesystem::path& path)
{
    std::vector<EvalItem> out;
    for_each_line(path, [&](const nlohmann::json& j) {
        EvalItem e;
        e.scene = scene_from_json(j.at("scene"));
        e.positive_caption = j.at("caption").get<std::string>();
        e.positive_graph = from_graph_json(j.at("graph"));
        e.negative_caption = j.at("negative_caption").get<std::string>();
        e.negative_graph = from_graph_json(j.at("negative_graph"));
        e.tag = split_tag_from_string(j.at("tag").get<std::string>());
        out.push_back(std::move(e));
    });
    return out;
}

// ---------------------------------------------------------------------------

namespace {

template <typename Model>
EvalReport evaluate_model(const Model& model, const RunConfig& cfg, const Splits& splits)
{
    const int size = cfg.model.vision.image_size;
    EvalReport report = evaluate(model, splits.eval, cfg.vocab, size);
    if (cfg.eval.zero_shot) {
        const bool mention_bg = cfg.split.task == Task::attribute_binding;
        report.zero_shot = zero_shot_accuracy(model, single_object_scenes(cfg.vocab, mention_bg, cfg.eval.zero_shot_seed),
                                              cfg.vocab, size, cfg.eval.chunk);
        report.zero_shot_classes = cfg.vocab.object_classes.size();
    }
    return report;
}

template <typename Model>
ExperimentResult train_and_evaluate(const RunConfig& cfg, const Splits& splits, const ExperimentOptions& options)
{
    Model model(cfg.model, cfg.vocab, cfg.train.seed);
    TrainHooks hooks;
    hooks.run_config = cfg.to_json();
    hooks.resume_from = options.resume_from;
    if (options.out_dir) {
        hooks.log_path = *options.out_dir / "train_log.jsonl";
        hooks.checkpoint_path = *options.out_dir / "checkpoint.occk";
        if (!options.resume_from) std::filesystem::remove(*hooks.log_path);
    }
    if (options.verbose) {
        hooks.on_step = [](const StepRecord& r) {
            if (r.step % 50 == 0) std::cerr << r.to_json().dump() << "\n";
        };
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto tr = train(model, splits.train, cfg.vocab, cfg.train, hooks);
    const auto t1 = std::chrono::steady_clock::now();

    ExperimentResult r;
    r.steps = tr.steps;
    r.train_seconds = std::chrono::duration<double>(t1 - t0).count();
    if (!tr.history.empty()) r.last_loss = tr.history.back().loss;
    if constexpr (requires { model.coefficients(); }) r.coefficients = model.coefficients();
    r.report = evaluate_model(model, cfg, splits);
    if (options.out_dir) {
        std::ofstream os(*options.out_dir / "eval_report.json");
        os << r.report.to_json().dump(2) << "\n";
    }
    return r;
}

template <typename Model>
EvalReport evaluate_saved(const RunConfig& cfg, const Splits& splits, const std::filesystem::path& checkpoint)
{
    Model model(cfg.model, cfg.vocab, cfg.train.seed);
    load_parameters(model, TensorArchive::load(checkpoint));
    return evaluate_model(model, cfg, splits);
}

}  // namespace

ExperimentResult run_experiment(const RunConfig& cfg, const ExperimentOptions& options)
{
    cfg.validate();
    if (options.out_dir) std::filesystem::create_directories(*options.out_dir);
    const auto splits = build_splits(cfg.vocab, cfg.split);
    const bool baseline = cfg.model.kind == ModelKind::clip_baseline;
    if (cfg.precision == 64) {
        return baseline ? train_and_evaluate<BaselineModel<double>>(cfg, splits, options)
                        : train_and_evaluate<OcClipModel<double>>(cfg, splits, options);
    }
    return baseline ? train_and_evaluate<BaselineModel<float>>(cfg, splits, options)
                    : train_and_evaluate<OcClipModel<float>>(cfg, splits, options);
}

EvalReport evaluate_checkpoint(const RunConfig& cfg, const std::filesystem::path& checkpoint)
{
    cfg.validate();
    const auto splits = build_splits(cfg.vocab, cfg.split);
    const bool baseline = cfg.model.kind == ModelKind::clip_baseline;
    if (cfg.precision == 64) {
        return baseline ? evaluate_saved<BaselineModel<double>>(cfg, splits, checkpoint)
                        : evaluate_saved<OcClipModel<double>>(cfg, splits, checkpoint);
    }
    return baseline ? evaluate_saved<BaselineModel<float>>(cfg, splits, checkpoint)
                    : evaluate_saved<OcClipModel<float>>(cfg, splits, checkpoint);
}

std::filesystem::path run_directory(const std::filesystem::path& out, const RunConfig& cfg)
{
    return out / (std::string(to_string(cfg.model.kind)) + "_" + cfg.hash());
}

}  // namespace occlip
