// occlip: generate datasets, parse captions, train, evaluate and sweep.
//
// Exit status: 0 success, 1 invalid input or configuration, 2 runtime failure.

#include "occlip/checkpoint.hpp"
#include "occlip/errors.hpp"
#include "occlip/experiment.hpp"
#include "occlip/gradcheck.hpp"
#include "occlip/llm_client.hpp"
#include "occlip/scenegraph.hpp"

#include <CLI11.hpp>

#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

extern char** environ;

namespace fs = std::filesystem;
using namespace occlip;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string model;
    std::optional<int> precision;
};

RunConfig load_config(const Overrides& o)
{
    RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
    if (o.seed) {
        cfg.train.seed = *o.seed;
        cfg.split.seed = *o.seed;
    }
    if (!o.model.empty()) cfg.model.kind = model_kind_from_string(o.model);
    if (o.precision) cfg.precision = *o.precision;
    cfg.validate();
    return cfg;
}

void write_json(const fs::path& path, const nlohmann::json& j)
{
    std::ofstream os(path);
    os << j.dump(2) << "\n";
    if (!os) throw Error(ErrorCode::Io, "cannot write " + path.string());
}

std::vector<std::string> read_lines(const fs::path& path)
{
    std::ifstream is(path);
    if (!is) throw Error(ErrorCode::Io, "cannot read " + path.string());
    std::vector<std::string> lines;
    for (std::string line; std::getline(is, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

int cmd_generate(const Overrides& o, const fs::path& out)
{
    const RunConfig cfg = load_config(o);
    const auto splits = build_splits(cfg.vocab, cfg.split);
    const fs::path dir = out / ("dataset_" + std::string(to_string(cfg.split.task)) + "_" + cfg.hash());
    write_dataset(splits, cfg.vocab, cfg.model.vision.image_size, dir);
    write_json(dir / "run_config.json", cfg.to_json());
    std::cout << nlohmann::json{{"dataset", dir.string()}, {"summary", splits.summary.to_json()}}.dump(2) << "\n";
    return 0;
}

std::unique_ptr<LlmTransport> make_transport(const std::string& kind, const std::string& responses,
                                             const WorldVocab& vocab)
{
    if (kind == "http") return std::make_unique<HttpTransport>(LlmEndpoint::from_env());
    if (kind != "mock") throw Error(ErrorCode::Validation, "transport must be mock or http");
    if (!responses.empty()) {
        std::ifstream is(responses);
        if (!is) throw Error(ErrorCode::Io, "cannot read " + responses);
        auto j = nlohmann::json::parse(is, nullptr, false);
        if (!j.is_object()) throw Error(ErrorCode::Validation, "mock responses must map caption to response text");
        std::map<std::string, std::string> by_caption;
        for (const auto& [caption, text] : j.items()) {
            if (!text.is_string()) throw Error(ErrorCode::Validation, "mock response for '" + caption + "' is not a string");
            by_caption[caption] = text.get<std::string>();
        }
        return std::make_unique<MockTransport>(std::move(by_caption));
    }
    // Offline stand-in: answers with the rule-based parse.
    return std::make_unique<MockTransport>([vocab](const std::string& caption) -> std::string {
        try {
            return "[ANS]" + to_graph_json(parse_template_caption(caption, vocab)).dump() + "[/ANS]";
        } catch (const Error&) {
            return "I could not parse that.";
        }
    });
}

int cmd_parse(const Overrides& o, const fs::path& input, const std::string& mode, const std::string& transport_kind,
              const std::string& responses, const fs::path& out)
{
    const RunConfig cfg = load_config(o);
    if (mode != "template" && mode != "llm") throw Error(ErrorCode::Validation, "mode must be template or llm");
    const auto captions = read_lines(input);
    std::unique_ptr<LlmTransport> transport;
    if (mode == "llm") transport = make_transport(transport_kind, responses, cfg.vocab);

    fs::create_directories(out);
    std::ofstream graphs(out / "graphs.jsonl");
    std::map<std::string, std::size_t> failures;
    std::size_t parsed = 0;
    for (const auto& caption : captions) {
        nlohmann::json line{{"caption", caption}};
        if (mode == "template") {
            try {
                line["graph"] = to_graph_json(parse_template_caption(caption, cfg.vocab));
            } catch (const Error& e) {
                line["failure"] = to_string(e.code());
            }
        } else {
            const auto r = parse_with_llm(caption, *transport);
            if (r.ok()) {
                line["graph"] = to_graph_json(r.graph());
            } else {
                line["failure"] = to_string(r.failure_reason());
            }
        }
        if (line.contains("graph")) {
            ++parsed;
        } else {
            ++failures[line["failure"].get<std::string>()];
        }
        graphs << line.dump() << "\n";
    }
    const nlohmann::json report{{"total", captions.size()}, {"parsed", parsed}, {"failures", failures}};
    write_json(out / "parse_report.json", report);
    std::cout << report.dump(2) << "\n";
    return 0;
}

nlohmann::json result_summary(const fs::path& dir, const ExperimentResult& r)
{
    nlohmann::json acc = nlohmann::json::object();
    for (const auto& [tag, s] : r.report.splits) acc[tag] = s.accuracy;
    if (r.report.zero_shot) acc["zero_shot"] = r.report.zero_shot->accuracy;
    return {{"run_dir", dir.string()},
            {"steps", r.steps},
            {"train_seconds", r.train_seconds},
            {"alpha", r.coefficients.alpha},
            {"beta", r.coefficients.beta},
            {"accuracy", acc}};
}

int cmd_train(const Overrides& o, const fs::path& out, bool resume, bool quiet)
{
    const RunConfig cfg = load_config(o);
    const fs::path dir = run_directory(out, cfg);
    fs::create_directories(dir);
    write_json(dir / "run_config.json", cfg.to_json());
    ExperimentOptions options;
    options.out_dir = dir;
    options.verbose = !quiet;
    if (resume && fs::exists(dir / "checkpoint.occk")) options.resume_from = dir / "checkpoint.occk";
    const auto r = run_experiment(cfg, options);
    const auto summary = result_summary(dir, r);
    write_json(dir / "summary.json", summary);
    std::cout << summary.dump(2) << "\n";
    return 0;
}

int cmd_eval(Overrides o, const fs::path& checkpoint, const std::string& out)
{
    RunConfig cfg;
    if (o.config.empty()) {
        const auto archive = TensorArchive::load(checkpoint);
        cfg = RunConfig::from_json(archive.meta.at("run_config"));
        if (o.seed) cfg.split.seed = *o.seed;
        if (o.precision) cfg.precision = *o.precision;
    } else {
        cfg = load_config(o);
    }
    const auto report = evaluate_checkpoint(cfg, checkpoint);
    if (!out.empty()) {
        fs::create_directories(out);
        write_json(fs::path(out) / "eval_report.json", report.to_json());
    }
    std::cout << report.to_json().dump(2) << "\n";
    return 0;
}

// One child process per cell, each the only writer of its run directory.
EvalReport run_cell_process(const std::string& self, const RunConfig& cell_cfg, const fs::path& runs_dir)
{
    const fs::path cfg_path = runs_dir / ("config_" + cell_cfg.hash() + ".json");
    write_json(cfg_path, cell_cfg.to_json());
    const fs::path log_path = runs_dir / ("stdout_" + cell_cfg.hash() + ".txt");

    std::vector<std::string> args{self, "train", "--config", cfg_path.string(), "--out", runs_dir.string(), "--quiet",
                                  "--resume"};
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);

    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, log_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    pid_t pid = 0;
    const int rc = posix_spawn(&pid, self.c_str(), &actions, nullptr, argv.data(), environ);
    posix_spawn_file_actions_destroy(&actions);
    if (rc != 0) throw Error(ErrorCode::Io, "cannot start sweep cell process");
    int status = 0;
    waitpid(pid, &status, 0);
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
        throw Error(ErrorCode::Io, "sweep cell failed, see " + log_path.string());
    }
    std::ifstream is(run_directory(runs_dir, cell_cfg) / "eval_report.json");
    if (!is) throw Error(ErrorCode::Io, "sweep cell left no report");
    return EvalReport::from_json(nlohmann::json::parse(is));
}

int cmd_sweep(const Overrides& o, const fs::path& out, int workers)
{
    const RunConfig base = load_config(o);
    const fs::path dir = out / ("sweep_" + std::string(to_string(base.split.task)) + "_" + base.hash());
    const fs::path runs = dir / "runs";
    fs::create_directories(runs);
    write_json(dir / "run_config.json", base.to_json());

    SweepGrid grid{base.sweep.pair_fractions, base.sweep.hard_negative_fractions, base.sweep.models, base.sweep.seeds};
    const std::string self = fs::read_symlink("/proc/self/exe").string();
    auto runner = [&](const SweepCell& cell) {
        RunConfig c = base;
        c.split.pair_fraction = cell.pair_fraction;
        c.split.hard_negative_fraction = cell.hard_negative_fraction;
        c.split.seed = cell.seed;
        c.train.seed = cell.seed;
        c.model.kind = cell.model;
        std::cerr << "cell " << cell.key() << "\n";
        return run_cell_process(self, c, runs);
    };
    const auto result = run_sweep(grid, runner, dir, workers);
    std::cout << nlohmann::json{{"sweep_dir", dir.string()}, {"cells", result.reports.size()}}.dump(2) << "\n";
    return 0;
}

int verify_gradients(std::uint64_t seed)
{
    const auto report = run_gradient_suite(seed);
    std::cout << report.to_json().dump(2) << "\n";
    return report.passed() ? 0 : kExitRuntime;
}

int exit_code_for(ErrorCode code)
{
    switch (code) {
    case ErrorCode::Validation:
    case ErrorCode::InfeasibleSpec:
    case ErrorCode::UnrecognizedTemplate:
    case ErrorCode::InvalidGraph:
    case ErrorCode::BadShape:
        return kExitValidation;
    default:
        return kExitRuntime;
    }
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Object-centric contrastive binding on a synthetic 2D world"};
    app.require_subcommand(0, 1);

    Overrides o;
    bool verify_grad = false;
    std::string out = "runs";
    int workers = 1;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", o.config, "run configuration (JSON)")->check(CLI::ExistingFile);
        cmd->add_option("--seed", o.seed, "overrides the split and training seeds");
        cmd->add_option("--out", out, "output directory")->capture_default_str();
        cmd->add_option("--model", o.model, "occlip or clip_baseline");
        cmd->add_option("--precision", o.precision, "32 or 64")->check(CLI::IsMember({32, 64}));
    };
    app.add_flag("--verify-grad", verify_grad, "run the finite-difference gradient suite first");
    app.add_option("--seed", o.seed, "seed for --verify-grad");

    auto* gen = app.add_subcommand("generate", "write a dataset (images, manifests, split summary)");
    add_common(gen);

    std::string input, mode = "template", transport = "mock", responses;
    auto* parse = app.add_subcommand("parse", "captions (one per line) to scene graphs");
    add_common(parse);
    parse->add_option("--input", input, "caption file")->required()->check(CLI::ExistingFile);
    parse->add_option("--mode", mode, "template or llm")->capture_default_str();
    parse->add_option("--transport", transport, "mock or http (endpoint from OCCLIP_LLM_ENDPOINT)")
        ->capture_default_str();
    parse->add_option("--responses", responses, "mock transport: JSON object caption -> response");

    bool resume = false, quiet = false;
    auto* train = app.add_subcommand("train", "train and evaluate one model");
    add_common(train);
    train->add_flag("--resume", resume, "continue from the run's checkpoint when present");
    train->add_flag("--quiet", quiet, "no per-step log on stderr");

    std::string checkpoint;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval);
    eval->add_option("--checkpoint", checkpoint, "checkpoint archive")->required()->check(CLI::ExistingFile);

    auto* sweep = app.add_subcommand("sweep", "pair-fraction x hard-negative grid");
    add_common(sweep);
    sweep->add_option("--workers", workers, "concurrent cell processes")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitValidation;
    }

    try {
        if (verify_grad) {
            const int rc = verify_gradients(o.seed.value_or(0));
            if (rc != 0 || app.get_subcommands().empty()) return rc;
        }
        if (gen->parsed()) return cmd_generate(o, out);
        if (parse->parsed()) return cmd_parse(o, input, mode, transport, responses, out);
        if (train->parsed()) return cmd_train(o, out, resume, quiet);
        if (eval->parsed()) return cmd_eval(o, checkpoint, eval->count("--out") ? out : "");
        if (sweep->parsed()) return cmd_sweep(o, out, workers);
        std::cout << app.help() << "\n";
        return 0;
    } catch (const Error& e) {
        std::cerr << "error (" << to_string(e.code()) << "): " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
