// Acceptance runner: one PASS/FAIL line per criterion on stdout, details on
// stderr. Exit status 0 only when every selected criterion passes.

#include "checks/checks.hpp"

#include "occlip/experiment.hpp"
#include "occlip/gradcheck.hpp"
#include "occlip/llm_client.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>

using namespace occlip;
namespace fs = std::filesystem;
using checks::CheckResult;

namespace {

constexpr int kSeeds = 3;
constexpr double kBudgetSeconds = 30 * 60;

std::string fmt(double v, int precision = 4)
{
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << v;
    return os.str();
}

std::string sci(double v)
{
    std::ostringstream os;
    os << std::scientific << std::setprecision(2) << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// Training runs shared by criteria 5-7

struct RunOutcome {
    EvalReport report;
    double train_seconds = 0.0;
    long steps = 0;
};

RunConfig task_config(Task task, ModelKind model, std::uint64_t seed, bool local_loss)
{
    RunConfig c;
    c.split = SplitSpec{0.7, 0.0, task, seed};
    c.train.seed = seed;
    c.model.kind = model;
    c.model.loss.use_local_loss = local_loss;
    // desk recipe: from-scratch encoders want a larger step and lighter decay
    // than the defaults; about 2.4k optimizer steps on either task
    c.train.lr = 1e-3;
    c.train.weight_decay = 0.05;
    c.train.lr_mult_text = 1.0;
    c.train.lr_mult_vision = 1.0;
    c.train.epochs = task == Task::attribute_binding ? 600 : 110;
    c.validate();
    return c;
}

class Runs {
public:
    Runs(fs::path out, bool reuse) : out_(std::move(out)), reuse_(reuse) {}

    RunOutcome get(const RunConfig& cfg)
    {
        const auto dir = run_directory(out_, cfg);
        if (auto it = done_.find(dir); it != done_.end()) return it->second;
        const auto record = dir / "acceptance_run.json";
        if (reuse_ && fs::exists(record)) {
            std::ifstream is(record);
            const auto j = nlohmann::json::parse(is);
            std::cerr << "  reusing " << dir << "\n";
            return done_[dir] = RunOutcome{EvalReport::from_json(j.at("report")), j.at("train_seconds").get<double>(),
                                           j.at("steps").get<long>()};
        }
        fs::create_directories(dir);
        std::cerr << "  training " << to_string(cfg.model.kind) << " " << to_string(cfg.split.task) << " seed "
                  << cfg.train.seed << (cfg.model.loss.use_local_loss ? "" : " (no local loss)") << " -> " << dir
                  << "\n";
        const auto r = run_experiment(cfg, ExperimentOptions{dir, std::nullopt, false});
        RunOutcome o{r.report, r.train_seconds, r.steps};
        std::ofstream os(record);
        os << nlohmann::json{{"report", o.report.to_json()}, {"train_seconds", o.train_seconds}, {"steps", o.steps}}
                  .dump(2)
           << "\n";
        std::cerr << "  done in " << fmt(o.train_seconds, 1) << " s\n";
        return done_[dir] = o;
    }

private:
    fs::path out_;
    bool reuse_;
    std::map<fs::path, RunOutcome> done_;
};

double split_accuracy(const RunOutcome& o, const char* tag)
{
    return o.report.splits.at(tag).accuracy;
}

// ---------------------------------------------------------------------------

CheckResult criterion_oracle()
{
    return checks::oracle_equivalence(64, 2024);
}

CheckResult criterion_gradients()
{
    const auto r = run_gradient_suite(0);
    CheckResult c;
    c.passed = r.passed() && r.seconds < 120.0;
    double worst = 0.0;
    std::string where;
    for (const auto& g : r.results) {
        if (g.max_rel_error > worst) {
            worst = g.max_rel_error;
            where = g.name + " " + g.worst_entry;
        }
        if (!g.passed) c.detail += g.name + " failed; ";
    }
    c.detail += std::to_string(r.results.size()) + " checks, worst rel err " + sci(worst) + " (" + where +
                "), " + fmt(r.seconds, 1) + " s";
    return c;
}

CheckResult criterion_properties()
{
    constexpr int n = 250;
    const std::pair<const char*, std::function<CheckResult()>> props[] = {
        {"column normalization", [] { return checks::property_attention_normalization(n, 101); }},
        {"alpha/beta scale invariance", [] { return checks::property_coefficient_scale_invariance(n, 102); }},
        {"score bound", [] { return checks::property_score_bound(n, 103); }},
        {"permutation equivariance", [] { return checks::property_permutation_equivariance(n, 104); }},
        {"swap involution", [] { return checks::property_swap_involution(n, 105); }},
        {"local loss shift invariance", [] { return checks::property_local_loss_shift_invariance(n, 106); }},
        {"single-sample contrastive loss", [] { return checks::property_single_sample_itc_zero(n, 107); }},
    };
    CheckResult c;
    int ok = 0;
    for (const auto& [name, fn] : props) {
        const auto r = fn();
        if (r.passed) {
            ++ok;
        } else {
            c.passed = false;
            c.detail += std::string(name) + ": " + r.detail + "; ";
        }
    }
    c.detail += std::to_string(ok) + "/7 properties, " + std::to_string(n) + " cases each";
    return c;
}

CheckResult criterion_splits()
{
    WorldVocab vocab;
    CheckResult c;
    int grids = 0;
    for (Task task : {Task::attribute_binding, Task::spatial_relation}) {
        for (double p : {0.1, 0.4, 0.7, 1.0}) {
            for (double h : {0.0, 0.3, 0.7}) {
                for (std::uint64_t seed = 0; seed < 3; ++seed) {
                    const auto r = checks::split_oracle(vocab, SplitSpec{p, h, task, seed});
                    ++grids;
                    if (!r.passed) {
                        c.passed = false;
                        c.detail += r.detail + "; ";
                    }
                }
            }
        }
    }
    c.detail += std::to_string(grids) + " splits checked against the enumeration";
    return c;
}

CheckResult criterion_attribute(Runs& runs, std::vector<RunOutcome>& occlip_runs)
{
    CheckResult c;
    double oc = 0.0, base = 0.0, slowest = 0.0;
    std::string per_seed;
    for (int s = 0; s < kSeeds; ++s) {
        const auto o = runs.get(task_config(Task::attribute_binding, ModelKind::occlip, s, true));
        const auto b = runs.get(task_config(Task::attribute_binding, ModelKind::clip_baseline, s, true));
        occlip_runs.push_back(o);
        oc += split_accuracy(o, "seen_pairs") / kSeeds;
        base += split_accuracy(b, "seen_pairs") / kSeeds;
        slowest = std::max({slowest, o.train_seconds, b.train_seconds});
        per_seed += " s" + std::to_string(s) + "=" + fmt(split_accuracy(o, "seen_pairs"), 3) + "/" +
                    fmt(split_accuracy(b, "seen_pairs"), 3);
    }
    c.passed = oc >= 0.90 && base <= oc - 0.10 && slowest <= kBudgetSeconds;
    c.detail = "seen_pairs occlip " + fmt(oc) + " baseline " + fmt(base) + " (per seed occlip/baseline:" + per_seed +
               "), slowest run " + fmt(slowest, 0) + " s";
    return c;
}

CheckResult criterion_spatial(Runs& runs)
{
    CheckResult c;
    double with = 0.0, slowest = 0.0;
    bool lower_every_seed = true;
    std::string per_seed;
    for (int s = 0; s < kSeeds; ++s) {
        const auto a = runs.get(task_config(Task::spatial_relation, ModelKind::occlip, s, true));
        const auto b = runs.get(task_config(Task::spatial_relation, ModelKind::occlip, s, false));
        const double wa = split_accuracy(a, "unseen_order"), wb = split_accuracy(b, "unseen_order");
        with += wa / kSeeds;
        lower_every_seed = lower_every_seed && wb < wa;
        slowest = std::max({slowest, a.train_seconds, b.train_seconds});
        per_seed += " s" + std::to_string(s) + "=" + fmt(wa, 3) + "/" + fmt(wb, 3);
    }
    c.passed = with >= 0.85 && lower_every_seed && slowest <= kBudgetSeconds;
    c.detail = "unseen_order with local loss " + fmt(with) + (lower_every_seed ? ", " : ", NOT ") +
               "strictly lower without it on every seed (with/without:" + per_seed + "), slowest run " +
               fmt(slowest, 0) + " s";
    return c;
}

// Scored on the spatial-task models: their captions never name the
// background, like the single-node class queries. The attribute-task models
// are reported alongside.
CheckResult criterion_zero_shot(Runs& runs, const std::vector<RunOutcome>& attribute_runs)
{
    auto mean_of = [](const std::vector<RunOutcome>& rs, std::string& per_seed) {
        double acc = 0.0;
        for (const auto& o : rs) {
            acc += o.report.zero_shot->accuracy / static_cast<double>(rs.size());
            per_seed += " " + fmt(o.report.zero_shot->accuracy, 3);
        }
        return acc;
    };
    std::vector<RunOutcome> spatial;
    for (int s = 0; s < kSeeds; ++s) spatial.push_back(runs.get(task_config(Task::spatial_relation, ModelKind::occlip, s, true)));
    CheckResult c;
    std::string per_seed, attr_seeds;
    const double acc = mean_of(spatial, per_seed);
    const std::size_t classes = spatial.front().report.zero_shot_classes;
    const double chance = 1.0 / static_cast<double>(classes);
    c.passed = acc >= 3.0 * chance;
    c.detail = "zero-shot accuracy " + fmt(acc) + " over " + std::to_string(classes) + " classes, chance " +
               fmt(chance) + " (spatial-task models, per seed:" + per_seed + ")";
    if (!attribute_runs.empty())
        c.detail += "; attribute-task models " + fmt(mean_of(attribute_runs, attr_seeds)) + " (per seed:" + attr_seeds + ")";
    return c;
}

CheckResult criterion_llm_parse()
{
    const std::string caption = "A large brown box with a green toy in it";
    const auto prompt = build_llm_prompt(caption);
    // the mock answers with the worked example carried in the prompt
    const auto from = prompt.find("[ANS]", prompt.find("Output:"));
    const auto to = prompt.find("[/ANS]", from);
    MockTransport mock(std::map<std::string, std::string>{{caption, prompt.substr(from, to + 6 - from)}});
    const auto r = parse_with_llm(caption, mock);
    const auto expected = nlohmann::json::parse(
        R"({"entities":["large brown box","green toy"],"relationships":[{"relationship":"in","subject":1,"object":0}]})");
    CheckResult c;
    c.passed = r.ok() && to_graph_json(r.graph()) == expected;
    c.detail = r.ok() ? "round trip " + std::string(c.passed ? "exact" : "differs: " + to_graph_json(r.graph()).dump())
                      : std::string("round trip failed: ") + to_string(r.failure_reason());

    std::mt19937_64 rng(5);
    const std::string base = expected.dump();
    std::size_t fuzzed = 0, parsed = 0;
    for (int t = 0; t < 10000; ++t) {
        std::string s = (t % 3 ? "[ANS]" + base + "[/ANS]" : base);
        for (int e = 0; e < 1 + t % 6; ++e) {
            const auto pos = std::uniform_int_distribution<std::size_t>(0, s.size())(rng);
            const char ch = static_cast<char>(rng() & 0xff);
            if (rng() % 2 && pos < s.size()) s[pos] = ch;
            else s.insert(pos, 1, ch);
        }
        try {
            const auto f = extract_graph_from_llm_response(s);
            if (f.ok()) {
                validate(f.graph());
                ++parsed;
            }
            ++fuzzed;
        } catch (...) {
            c.passed = false;
        }
    }
    c.detail += "; " + std::to_string(fuzzed) + "/10000 fuzzed responses handled without throwing (" +
                std::to_string(parsed) + " still parsed)";
    if (fuzzed != 10000) c.passed = false;
    return c;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"acceptance checks"};
    fs::path out = "acceptance_runs";
    std::vector<int> only;
    bool reuse = false;
    app.add_option("--out", out, "directory for training runs");
    app.add_option("--criteria", only, "subset of criteria to run (1-8)")->delimiter(',');
    app.add_flag("--reuse", reuse, "reuse finished training runs found under --out");
    CLI11_PARSE(app, argc, argv);
    const std::set<int> selected(only.begin(), only.end());
    auto want = [&](int k) { return selected.empty() || selected.count(k) > 0; };

    Runs runs(out, reuse);
    std::vector<RunOutcome> occlip_attribute;
    const std::pair<const char*, std::function<CheckResult()>> criteria[] = {
        {"oracle equivalence", criterion_oracle},
        {"finite-difference gradients", criterion_gradients},
        {"property tests", criterion_properties},
        {"split counts and leakage", criterion_splits},
        {"attribute binding vs baseline", [&] { return criterion_attribute(runs, occlip_attribute); }},
        {"spatial order with and without local loss", [&] { return criterion_spatial(runs); }},
        {"zero-shot classification", [&] { return criterion_zero_shot(runs, occlip_attribute); }},
        {"LLM parse round trip and fuzzing", criterion_llm_parse},
    };
    bool all = true;
    for (int k = 1; k <= 8; ++k) {
        if (!want(k)) continue;
        const auto& [name, fn] = criteria[k - 1];
        std::cerr << "[" << k << "] " << name << "\n";
        const auto t0 = std::chrono::steady_clock::now();
        CheckResult r;
        try {
            r = fn();
        } catch (const std::exception& e) {
            r = CheckResult{false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << (r.passed ? "PASS" : "FAIL") << " " << k << " " << name << ": " << r.detail << " [" << fmt(secs, 1)
                  << " s]" << std::endl;
        all = all && r.passed;
    }
    return all ? 0 : 1;
}
