#include "occlip/evaluation.hpp"

#include "occlip/errors.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

namespace occlip {

nlohmann::json SplitAccuracy::to_json() const
{
    return {{"correct", correct}, {"total", total}, {"accuracy", accuracy}, {"margins", margins}};
}

SplitAccuracy SplitAccuracy::from_json(const nlohmann::json& j)
{
    SplitAccuracy s;
    s.correct = j.at("correct").get<std::size_t>();
    s.total = j.at("total").get<std::size_t>();
    s.accuracy = j.at("accuracy").get<double>();
    s.margins = j.value("margins", std::vector<double>{});
    return s;
}

nlohmann::json EvalReport::to_json() const
{
    nlohmann::json j;
    j["splits"] = nlohmann::json::object();
    for (const auto& [tag, acc] : splits) j["splits"][tag] = acc.to_json();
    if (zero_shot) {
        j["zero_shot"] = zero_shot->to_json();
        j["zero_shot_classes"] = zero_shot_classes;
    }
    return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j)
{
    EvalReport r;
    for (const auto& [tag, acc] : j.at("splits").items()) r.splits[tag] = SplitAccuracy::from_json(acc);
    if (j.contains("zero_shot")) {
        r.zero_shot = SplitAccuracy::from_json(j.at("zero_shot"));
        r.zero_shot_classes = j.value("zero_shot_classes", std::size_t{0});
    }
    return r;
}

bool retrieval_correct(double positive, double negative)
{
    return positive > negative;
}

SplitAccuracy accuracy_from_scores(const std::vector<double>& positive, const std::vector<double>& negative)
{
    if (positive.size() != negative.size()) throw Error(ErrorCode::ShapeMismatch, "score vectors differ in length");
    SplitAccuracy s;
    s.total = positive.size();
    for (std::size_t i = 0; i < positive.size(); ++i) {
        s.margins.push_back(positive[i] - negative[i]);
        if (retrieval_correct(positive[i], negative[i])) ++s.correct;
    }
    s.accuracy = s.total ? static_cast<double>(s.correct) / static_cast<double>(s.total) : 0.0;
    return s;
}

SplitAccuracy binary_retrieval_accuracy(const Scorer& scorer, const std::vector<EvalItem>& items,
                                        const WorldVocab& vocab, int image_size, std::size_t chunk)
{
    if (items.empty()) throw Error(ErrorCode::Validation, "no evaluation items");
    chunk = std::max<std::size_t>(chunk, 1);
    std::vector<double> pos;
    std::vector<double> neg;
    for (std::size_t start = 0; start < items.size(); start += chunk) {
        const std::size_t end = std::min(items.size(), start + chunk);
        std::vector<Image> images;
        std::vector<TextQuery> p;
        std::vector<TextQuery> n;
        for (std::size_t i = start; i < end; ++i) {
            images.push_back(render(items[i].scene, vocab, image_size));
            p.push_back({items[i].positive_caption, items[i].positive_graph});
            n.push_back({items[i].negative_caption, items[i].negative_graph});
        }
        const auto sp = scorer.score_pairs(images, p);
        const auto sn = scorer.score_pairs(images, n);
        pos.insert(pos.end(), sp.begin(), sp.end());
        neg.insert(neg.end(), sn.begin(), sn.end());
    }
    return accuracy_from_scores(pos, neg);
}

std::vector<TextQuery> class_queries(const std::vector<std::string>& class_names)
{
    std::vector<TextQuery> out;
    for (const auto& c : class_names) {
        SceneGraph g;
        g.nodes = {c};
        out.push_back({"A photo of a " + c, g});
    }
    return out;
}

std::size_t zero_shot_classify(const Scorer& scorer, const Image& image, const std::vector<TextQuery>& classes)
{
    if (classes.empty()) throw Error(ErrorCode::Validation, "zero-shot classification needs classes");
    const auto s = scorer.score_matrix({image}, classes);
    Eigen::Index best = 0;
    s.row(0).maxCoeff(&best);
    return static_cast<std::size_t>(best);
}

SplitAccuracy zero_shot_accuracy(const Scorer& scorer, const std::vector<Scene>& scenes, const WorldVocab& vocab,
                                 int image_size, std::size_t chunk)
{
    if (scenes.empty()) throw Error(ErrorCode::Validation, "no scenes to classify");
    const auto classes = class_queries(vocab.object_classes);
    SplitAccuracy acc;
    chunk = std::max<std::size_t>(chunk, 1);
    for (std::size_t start = 0; start < scenes.size(); start += chunk) {
        const std::size_t end = std::min(scenes.size(), start + chunk);
        std::vector<Image> images;
        for (std::size_t i = start; i < end; ++i) images.push_back(render(scenes[i], vocab, image_size));
        const auto s = scorer.score_matrix(images, classes);
        for (std::size_t i = start; i < end; ++i) {
            const auto row = s.row(static_cast<Eigen::Index>(i - start));
            Eigen::Index best = 0;
            const double top = row.maxCoeff(&best);
            const int truth = scenes[i].objects.front().object_class;
            double runner_up = -std::numeric_limits<double>::infinity();
            for (Eigen::Index c = 0; c < row.size(); ++c) {
                if (c != truth) runner_up = std::max(runner_up, row(c));
            }
            acc.margins.push_back(row(truth) - runner_up);
            // ties between the true class and another count as wrong
            if (best == truth && row(truth) > runner_up && top == row(truth)) ++acc.correct;
            ++acc.total;
        }
    }
    acc.accuracy = static_cast<double>(acc.correct) / static_cast<double>(acc.total);
    return acc;
}

EvalReport evaluate(const Scorer& scorer, const std::vector<EvalItem>& items, const WorldVocab& vocab, int image_size)
{
    std::map<SplitTag, std::vector<EvalItem>> by_tag;
    for (const auto& it : items) by_tag[it.tag].push_back(it);
    EvalReport r;
    for (const auto& [tag, group] : by_tag) r.splits[to_string(tag)] = binary_retrieval_accuracy(scorer, group, vocab, image_size);
    return r;
}

// ---------------------------------------------------------------------------

std::string SweepCell::key() const
{
    std::ostringstream os;
    os << to_string(model) << "_p" << std::fixed << std::setprecision(3) << pair_fraction << "_h" << hard_negative_fraction
       << "_s" << seed;
    return os.str();
}

std::vector<SweepCell> SweepGrid::cells() const
{
    std::vector<SweepCell> out;
    for (auto m : models) {
        for (double p : pair_fractions) {
            for (double h : hard_negative_fractions) {
                for (auto s : seeds) out.push_back({p, h, m, s});
            }
        }
    }
    return out;
}

std::pair<double, double> SweepResult::stats(double pair_fraction, double hard_fraction, ModelKind model,
                                             const std::string& tag) const
{
    std::vector<double> v;
    for (auto s : grid.seeds) {
        auto it = reports.find(SweepCell{pair_fraction, hard_fraction, model, s}.key());
        if (it == reports.end()) continue;
        auto sp = it->second.splits.find(tag);
        if (sp != it->second.splits.end()) v.push_back(sp->second.accuracy);
    }
    if (v.empty()) return {std::nan(""), std::nan("")};
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return {mean, v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0};
}

namespace {

std::vector<std::string> tags_in(const SweepResult& r)
{
    std::vector<std::string> tags;
    for (const auto& [key, rep] : r.reports) {
        for (const auto& [tag, acc] : rep.splits) {
            if (std::find(tags.begin(), tags.end(), tag) == tags.end()) tags.push_back(tag);
        }
    }
    std::sort(tags.begin(), tags.end());
    return tags;
}

}  // namespace

nlohmann::json SweepResult::to_json() const
{
    nlohmann::json j;
    j["pair_fractions"] = grid.pair_fractions;
    j["hard_negative_fractions"] = grid.hard_negative_fractions;
    j["seeds"] = grid.seeds;
    nlohmann::json models = nlohmann::json::array();
    for (auto m : grid.models) models.push_back(to_string(m));
    j["models"] = models;
    nlohmann::json cells = nlohmann::json::object();
    for (const auto& [k, rep] : reports) cells[k] = rep.to_json();
    j["cells"] = cells;
    nlohmann::json summary = nlohmann::json::array();
    for (auto m : grid.models) {
        for (const auto& tag : tags_in(*this)) {
            for (double p : grid.pair_fractions) {
                for (double h : grid.hard_negative_fractions) {
                    const auto [mean, sd] = stats(p, h, m, tag);
                    summary.push_back({{"model", to_string(m)},
                                       {"split", tag},
                                       {"pair_fraction", p},
                                       {"hard_negative_fraction", h},
                                       {"mean", std::isnan(mean) ? nlohmann::json(nullptr) : nlohmann::json(mean)},
                                       {"std", std::isnan(sd) ? nlohmann::json(nullptr) : nlohmann::json(sd)}});
                }
            }
        }
    }
    j["summary"] = summary;
    return j;
}

std::string SweepResult::to_csv() const
{
    std::ostringstream os;
    os << "model,split,pair_fraction,hard_negative_fraction,mean_accuracy,std_accuracy,seeds\n";
    for (auto m : grid.models) {
        for (const auto& tag : tags_in(*this)) {
            for (double p : grid.pair_fractions) {
                for (double h : grid.hard_negative_fractions) {
                    const auto [mean, sd] = stats(p, h, m, tag);
                    if (std::isnan(mean)) continue;
                    os << to_string(m) << "," << tag << "," << p << "," << h << "," << mean << "," << sd << ","
                       << grid.seeds.size() << "\n";
                }
            }
        }
    }
    return os.str();
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text)
{
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp);
        if (!os) throw Error(ErrorCode::Io, "cannot write " + tmp.string());
        os << text;
    }
    std::filesystem::rename(tmp, path);
}

// 3x5 digit glyphs, one bit per pixel, rows top to bottom.
constexpr std::array<std::array<std::uint8_t, 5>, 11> kGlyphs = {{
    {0b111, 0b101, 0b101, 0b101, 0b111},  // 0
    {0b010, 0b110, 0b010, 0b010, 0b111},  // 1
    {0b111, 0b001, 0b111, 0b100, 0b111},  // 2
    {0b111, 0b001, 0b111, 0b001, 0b111},  // 3
    {0b101, 0b101, 0b111, 0b001, 0b001},  // 4
    {0b111, 0b100, 0b111, 0b001, 0b111},  // 5
    {0b111, 0b100, 0b111, 0b101, 0b111},  // 6
    {0b111, 0b001, 0b010, 0b010, 0b010},  // 7
    {0b111, 0b101, 0b111, 0b101, 0b111},  // 8
    {0b111, 0b101, 0b111, 0b001, 0b111},  // 9
    {0b000, 0b000, 0b111, 0b000, 0b000},  // -
}};

std::array<std::uint8_t, 3> ramp(double t)
{
    // dark blue -> teal -> yellow
    static const std::array<std::array<double, 3>, 4> stops = {{{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {253, 231, 37}}};
    t = std::clamp(t, 0.0, 1.0) * 3.0;
    const int i = std::min(2, static_cast<int>(t));
    const double f = t - i;
    std::array<std::uint8_t, 3> c{};
    for (int k = 0; k < 3; ++k) {
        c[static_cast<std::size_t>(k)] = static_cast<std::uint8_t>(
            std::lround(stops[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] * (1 - f) +
                        stops[static_cast<std::size_t>(i + 1)][static_cast<std::size_t>(k)] * f));
    }
    return c;
}

}  // namespace

Image render_heatmap(const std::vector<std::vector<double>>& values)
{
    constexpr int cell = 48;
    constexpr int scale = 3;
    const int rows = static_cast<int>(values.size());
    int cols = 0;
    for (const auto& r : values) cols = std::max(cols, static_cast<int>(r.size()));
    Image img(std::max(1, rows) * cell, std::max(1, cols) * cell);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const double v = c < static_cast<int>(values[static_cast<std::size_t>(r)].size())
                                 ? values[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]
                                 : std::nan("");
            const auto col = std::isnan(v) ? std::array<std::uint8_t, 3>{200, 200, 200} : ramp(v);
            for (int y = 1; y < cell - 1; ++y) {
                for (int x = 1; x < cell - 1; ++x) {
                    for (int k = 0; k < 3; ++k) img.at(r * cell + y, c * cell + x, k) = col[static_cast<std::size_t>(k)];
                }
            }
            // percentage label
            std::string label = std::isnan(v) ? "-" : std::to_string(static_cast<int>(std::lround(v * 100.0)));
            const int width = static_cast<int>(label.size()) * 4 * scale - scale;
            const int x0 = c * cell + (cell - width) / 2;
            const int y0 = r * cell + (cell - 5 * scale) / 2;
            const std::uint8_t ink = (v > 0.6) ? 0 : 255;
            for (std::size_t ch = 0; ch < label.size(); ++ch) {
                const auto& glyph = kGlyphs[label[ch] == '-' ? 10 : static_cast<std::size_t>(label[ch] - '0')];
                for (int gy = 0; gy < 5; ++gy) {
                    for (int gx = 0; gx < 3; ++gx) {
                        if (!((glyph[static_cast<std::size_t>(gy)] >> (2 - gx)) & 1)) continue;
                        for (int sy = 0; sy < scale; ++sy) {
                            for (int sx = 0; sx < scale; ++sx) {
                                const int y = y0 + gy * scale + sy;
                                const int x = x0 + static_cast<int>(ch) * 4 * scale + gx * scale + sx;
                                if (y < 0 || x < 0 || y >= img.height || x >= img.width) continue;
                                for (int k = 0; k < 3; ++k) img.at(y, x, k) = ink;
                            }
                        }
                    }
                }
            }
        }
    }
    return img;
}

SweepResult run_sweep(const SweepGrid& grid, const CellRunner& runner, const std::filesystem::path& out_dir,
                      int workers)
{
    const auto cells = grid.cells();
    if (cells.empty()) throw Error(ErrorCode::Validation, "sweep grid is empty");
    const auto cell_dir = out_dir / "cells";
    std::filesystem::create_directories(cell_dir);

    SweepResult result;
    result.grid = grid;
    std::vector<SweepCell> pending;
    for (const auto& c : cells) {
        const auto path = cell_dir / (c.key() + ".json");
        if (std::filesystem::exists(path)) {
            std::ifstream is(path);
            auto j = nlohmann::json::parse(is, nullptr, false);
            if (!j.is_discarded()) {
                result.reports[c.key()] = EvalReport::from_json(j);
                continue;
            }
        }
        pending.push_back(c);
    }

    std::mutex mu;
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    auto work = [&] {
        for (;;) {
            const std::size_t i = next++;
            if (i >= pending.size()) return;
            try {
                const auto rep = runner(pending[i]);
                write_text(cell_dir / (pending[i].key() + ".json"), rep.to_json().dump(2) + "\n");
                std::lock_guard lock(mu);
                result.reports[pending[i].key()] = rep;
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
                next = pending.size();
            }
        }
    };
    const int n = std::max(1, std::min<int>(workers, static_cast<int>(pending.size())));
    std::vector<std::thread> threads;
    for (int t = 1; t < n; ++t) threads.emplace_back(work);
    work();
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);

    write_text(out_dir / "sweep.json", result.to_json().dump(2) + "\n");
    write_text(out_dir / "sweep.csv", result.to_csv());
    auto pairs_desc = grid.pair_fractions;
    std::sort(pairs_desc.begin(), pairs_desc.end(), std::greater<>());
    auto hards = grid.hard_negative_fractions;
    std::sort(hards.begin(), hards.end());
    for (auto m : grid.models) {
        for (const auto& tag : tags_in(result)) {
            std::vector<std::vector<double>> values;
            for (double p : pairs_desc) {
                std::vector<double> row;
                for (double h : hards) row.push_back(result.stats(p, h, m, tag).first);
                values.push_back(row);
            }
            write_png(out_dir / (std::string("heatmap_") + to_string(m) + "_" + tag + ".png"), render_heatmap(values));
        }
    }
    return result;
}

}  // namespace occlip
