#include "occlip/errors.hpp"
#include "occlip/world.hpp"

#include <algorithm>
#include <cmath>

namespace occlip {

const char* to_string(Task task)
{
    return task == Task::attribute_binding ? "attribute_binding" : "spatial_relation";
}

const char* to_string(SplitTag tag)
{
    switch (tag) {
    case SplitTag::train_pairs: return "train_pairs";
    case SplitTag::seen_pairs: return "seen_pairs";
    case SplitTag::different_bag_of_words: return "different_bag_of_words";
    case SplitTag::unseen_pairs: return "unseen_pairs";
    case SplitTag::unseen_order: return "unseen_order";
    }
    return "unknown";
}

Task task_from_string(const std::string& s)
{
    if (s == "attribute_binding") return Task::attribute_binding;
    if (s == "spatial_relation") return Task::spatial_relation;
    throw Error(ErrorCode::Validation, "unknown task: " + s);
}

SplitTag split_tag_from_string(const std::string& s)
{
    for (auto t : {SplitTag::train_pairs, SplitTag::seen_pairs, SplitTag::different_bag_of_words,
                   SplitTag::unseen_pairs, SplitTag::unseen_order}) {
        if (s == to_string(t)) return t;
    }
    throw Error(ErrorCode::Validation, "unknown split tag: " + s);
}

void SplitSpec::validate() const
{
    if (!(pair_fraction > 0.0 && pair_fraction <= 1.0)) {
        throw Error(ErrorCode::Validation, "pair_fraction must be in (0, 1]");
    }
    if (!(hard_negative_fraction >= 0.0 && hard_negative_fraction <= 1.0)) {
        throw Error(ErrorCode::Validation, "hard_negative_fraction must be in [0, 1]");
    }
}

nlohmann::json SplitSummary::to_json() const
{
    auto pairs = [](const std::vector<ClassPair>& v) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& [x, y] : v) a.push_back({x, y});
        return a;
    };
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [tag, n] : eval_counts) counts[to_string(tag)] = n;
    return {{"total_pairs", total_pairs},
            {"train_pairs", pairs(train_pairs)},
            {"hard_negative_pairs", pairs(hard_negative_pairs)},
            {"train_singles", train_singles},
            {"train_pair_items", train_pair_items},
            {"train_hard_negative_items", train_hard_negative_items},
            {"train_total", train_singles + train_pair_items + train_hard_negative_items},
            {"eval_counts", counts}};
}

std::vector<EvalItem> Splits::eval_with_tag(SplitTag tag) const
{
    std::vector<EvalItem> out;
    for (const auto& e : eval) {
        if (e.tag == tag) out.push_back(e);
    }
    return out;
}

namespace {

std::size_t rounded_count(double fraction, std::size_t total)
{
    return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total)));
}

struct PairSelection {
    std::vector<ClassPair> all;
    std::vector<ClassPair> train;  // sorted
    std::vector<ClassPair> unseen; // sorted
    std::vector<ClassPair> hard;   // sorted
};

PairSelection select_pairs(const WorldVocab& vocab, const SplitSpec& spec, std::mt19937_64& rng)
{
    PairSelection sel;
    const int k = static_cast<int>(vocab.object_classes.size());
    for (int a = 0; a < k; ++a) {
        for (int b = a + 1; b < k; ++b) sel.all.emplace_back(a, b);
    }
    const std::size_t n_train = rounded_count(spec.pair_fraction, sel.all.size());
    if (n_train == 0) throw Error(ErrorCode::InfeasibleSpec, "pair_fraction selects zero object pairs");
    auto shuffled = sel.all;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    sel.train.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_train));
    sel.unseen.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(n_train), shuffled.end());
    std::sort(sel.train.begin(), sel.train.end());
    std::sort(sel.unseen.begin(), sel.unseen.end());
    return sel;
}

void select_hard(PairSelection& sel, const SplitSpec& spec, std::mt19937_64& rng)
{
    const std::size_t n_hard = rounded_count(spec.hard_negative_fraction, sel.train.size());
    auto shuffled = sel.train;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    sel.hard.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_hard));
    std::sort(sel.hard.begin(), sel.hard.end());
}

bool contains(const std::vector<ClassPair>& v, const ClassPair& p)
{
    return std::binary_search(v.begin(), v.end(), p);
}

struct Builder {
    const WorldVocab& vocab;
    std::mt19937_64& rng;
    Splits& out;

    int random_background()
    {
        std::uniform_int_distribution<int> d(0, static_cast<int>(vocab.backgrounds.size()) - 1);
        return d(rng);
    }

    DatasetItem train_item(Scene s)
    {
        s = place_objects(std::move(s), vocab, rng);
        DatasetItem item{s, caption_of(s, vocab), graph_of(s, vocab)};
        return item;
    }

    // negative describes the same image with different object content/order
    void eval_item(Scene positive, Scene negative_content, SplitTag tag)
    {
        positive = place_objects(std::move(positive), vocab, rng);
        EvalItem e;
        e.scene = positive;
        e.positive_caption = caption_of(positive, vocab);
        e.positive_graph = graph_of(positive, vocab);
        e.negative_caption = caption_of(negative_content, vocab);
        e.negative_graph = graph_of(negative_content, vocab);
        e.tag = tag;
        out.eval.push_back(std::move(e));
        ++out.summary.eval_counts[tag];
    }

    void singles(bool mention_background)
    {
        for (int bg = 0; bg < static_cast<int>(vocab.backgrounds.size()); ++bg) {
            for (int c = 0; c < static_cast<int>(vocab.object_classes.size()); ++c) {
                for (int a = 0; a < static_cast<int>(vocab.attributes.size()); ++a) {
                    Scene s;
                    s.background = bg;
                    s.objects = {PlacedObject{c, a}};
                    s.mention_background = mention_background;
                    out.train.push_back(train_item(std::move(s)));
                    ++out.summary.train_singles;
                }
            }
        }
    }
};

Scene attribute_pair_scene(int bg, const ClassPair& p, int attr_first, int attr_second)
{
    Scene s;
    s.background = bg;
    s.objects = {PlacedObject{p.first, attr_first}, PlacedObject{p.second, attr_second}};
    s.mention_background = true;
    return s;
}

}  // namespace

Splits build_attribute_splits(const WorldVocab& vocab, const SplitSpec& spec)
{
    spec.validate();
    vocab.validate();
    if (spec.task != Task::attribute_binding) throw Error(ErrorCode::Validation, "spec task is not attribute_binding");
    const int n_attr = static_cast<int>(vocab.attributes.size());
    const int n_bg = static_cast<int>(vocab.backgrounds.size());
    if (n_attr < 2) throw Error(ErrorCode::InfeasibleSpec, "attribute swaps need at least two attributes");

    std::mt19937_64 rng(spec.seed);
    Splits out;
    auto sel = select_pairs(vocab, spec, rng);
    out.summary.total_pairs = sel.all.size();
    out.summary.train_pairs = sel.train;

    // one ordered attribute assignment per train pair, attributes distinct
    std::uniform_int_distribution<int> first_attr(0, n_attr - 1);
    std::uniform_int_distribution<int> second_attr(0, n_attr - 2);
    for (const auto& p : sel.train) {
        const int a1 = first_attr(rng);
        const int r = second_attr(rng);
        out.summary.assigned_attributes[p] = {a1, r >= a1 ? r + 1 : r};
    }
    select_hard(sel, spec, rng);
    out.summary.hard_negative_pairs = sel.hard;

    Builder b{vocab, rng, out};
    b.singles(true);
    for (const auto& p : sel.train) {
        const auto [a1, a2] = out.summary.assigned_attributes.at(p);
        for (int bg = 0; bg < n_bg; ++bg) {
            out.train.push_back(b.train_item(attribute_pair_scene(bg, p, a1, a2)));
            ++out.summary.train_pair_items;
        }
        if (contains(sel.hard, p)) {
            for (int bg = 0; bg < n_bg; ++bg) {
                out.train.push_back(b.train_item(attribute_pair_scene(bg, p, a2, a1)));
                ++out.summary.train_hard_negative_items;
            }
        }
    }

    for (const auto& p : sel.train) {
        const auto [a1, a2] = out.summary.assigned_attributes.at(p);
        if (!contains(sel.hard, p)) {
            for (int bg = 0; bg < n_bg; ++bg) {
                b.eval_item(attribute_pair_scene(bg, p, a1, a2), attribute_pair_scene(bg, p, a2, a1),
                            SplitTag::train_pairs);
            }
            for (int bg = 0; bg < n_bg; ++bg) {
                b.eval_item(attribute_pair_scene(bg, p, a2, a1), attribute_pair_scene(bg, p, a1, a2),
                            SplitTag::seen_pairs);
            }
        }
        for (int x = 0; x < n_attr; ++x) {
            for (int y = 0; y < n_attr; ++y) {
                if (x == y || (x == a1 && y == a2) || (x == a2 && y == a1)) continue;
                const int bg = b.random_background();
                b.eval_item(attribute_pair_scene(bg, p, x, y), attribute_pair_scene(bg, p, y, x),
                            SplitTag::different_bag_of_words);
            }
        }
    }
    for (const auto& p : sel.unseen) {
        for (int x = 0; x < n_attr; ++x) {
            for (int y = 0; y < n_attr; ++y) {
                if (x == y) continue;
                const int bg = b.random_background();
                b.eval_item(attribute_pair_scene(bg, p, x, y), attribute_pair_scene(bg, p, y, x),
                            SplitTag::unseen_pairs);
            }
        }
    }
    return out;
}

namespace {

int find_relation(const WorldVocab& vocab, SpatialAxis axis, bool subject_first)
{
    for (int r = 0; r < static_cast<int>(vocab.relations.size()); ++r) {
        const auto g = relation_geometry(vocab, r);
        if (g.axis == axis && g.subject_first == subject_first) return r;
    }
    throw Error(ErrorCode::InfeasibleSpec, "vocabulary lacks a relation for an axis/direction");
}

// Configuration: `first` is left of (or above) `second`.
struct SpatialConfig {
    int first = 0;
    int second = 0;
    SpatialAxis axis = SpatialAxis::horizontal;
};

// phrasing 0: "first <left of/above> second"; phrasing 1: "second <right
// of/below> first". Attributes follow the classes.
Scene spatial_scene(const WorldVocab& vocab, const SpatialConfig& c, int attr_first, int attr_second, int phrasing,
                    int bg)
{
    Scene s;
    s.background = bg;
    s.mention_background = false;
    PlacedObject f{c.first, attr_first};
    PlacedObject g{c.second, attr_second};
    if (phrasing == 0) {
        s.objects = {f, g};
        s.relation = find_relation(vocab, c.axis, true);
    } else {
        s.objects = {g, f};
        s.relation = find_relation(vocab, c.axis, false);
    }
    return s;
}

Scene mention_swapped(Scene s)
{
    std::swap(s.objects[0], s.objects[1]);
    return s;
}

}  // namespace

Splits build_spatial_splits(const WorldVocab& vocab, const SplitSpec& spec)
{
    spec.validate();
    vocab.validate();
    if (spec.task != Task::spatial_relation) throw Error(ErrorCode::Validation, "spec task is not spatial_relation");
    const int n_attr = static_cast<int>(vocab.attributes.size());
    const std::array<SpatialAxis, 2> axes{SpatialAxis::horizontal, SpatialAxis::vertical};
    for (auto axis : axes) {
        find_relation(vocab, axis, true);
        find_relation(vocab, axis, false);
    }

    std::mt19937_64 rng(spec.seed);
    Splits out;
    auto sel = select_pairs(vocab, spec, rng);
    out.summary.total_pairs = sel.all.size();
    out.summary.train_pairs = sel.train;
    std::bernoulli_distribution coin(0.5);
    for (const auto& p : sel.train) {
        const int h = coin(rng) ? p.first : p.second;
        const int v = coin(rng) ? p.first : p.second;
        out.summary.seen_first[p] = {h, v};
    }
    select_hard(sel, spec, rng);
    out.summary.hard_negative_pairs = sel.hard;

    auto config_for = [&](const ClassPair& p, SpatialAxis axis, bool seen) {
        const auto [h, v] = out.summary.seen_first.at(p);
        const int first_seen = axis == SpatialAxis::horizontal ? h : v;
        const int other = first_seen == p.first ? p.second : p.first;
        return seen ? SpatialConfig{first_seen, other, axis} : SpatialConfig{other, first_seen, axis};
    };

    Builder b{vocab, rng, out};
    b.singles(false);
    auto emit_train = [&](const SpatialConfig& c, std::size_t& counter) {
        for (int x = 0; x < n_attr; ++x) {
            for (int y = 0; y < n_attr; ++y) {
                for (int phrasing = 0; phrasing < 2; ++phrasing) {
                    out.train.push_back(b.train_item(spatial_scene(vocab, c, x, y, phrasing, b.random_background())));
                    ++counter;
                }
            }
        }
    };
    auto emit_eval = [&](const SpatialConfig& c, SplitTag tag) {
        for (int x = 0; x < n_attr; ++x) {
            for (int y = 0; y < n_attr; ++y) {
                for (int phrasing = 0; phrasing < 2; ++phrasing) {
                    Scene s = spatial_scene(vocab, c, x, y, phrasing, b.random_background());
                    b.eval_item(s, mention_swapped(s), tag);
                }
            }
        }
    };

    for (const auto& p : sel.train) {
        for (auto axis : axes) {
            emit_train(config_for(p, axis, true), out.summary.train_pair_items);
            if (contains(sel.hard, p)) emit_train(config_for(p, axis, false), out.summary.train_hard_negative_items);
        }
    }
    for (const auto& p : sel.train) {
        if (contains(sel.hard, p)) continue;
        for (auto axis : axes) {
            emit_eval(config_for(p, axis, true), SplitTag::train_pairs);
            emit_eval(config_for(p, axis, false), SplitTag::unseen_order);
        }
    }
    for (const auto& p : sel.unseen) {
        for (auto axis : axes) {
            emit_eval(SpatialConfig{p.first, p.second, axis}, SplitTag::unseen_pairs);
            emit_eval(SpatialConfig{p.second, p.first, axis}, SplitTag::unseen_pairs);
        }
    }
    return out;
}

Splits build_splits(const WorldVocab& vocab, const SplitSpec& spec)
{
    return spec.task == Task::attribute_binding ? build_attribute_splits(vocab, spec)
                                                : build_spatial_splits(vocab, spec);
}

}  // namespace occlip
