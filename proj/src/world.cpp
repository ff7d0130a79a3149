#include "occlip/world.hpp"

#include "occlip/errors.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace occlip {

namespace {

using Rgb = std::array<std::uint8_t, 3>;

Rgb hashed_color(const std::string& name)
{
    std::uint32_t h = 2166136261u;
    for (char c : name) h = (h ^ static_cast<std::uint8_t>(c)) * 16777619u;
    return {static_cast<std::uint8_t>(40 + h % 180), static_cast<std::uint8_t>(40 + (h >> 8) % 180),
            static_cast<std::uint8_t>(40 + (h >> 16) % 180)};
}

Rgb color_of(const std::string& name)
{
    static const std::map<std::string, Rgb> table = {
        {"red", {220, 40, 40}},     {"green", {40, 180, 60}},    {"blue", {40, 90, 230}},
        {"yellow", {235, 215, 40}}, {"gray", {128, 128, 128}},   {"black", {25, 25, 25}},
        {"white", {235, 235, 235}}, {"brown", {115, 80, 50}},    {"purple", {120, 60, 150}},
    };
    auto it = table.find(name);
    return it == table.end() ? hashed_color(name) : it->second;
}

enum class ShapeKind { circle, square, triangle, diamond, cross, ring, bar, star };

ShapeKind shape_of(const WorldVocab& vocab, int cls)
{
    static const std::map<std::string, ShapeKind> table = {
        {"circle", ShapeKind::circle}, {"square", ShapeKind::square}, {"triangle", ShapeKind::triangle},
        {"diamond", ShapeKind::diamond}, {"cross", ShapeKind::cross}, {"ring", ShapeKind::ring},
        {"bar", ShapeKind::bar},         {"star", ShapeKind::star},
    };
    auto it = table.find(vocab.object_classes.at(static_cast<std::size_t>(cls)));
    if (it != table.end()) return it->second;
    return static_cast<ShapeKind>(cls % 8);
}

// u to the right, v downwards, both in units of the half-extent.
bool inside(ShapeKind kind, double u, double v)
{
    const double au = std::abs(u);
    const double av = std::abs(v);
    const double r = std::hypot(u, v);
    switch (kind) {
    case ShapeKind::circle: return r <= 0.95;
    case ShapeKind::square: return std::max(au, av) <= 0.82;
    case ShapeKind::triangle: return v <= 0.85 && v >= -0.95 && au <= (v + 0.95) / 1.8;
    case ShapeKind::diamond: return au + av <= 1.0;
    case ShapeKind::cross: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case ShapeKind::ring: return r <= 1.0 && r >= 0.55;
    case ShapeKind::bar: return au <= 1.0 && av <= 0.38;
    case ShapeKind::star: {
        const double theta = std::atan2(v, u) + std::numbers::pi / 2.0;
        return r <= 0.5 + 0.5 * std::pow(std::abs(std::cos(2.5 * theta)), 2.0);
    }
    }
    return false;
}

bool overlapping(const PlacedObject& a, const PlacedObject& b)
{
    const double gap = 2.0 * kObjectHalfSize + 0.02;
    return std::abs(a.x - b.x) < gap && std::abs(a.y - b.y) < gap;
}

constexpr double kMinCenter = kObjectHalfSize + 0.03;
constexpr double kMaxCenter = 1.0 - kObjectHalfSize - 0.03;
// relation pairs: separation along the axis and alignment across it
constexpr double kAxisSeparation = 2.0 * kObjectHalfSize + 0.04;
constexpr double kCrossAxisSlack = 0.10;

bool relation_holds(const WorldVocab& vocab, int relation, const PlacedObject& s, const PlacedObject& o)
{
    const auto geo = relation_geometry(vocab, relation);
    const double ds = geo.axis == SpatialAxis::horizontal ? o.x - s.x : o.y - s.y;
    const double cross = geo.axis == SpatialAxis::horizontal ? o.y - s.y : o.x - s.x;
    const double along = geo.subject_first ? ds : -ds;
    return along > 0.0 && std::abs(cross) <= kCrossAxisSlack + 1e-12;
}

}  // namespace

RelationGeometry relation_geometry(const WorldVocab& vocab, int relation)
{
    const auto& name = vocab.relations.at(static_cast<std::size_t>(relation));
    if (name == "to the left of" || name == "left of") return {SpatialAxis::horizontal, true};
    if (name == "to the right of" || name == "right of") return {SpatialAxis::horizontal, false};
    if (name == "above") return {SpatialAxis::vertical, true};
    if (name == "below" || name == "under") return {SpatialAxis::vertical, false};
    throw Error(ErrorCode::Validation, "relation has no known geometry: " + name);
}

void validate(const Scene& scene, const WorldVocab& vocab)
{
    auto in_range = [](int v, std::size_t n) { return v >= 0 && static_cast<std::size_t>(v) < n; };
    if (!in_range(scene.background, vocab.backgrounds.size())) throw Error(ErrorCode::Validation, "bad background");
    if (scene.objects.empty() || scene.objects.size() > 2) throw Error(ErrorCode::Validation, "scene needs 1-2 objects");
    for (const auto& o : scene.objects) {
        if (!in_range(o.object_class, vocab.object_classes.size())) throw Error(ErrorCode::Validation, "bad class");
        if (o.attribute != -1 && !in_range(o.attribute, vocab.attributes.size())) {
            throw Error(ErrorCode::Validation, "bad attribute");
        }
    }
    if (scene.relation) {
        if (scene.objects.size() != 2) throw Error(ErrorCode::Validation, "relation needs two objects");
        if (!in_range(*scene.relation, vocab.relations.size())) throw Error(ErrorCode::Validation, "bad relation");
        if (!relation_holds(vocab, *scene.relation, scene.objects[0], scene.objects[1])) {
            throw Error(ErrorCode::Validation, "object positions contradict the relation");
        }
    }
    if (scene.objects.size() == 2 && overlapping(scene.objects[0], scene.objects[1])) {
        throw Error(ErrorCode::Validation, "objects overlap");
    }
}

Scene place_objects(Scene scene, const WorldVocab& vocab, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> pos(kMinCenter, kMaxCenter);
    std::uniform_real_distribution<double> slack(-kCrossAxisSlack, kCrossAxisSlack);
    auto& objs = scene.objects;
    if (objs.size() == 1) {
        objs[0].x = pos(rng);
        objs[0].y = pos(rng);
        return scene;
    }
    for (;;) {
        if (scene.relation) {
            const auto geo = relation_geometry(vocab, *scene.relation);
            // first/second along the axis
            const double a = pos(rng);
            const double b = pos(rng);
            if (std::abs(a - b) < kAxisSeparation) continue;
            const double lo = std::min(a, b);
            const double hi = std::max(a, b);
            const double c = pos(rng);
            const double c2 = std::clamp(c + slack(rng), kMinCenter, kMaxCenter);
            const double s_along = geo.subject_first ? lo : hi;
            const double o_along = geo.subject_first ? hi : lo;
            if (geo.axis == SpatialAxis::horizontal) {
                objs[0].x = s_along;
                objs[0].y = c;
                objs[1].x = o_along;
                objs[1].y = c2;
            } else {
                objs[0].y = s_along;
                objs[0].x = c;
                objs[1].y = o_along;
                objs[1].x = c2;
            }
        } else {
            objs[0].x = pos(rng);
            objs[0].y = pos(rng);
            objs[1].x = pos(rng);
            objs[1].y = pos(rng);
        }
        if (!overlapping(objs[0], objs[1])) return scene;
    }
}

Image render(const Scene& scene, const WorldVocab& vocab, int image_size)
{
    Image img(image_size, image_size);
    const Rgb bg = color_of(vocab.backgrounds.at(static_cast<std::size_t>(scene.background)));
    for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
        img.pixels[i] = bg[0];
        img.pixels[i + 1] = bg[1];
        img.pixels[i + 2] = bg[2];
    }
    const double extent = kObjectHalfSize * image_size;
    for (const auto& o : scene.objects) {
        const Rgb col = color_of(vocab.attributes.at(static_cast<std::size_t>(std::max(o.attribute, 0))));
        const ShapeKind kind = shape_of(vocab, o.object_class);
        const double cx = o.x * image_size;
        const double cy = o.y * image_size;
        const int y0 = std::max(0, static_cast<int>(std::floor(cy - extent)));
        const int y1 = std::min(image_size - 1, static_cast<int>(std::ceil(cy + extent)));
        const int x0 = std::max(0, static_cast<int>(std::floor(cx - extent)));
        const int x1 = std::min(image_size - 1, static_cast<int>(std::ceil(cx + extent)));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double u = (x + 0.5 - cx) / extent;
                const double v = (y + 0.5 - cy) / extent;
                if (!inside(kind, u, v)) continue;
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = col[static_cast<std::size_t>(c)];
            }
        }
    }
    return img;
}

std::string caption_of(const Scene& scene, const WorldVocab& vocab)
{
    auto obj = [&](const PlacedObject& o) { return vocab.node_phrase(o.attribute, o.object_class); };
    std::string cap = "A photo of a " + obj(scene.objects.at(0));
    if (scene.objects.size() == 2) {
        if (scene.relation) {
            cap += " " + vocab.relations.at(static_cast<std::size_t>(*scene.relation)) + " a " + obj(scene.objects[1]);
        } else {
            cap += " and a " + obj(scene.objects[1]);
        }
    }
    if (scene.mention_background) cap += " in a " + vocab.background_phrase(scene.background);
    return cap;
}

SceneGraph graph_of(const Scene& scene, const WorldVocab& vocab)
{
    return parse_template_caption(caption_of(scene, vocab), vocab);
}

nlohmann::json scene_to_json(const Scene& scene)
{
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : scene.objects) {
        objs.push_back({{"class", o.object_class}, {"attribute", o.attribute}, {"x", o.x}, {"y", o.y}});
    }
    nlohmann::json j = {{"background", scene.background},
                        {"objects", std::move(objs)},
                        {"mention_background", scene.mention_background}};
    j["relation"] = scene.relation ? nlohmann::json(*scene.relation) : nlohmann::json(nullptr);
    return j;
}

Scene scene_from_json(const nlohmann::json& j)
{
    Scene s;
    s.background = j.at("background").get<int>();
    for (const auto& o : j.at("objects")) {
        s.objects.push_back(PlacedObject{o.at("class").get<int>(), o.at("attribute").get<int>(), o.at("x").get<double>(),
                                         o.at("y").get<double>()});
    }
    if (j.contains("relation") && !j.at("relation").is_null()) s.relation = j.at("relation").get<int>();
    s.mention_background = j.value("mention_background", true);
    return s;
}

std::vector<Scene> single_object_scenes(const WorldVocab& vocab, bool mention_background, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::vector<Scene> out;
    for (int bg = 0; bg < static_cast<int>(vocab.backgrounds.size()); ++bg) {
        for (int a = 0; a < static_cast<int>(vocab.attributes.size()); ++a) {
            for (int c = 0; c < static_cast<int>(vocab.object_classes.size()); ++c) {
                Scene s;
                s.background = bg;
                s.objects = {PlacedObject{c, a}};
                s.mention_background = mention_background;
                out.push_back(place_objects(std::move(s), vocab, rng));
            }
        }
    }
    return out;
}

}  // namespace occlip
