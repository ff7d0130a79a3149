#pragma once

// Procedural 2D world: flat-colored shapes on solid backgrounds, the caption
// templates that describe them, and the train/eval split construction for
// the attribute-binding and spatial-relation experiments.

#include "occlip/image.hpp"
#include "occlip/scenegraph.hpp"
#include "occlip/vocab.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace occlip {

struct PlacedObject {
    int object_class = 0;
    int attribute = 0;  // -1: no attribute mentioned (drawn in the first attribute's color)
    double x = 0.5;     // center, fraction of image width
    double y = 0.5;     // center, fraction of image height

    bool operator==(const PlacedObject&) const = default;
};

/// One or two objects on a background. For pairs with a relation, the
/// caption reads "objects[0] <relation> objects[1]".
struct Scene {
    int background = 0;
    std::vector<PlacedObject> objects;
    std::optional<int> relation;      // index into WorldVocab::relations
    bool mention_background = true;

    bool operator==(const Scene&) const = default;
};

enum class SpatialAxis { horizontal, vertical };

/// Geometry of a named relation: which axis and whether the subject has the
/// smaller coordinate (left of / above).
struct RelationGeometry {
    SpatialAxis axis = SpatialAxis::horizontal;
    bool subject_first = true;
};

RelationGeometry relation_geometry(const WorldVocab& vocab, int relation);

/// Object half-extent as a fraction of the image side.
inline constexpr double kObjectHalfSize = 0.15;

/// Throws Error(Validation) on bad indices, overlapping objects, or a
/// relation the positions contradict.
void validate(const Scene& scene, const WorldVocab& vocab);

/// Samples object centers satisfying the scene's constraints (relation
/// geometry, no overlap). Keeps content, replaces positions.
Scene place_objects(Scene scene, const WorldVocab& vocab, std::mt19937_64& rng);

Image render(const Scene& scene, const WorldVocab& vocab, int image_size);

std::string caption_of(const Scene& scene, const WorldVocab& vocab);

/// parse_template_caption(caption_of(scene)).
SceneGraph graph_of(const Scene& scene, const WorldVocab& vocab);

nlohmann::json scene_to_json(const Scene& scene);
Scene scene_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Splits

enum class Task { attribute_binding, spatial_relation };
enum class SplitTag { train_pairs, seen_pairs, different_bag_of_words, unseen_pairs, unseen_order };

const char* to_string(Task task);
const char* to_string(SplitTag tag);
Task task_from_string(const std::string& s);
SplitTag split_tag_from_string(const std::string& s);

struct SplitSpec {
    double pair_fraction = 0.7;           // (0, 1]
    double hard_negative_fraction = 0.0;  // [0, 1]
    Task task = Task::attribute_binding;
    std::uint64_t seed = 0;

    void validate() const;
};

struct DatasetItem {
    Scene scene;
    std::string caption;
    SceneGraph graph;
};

struct EvalItem {
    Scene scene;
    std::string positive_caption;
    SceneGraph positive_graph;
    std::string negative_caption;
    SceneGraph negative_graph;
    SplitTag tag = SplitTag::seen_pairs;
};

using ClassPair = std::pair<int, int>;  // first < second

struct SplitSummary {
    std::size_t total_pairs = 0;
    std::vector<ClassPair> train_pairs;
    std::vector<ClassPair> hard_negative_pairs;
    std::map<ClassPair, std::pair<int, int>> assigned_attributes;  // attribute task
    std::map<ClassPair, std::pair<int, int>> seen_first;           // spatial: first class per axis (h, v)
    std::size_t train_singles = 0;
    std::size_t train_pair_items = 0;
    std::size_t train_hard_negative_items = 0;
    std::map<SplitTag, std::size_t> eval_counts;

    nlohmann::json to_json() const;
};

struct Splits {
    std::vector<DatasetItem> train;
    std::vector<EvalItem> eval;
    SplitSummary summary;

    std::vector<EvalItem> eval_with_tag(SplitTag tag) const;
};

/// Train pairs: round(pair_fraction * C(K,2)); hard-negative pairs:
/// round(hard_negative_fraction * train pairs). Throws Error(InfeasibleSpec)
/// when no pair is selected.
Splits build_attribute_splits(const WorldVocab& vocab, const SplitSpec& spec);
Splits build_spatial_splits(const WorldVocab& vocab, const SplitSpec& spec);
Splits build_splits(const WorldVocab& vocab, const SplitSpec& spec);

/// Single-object scenes of every background x attribute x class, fresh
/// placements; used for zero-shot classification.
std::vector<Scene> single_object_scenes(const WorldVocab& vocab, bool mention_background, std::uint64_t seed);

}  // namespace occlip
