#pragma once

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace occlip {

/// Closed vocabulary of the synthetic world.
struct WorldVocab {
    std::vector<std::string> backgrounds{"gray", "black", "white", "brown", "purple"};
    std::vector<std::string> object_classes{"circle", "square", "triangle", "diamond",
                                            "cross",  "ring",   "bar",      "star"};
    std::vector<std::string> attributes{"red", "green", "blue", "yellow"};
    std::vector<std::string> relations{"to the left of", "to the right of", "above", "below"};

    /// Throws Error(Validation) on empty categories or names shared across
    /// categories.
    void validate() const;

    std::string node_phrase(int attribute, int object_class) const;
    std::string background_phrase(int background) const;
};

void to_json(nlohmann::json& j, const WorldVocab& v);
void from_json(const nlohmann::json& j, WorldVocab& v);

}  // namespace occlip
