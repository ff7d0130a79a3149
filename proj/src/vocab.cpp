#include "occlip/vocab.hpp"

#include "occlip/errors.hpp"

#include <set>

namespace occlip {

void WorldVocab::validate() const
{
    std::set<std::string> names;
    auto check = [&](const std::vector<std::string>& values, const char* what) {
        if (values.empty()) throw Error(ErrorCode::Validation, std::string("vocabulary has no ") + what);
        for (const auto& v : values) {
            if (v.empty()) throw Error(ErrorCode::Validation, std::string("empty name in ") + what);
            if (!names.insert(v).second) throw Error(ErrorCode::Validation, "duplicate vocabulary name: " + v);
        }
    };
    check(backgrounds, "backgrounds");
    check(object_classes, "object_classes");
    check(attributes, "attributes");
    check(relations, "relations");
}

std::string WorldVocab::node_phrase(int attribute, int object_class) const
{
    const auto& cls = object_classes.at(static_cast<std::size_t>(object_class));
    if (attribute < 0) return cls;
    return attributes.at(static_cast<std::size_t>(attribute)) + " " + cls;
}

std::string WorldVocab::background_phrase(int background) const
{
    return backgrounds.at(static_cast<std::size_t>(background)) + " background";
}

void to_json(nlohmann::json& j, const WorldVocab& v)
{
    j = {{"backgrounds", v.backgrounds},
         {"object_classes", v.object_classes},
         {"attributes", v.attributes},
         {"relations", v.relations}};
}

void from_json(const nlohmann::json& j, WorldVocab& v)
{
    WorldVocab d;
    v.backgrounds = j.value("backgrounds", d.backgrounds);
    v.object_classes = j.value("object_classes", d.object_classes);
    v.attributes = j.value("attributes", d.attributes);
    v.relations = j.value("relations", d.relations);
}

}  // namespace occlip
