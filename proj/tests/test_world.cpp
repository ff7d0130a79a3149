#include "occlip/errors.hpp"
#include "occlip/image.hpp"
#include "occlip/world.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace occlip;

namespace {

Scene pair_scene(int relation)
{
    Scene s;
    s.background = 2;
    s.objects = {PlacedObject{0, 0}, PlacedObject{3, 1}};
    s.relation = relation;
    s.mention_background = false;
    return s;
}

}  // namespace

TEST(World, PlacementsSatisfyRelations)
{
    WorldVocab vocab;
    std::mt19937_64 rng(3);
    for (int r = 0; r < static_cast<int>(vocab.relations.size()); ++r) {
        const auto g = relation_geometry(vocab, r);
        for (int t = 0; t < 50; ++t) {
            const auto s = place_objects(pair_scene(r), vocab, rng);
            EXPECT_NO_THROW(validate(s, vocab));
            const double a = g.axis == SpatialAxis::horizontal ? s.objects[0].x : s.objects[0].y;
            const double b = g.axis == SpatialAxis::horizontal ? s.objects[1].x : s.objects[1].y;
            EXPECT_EQ(a < b, g.subject_first);
        }
    }
}

TEST(World, ValidateRejectsContradictions)
{
    WorldVocab vocab;
    auto s = pair_scene(0);  // subject left of object
    s.objects[0].x = 0.8;
    s.objects[1].x = 0.2;
    EXPECT_THROW(validate(s, vocab), Error);
    s.objects[0].x = s.objects[1].x = 0.5;
    s.objects[0].y = s.objects[1].y = 0.5;
    EXPECT_THROW(validate(s, vocab), Error);  // overlap
    s = pair_scene(0);
    s.objects[0].object_class = 99;
    EXPECT_THROW(validate(s, vocab), Error);
}

TEST(World, RenderIsDeterministicAndUsesColors)
{
    WorldVocab vocab;
    std::mt19937_64 rng(5);
    Scene s;
    s.background = 0;
    s.objects = {PlacedObject{1, 2}};  // blue square
    s = place_objects(s, vocab, rng);
    const auto a = render(s, vocab, 64);
    EXPECT_EQ(a.width, 64);
    EXPECT_EQ(a.height, 64);
    EXPECT_TRUE(a == render(s, vocab, 64));
    // the square's center pixel is blue, a corner is background
    const int cx = static_cast<int>(s.objects[0].x * 64), cy = static_cast<int>(s.objects[0].y * 64);
    EXPECT_GT(a.at(cy, cx, 2), a.at(cy, cx, 0));
    EXPECT_NE(a.at(cy, cx, 2), a.at(0, 0, 2));
    // a different attribute changes the pixels
    auto t = s;
    t.objects[0].attribute = 0;
    EXPECT_FALSE(a == render(t, vocab, 64));
}

TEST(World, SceneJsonRoundTrip)
{
    WorldVocab vocab;
    std::mt19937_64 rng(1);
    const auto s = place_objects(pair_scene(2), vocab, rng);
    EXPECT_EQ(scene_from_json(scene_to_json(s)), s);
    Scene single;
    single.objects = {PlacedObject{4, -1, 0.3, 0.6}};
    EXPECT_EQ(scene_from_json(scene_to_json(single)), single);
}

TEST(World, CaptionTemplates)
{
    WorldVocab vocab;
    auto s = pair_scene(0);
    EXPECT_EQ(caption_of(s, vocab), "A photo of a red circle to the left of a green diamond");
    s.relation.reset();
    s.mention_background = true;
    EXPECT_EQ(caption_of(s, vocab), "A photo of a red circle and a green diamond in a white background");
}

TEST(Png, RoundTrip)
{
    Image img(5, 7);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 37);
    const auto path = std::filesystem::temp_directory_path() / "occlip_png_roundtrip.png";
    write_png(path, img);
    EXPECT_TRUE(read_png(path) == img);
    EXPECT_THROW(read_png(std::filesystem::temp_directory_path() / "does_not_exist.png"), Error);
}
