#include "support/scenes.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace carmtwin;
using carmtwin::testing::box_volume;

TEST(Phantom, DefaultTorsoBuilds)
{
    const auto& e = default_phantom();
    const LabeledVolume& v = *e.volume;
    EXPECT_NO_THROW(v.validate());
    EXPECT_EQ(v.dims(), (std::array<int, 3>{200, 280, 140}));
    for (const char* name : {"heart", "right lung", "L3 vertebra", "sacrum", "left kidney"})
        EXPECT_TRUE(v.find_label(name).has_value()) << name;
    // every vocabulary entry resolves to voxels that exist
    for (const auto& p : e.vocabulary->prompts()) {
        const LabelSet labels = resolve_prompt(*e.vocabulary, p);
        ASSERT_FALSE(labels.empty()) << p;
        EXPECT_GT(gt_centroid_bbox(v, labels).voxel_count, 0u) << p;
    }
}

TEST(Phantom, AnatomicalOrdering)
{
    const auto& e = default_phantom();
    auto centroid = [&](const char* p) { return gt_centroid_bbox(*e.volume, resolve_prompt(*e.vocabulary, p)).centroid; };
    EXPECT_GT(centroid("l1").y(), centroid("l5").y());
    EXPECT_GT(centroid("l5").y(), centroid("sacrum").y());
    EXPECT_GT(centroid("left kidney").x(), centroid("right kidney").x());
    EXPECT_GT(centroid("heart").y(), centroid("lower lumbar vertebrae").y());
    EXPECT_GT(centroid("heart").z(), centroid("l3").z());
}

TEST(Phantom, BoxPrimitiveExtentIsExact)
{
    const std::string spec = R"({
        "dims": [20, 20, 20], "spacing_mm": [2, 2, 2], "origin_mm": [-20, -20, -20],
        "labels": [{"name": "block", "attenuation": 0.03}],
        "primitives": [{"kind": "box", "label": "block", "center": [3, -1, 5], "size": [8, 12, 4]}]
    })";
    const LabeledVolume v = build_synthetic_phantom(parse_phantom_spec(spec));
    const StructureExtent ext = gt_centroid_bbox(v, {*v.find_label("block")});
    // voxel centres sit at odd coordinates; the box grows by half a voxel
    // containment is inclusive, so centres on the faces count
    EXPECT_EQ(ext.voxel_count, 5u * 7u * 3u);
    EXPECT_TRUE(ext.centroid.isApprox(Vec3(3, -1, 5)));
    EXPECT_TRUE(ext.box.min.isApprox(Vec3(-2, -8, 2)));
    EXPECT_TRUE(ext.box.max.isApprox(Vec3(8, 6, 8)));
}

TEST(Phantom, SpecErrors)
{
    EXPECT_THROW(parse_phantom_spec("{"), Error);
    EXPECT_THROW(parse_phantom_spec(R"({"dims": [1, 2], "spacing_mm": [1, 1, 1]})"), Error);
    const std::string unknown_label = R"({"dims": [4, 4, 4], "spacing_mm": [1, 1, 1], "labels": [],
        "primitives": [{"kind": "box", "label": "x", "center": [0, 0, 0], "size": [1, 1, 1]}]})";
    EXPECT_THROW(build_synthetic_phantom(parse_phantom_spec(unknown_label)), Error);
    const std::string clipped = R"({"dims": [4, 4, 4], "spacing_mm": [1, 1, 1], "labels": [{"name": "b", "attenuation": 0.1}],
        "primitives": [{"kind": "ellipsoid", "label": "b", "center": [0, 0, 0], "radii": [9, 1, 1]}]})";
    std::vector<std::string> warnings;
    build_synthetic_phantom(parse_phantom_spec(clipped), &warnings);
    EXPECT_EQ(warnings.size(), 1u);
}

TEST(Phantom, SaveLoadRoundTrip)
{
    const LabeledVolume v = box_volume({6, 5, 4}, 1.5, {1, 1, 1}, {3, 4, 2});
    std::stringstream ss;
    save_phantom(v, ss);
    const LabeledVolume back = load_phantom(ss);
    EXPECT_TRUE(back == v);
    std::stringstream bad("NOT-A-PHANTOM");
    EXPECT_THROW(load_phantom(bad), Error);
}

TEST(Vocabulary, SynonymsAndNormalization)
{
    const auto& voc = *default_phantom().vocabulary;
    EXPECT_EQ(voc.canonical("  Lower   Lumbar Spine "), "lower lumbar vertebrae");
    EXPECT_EQ(voc.canonical("L3 vertebra"), "l3 vertebra bone");
    EXPECT_EQ(voc.canonical("unicorn"), "");
    EXPECT_EQ(resolve_prompt(voc, "lower lumbar vertebrae").size(), 3u);
    EXPECT_TRUE(resolve_prompt(voc, "unicorn").empty());
}

TEST(Vocabulary, RejectsUnknownLabels)
{
    const LabeledVolume v = box_volume({4, 4, 4}, 1.0, {0, 0, 0}, {2, 2, 2});
    EXPECT_NO_THROW(parse_vocabulary("[prompts]\nthe block: block\n", v));
    EXPECT_THROW(parse_vocabulary("[prompts]\nthe block: nothing\n", v), Error);
}
