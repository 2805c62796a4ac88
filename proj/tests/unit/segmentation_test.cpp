#include "support/scenes.hpp"

#include <gtest/gtest.h>

using namespace carmtwin;

namespace {

struct Shot {
    XRayImage image;
    LabelFootprint footprint;
};

Shot shoot(double alpha, std::uint64_t id)
{
    CArmState c;
    c.alpha = alpha;
    Shot s;
    s.image = render_drr(*default_phantom().volume,
                         make_projection(make_intrinsics(430.0, 1.2, 1200.0), pose_from_carm(c, Tick{id})), std::nullopt,
                         nullptr, &s.footprint);
    s.image.id = ImageId{id};
    return s;
}

const Shot& ap()
{
    static const Shot s = shoot(0.0, 1);
    return s;
}

const Shot& lateral()
{
    static const Shot s = shoot(90.0, 2);
    return s;
}

std::size_t area(const Mask2D& m)
{
    std::size_t n = 0;
    for (auto v : m.values()) n += v;
    return n;
}

} // namespace

TEST(Oracle, IdentityReproducesGroundTruthEverywhere)
{
    const auto& e = default_phantom();
    for (const Shot* s : {&ap(), &lateral()}) {
        for (const auto& prompt : e.vocabulary->prompts()) {
            const auto hm = segment_oracle(*e.volume, *e.vocabulary, s->image, prompt, CorruptionConfig::identity(), &s->footprint);
            const Mask2D gt = project_gt_mask(*e.volume, resolve_prompt(*e.vocabulary, prompt), s->footprint);
            EXPECT_EQ(threshold_heatmap(hm.scores), gt) << prompt;
            EXPECT_DOUBLE_EQ(dice(threshold_heatmap(hm.scores), gt), 1.0) << prompt;
        }
    }
}

TEST(Oracle, FootprintShortcutMatchesTracing)
{
    const auto& e = default_phantom();
    const CorruptionConfig cfg = CorruptionConfig::stylized(3);
    const auto a = segment_oracle(*e.volume, *e.vocabulary, ap().image, "kidneys", cfg, &ap().footprint);
    const auto b = segment_oracle(*e.volume, *e.vocabulary, ap().image, "kidneys", cfg);
    EXPECT_EQ(a.scores, b.scores);
}

TEST(Oracle, UnknownPromptIsBlank)
{
    const auto& e = default_phantom();
    const auto hm = segment_oracle(*e.volume, *e.vocabulary, ap().image, "flux capacitor", {}, &ap().footprint);
    for (float v : hm.scores.values()) EXPECT_EQ(v, 0.0f);
    EXPECT_EQ(oracle_structure(*e.vocabulary, ImageId{1}, "flux capacitor", {}), "");
}

TEST(Oracle, ConfusionMapSwapsStructure)
{
    const auto& e = default_phantom();
    CorruptionConfig cfg;
    cfg.confusion_map = {{"left kidney", "right kidney"}};
    EXPECT_EQ(oracle_structure(*e.vocabulary, ImageId{1}, "Left Kidney", cfg), "right kidney");
    const auto hm = segment_oracle(*e.volume, *e.vocabulary, ap().image, "left kidney", cfg, &ap().footprint);
    EXPECT_EQ(threshold_heatmap(hm.scores),
              project_gt_mask(*e.volume, resolve_prompt(*e.vocabulary, "right kidney"), ap().footprint));
}

TEST(Oracle, DropoutRateAndDeterminism)
{
    const auto& voc = *default_phantom().vocabulary;
    CorruptionConfig cfg;
    cfg.dropout_prob = 0.2;
    int swapped = 0;
    const int n = 5000;
    for (int i = 0; i < n; ++i) {
        cfg.seed = static_cast<std::uint64_t>(i);
        const std::string s = oracle_structure(voc, ImageId{7}, "sacrum", cfg);
        EXPECT_EQ(s, oracle_structure(voc, ImageId{7}, "  SACRUM", cfg));
        swapped += s != "sacrum";
    }
    // binomial(5000, 0.2): sd about 28
    EXPECT_NEAR(swapped, 1000, 150);
    cfg.dropout_prob = 1.0;
    EXPECT_NE(oracle_structure(voc, ImageId{7}, "sacrum", cfg), "sacrum");
}

TEST(Oracle, CollimationZeroesScores)
{
    const auto& e = default_phantom();
    const DetectorRect rect{100.0, 120.0, 200.0, 260.0};
    const auto bits = label_bits(resolve_prompt(*e.vocabulary, "vertebrae"));
    const Grid2D<float> s = oracle_scores(ap().footprint, bits, CorruptionConfig::stylized(1), rect);
    for (int y = 0; y < s.height(); ++y)
        for (int x = 0; x < s.width(); ++x)
            if (!rect.contains_pixel(x, y)) {
                EXPECT_EQ(s(x, y), 0.0f);
            }
}

TEST(Morphology, DiskDilationAndErosion)
{
    Mask2D m(21, 21, 0);
    m(10, 10) = 1;
    const Mask2D d = morph_disk(m, 3);
    // lattice points in a radius-3 disk
    EXPECT_EQ(area(d), 29u);
    EXPECT_EQ(morph_disk(d, -3), m);
    EXPECT_EQ(morph_disk(m, 0), m);
    EXPECT_EQ(area(morph_disk(m, -1)), 0u);
}

TEST(Blur, PreservesConstantsAndMass)
{
    Grid2D<float> flat(30, 20, 0.25f);
    const auto blurred = gaussian_blur(flat, 2.5);
    for (float v : blurred.values()) EXPECT_NEAR(v, 0.25f, 1e-6);
    Grid2D<float> spot(41, 41, 0.0f);
    spot(20, 20) = 1.0f;
    const auto b = gaussian_blur(spot, 2.0);
    double mass = 0.0;
    for (float v : b.values()) mass += v;
    EXPECT_NEAR(mass, 1.0, 1e-5);
    EXPECT_NEAR(b(20, 21), b(21, 20), 1e-7);
    EXPECT_NEAR(b(20, 21), b(20, 19), 1e-7);
}

TEST(Oracle, DegradationIsMonotoneOnAverage)
{
    const auto& e = default_phantom();
    const std::vector<std::string> prompts{"kidneys", "lower lumbar vertebrae", "sacrum", "heart", "liver"};
    auto mean_dice = [&](const CorruptionConfig& base) {
        double sum = 0.0;
        int n = 0;
        for (int seed = 0; seed < 20; ++seed)
            for (const auto& p : prompts) {
                CorruptionConfig cfg = base;
                cfg.seed = static_cast<std::uint64_t>(seed);
                cfg.dropout_prob = 0.05;
                const auto hm = segment_oracle(*e.volume, *e.vocabulary, ap().image, p, cfg, &ap().footprint);
                sum += dice(threshold_heatmap(hm.scores),
                            project_gt_mask(*e.volume, resolve_prompt(*e.vocabulary, p), ap().footprint));
                ++n;
            }
        return sum / n;
    };
    double prev = 2.0;
    for (double blur : {0.0, 2.0, 4.0, 8.0}) {
        CorruptionConfig c;
        c.blur_sigma_px = blur;
        const double d = mean_dice(c);
        EXPECT_LE(d, prev + 0.02) << "blur " << blur;
        prev = d;
    }
    prev = 2.0;
    for (int r : {0, 2, 4, 8}) {
        CorruptionConfig c;
        c.dilate_erode_px = r;
        const double dd = mean_dice(c);
        c.dilate_erode_px = -r;
        const double de = mean_dice(c);
        EXPECT_LE(dd, prev + 0.02) << "dilate " << r;
        EXPECT_LE(de, prev + 0.02) << "erode " << r;
        prev = std::max(dd, de);
    }
}

TEST(Heatmap, ValidateRejectsOutOfRange)
{
    SegmentationHeatmap hm;
    hm.scores = Grid2D<float>(2, 2, 0.5f);
    EXPECT_NO_THROW(hm.validate());
    hm.scores(1, 1) = 1.5f;
    EXPECT_THROW(hm.validate(), Error);
    hm.scores(1, 1) = std::nanf("");
    EXPECT_THROW(hm.validate(), Error);
}
