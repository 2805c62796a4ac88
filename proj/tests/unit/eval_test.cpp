#include "support/scenes.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace carmtwin;

namespace {

Mask2D rect_mask(int w, int h, int x0, int y0, int x1, int y1)
{
    Mask2D m(w, h, 0);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) m(x, y) = 1;
    return m;
}

Box3 box(Vec3 lo, Vec3 hi) { return {lo, hi}; }

const std::vector<StudyImage>& study_images()
{
    static const std::vector<StudyImage> images = [] {
        const auto views = parse_views("ap 0 0 0\nlateral 90 0 0\noblique45 45 0 0\ncranial30 0 30 0\n");
        return render_views(*default_phantom().volume, views);
    }();
    return images;
}

SubsetStudyParams quick_params()
{
    SubsetStudyParams p;
    p.n_max = 3;
    p.draws_per_primary = 8;
    p.reconstruction.grid_spacing_mm = 8.0;
    p.reconstruction.radius_mm = 160.0;
    return p;
}

std::vector<std::vector<std::string>> read_csv(const std::string& text)
{
    std::vector<std::vector<std::string>> rows;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(cells);
    }
    return rows;
}

} // namespace

TEST(Dice, AnalyticCases)
{
    const Mask2D a = rect_mask(10, 10, 0, 0, 4, 10);
    EXPECT_DOUBLE_EQ(dice(a, a), 1.0);
    EXPECT_DOUBLE_EQ(dice(a, rect_mask(10, 10, 6, 0, 10, 10)), 0.0);
    EXPECT_DOUBLE_EQ(dice(a, rect_mask(10, 10, 0, 0, 2, 10)), 2.0 * 20 / 60);
    EXPECT_DOUBLE_EQ(dice(rect_mask(10, 10, 0, 0, 4, 10), rect_mask(10, 10, 2, 0, 6, 10)), 0.5);
    EXPECT_DOUBLE_EQ(dice(Mask2D(5, 5, 0), Mask2D(5, 5, 0)), 1.0);
    EXPECT_DOUBLE_EQ(dice(Mask2D(5, 5, 0), rect_mask(5, 5, 0, 0, 1, 1)), 0.0);
    try {
        dice(Mask2D(5, 5, 0), Mask2D(5, 6, 0));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::shape_mismatch);
    }
}

TEST(Dice, SymmetricAndBounded)
{
    std::mt19937_64 rng(3);
    for (int t = 0; t < 200; ++t) {
        Mask2D a(12, 9, 0), b(12, 9, 0);
        for (std::size_t i = 0; i < a.size(); ++i) {
            a.values()[i] = (rng() & 3) == 0;
            b.values()[i] = (rng() & 1) == 0;
        }
        const double d = dice(a, b);
        EXPECT_DOUBLE_EQ(d, dice(b, a));
        EXPECT_GE(d, 0.0);
        EXPECT_LE(d, 1.0);
    }
}

TEST(CentroidError2d, PixelOffsetScaledByPitch)
{
    const Mask2D gt = rect_mask(300, 20, 10, 5, 20, 15);
    Grid2D<float> pred(300, 20, 0.0f);
    for (int y = 5; y < 15; ++y)
        for (int x = 110; x < 120; ++x) pred(x, y) = 1.0f;
    const auto e = centroid_error_2d(pred, gt, 0.3);
    ASSERT_TRUE(e);
    EXPECT_NEAR(*e, 30.0, 1e-9);
    EXPECT_FALSE(centroid_error_2d(Grid2D<float>(300, 20, 0.0f), gt, 0.3));
    EXPECT_FALSE(centroid_error_2d(pred, Mask2D(300, 20, 0), 0.3));
}

TEST(BboxPr, AnalyticCases)
{
    const Box3 a = box({0, 0, 0}, {10, 10, 10});
    const BoxPR same = bbox_pr(a, a);
    EXPECT_DOUBLE_EQ(*same.precision, 1.0);
    EXPECT_DOUBLE_EQ(*same.recall, 1.0);

    const Box3 big = box({0, 0, 0}, {20, 20, 20});
    const BoxPR over = bbox_pr(big, a);
    EXPECT_DOUBLE_EQ(*over.precision, 1.0 / 8.0);
    EXPECT_DOUBLE_EQ(*over.recall, 1.0);
    const BoxPR swapped = bbox_pr(a, big);
    EXPECT_DOUBLE_EQ(*swapped.precision, *over.recall);
    EXPECT_DOUBLE_EQ(*swapped.recall, *over.precision);

    const BoxPR apart = bbox_pr(box({30, 0, 0}, {40, 10, 10}), a);
    EXPECT_DOUBLE_EQ(*apart.precision, 0.0);
    EXPECT_DOUBLE_EQ(*apart.recall, 0.0);

    const BoxPR flat = bbox_pr(box({0, 0, 5}, {10, 10, 5}), a);
    EXPECT_FALSE(flat.precision);
    EXPECT_DOUBLE_EQ(*flat.recall, 0.0);

    EXPECT_THROW(bbox_pr(box({1, 0, 0}, {0, 1, 1}), a), Error);
}

TEST(MeanSd, SampleStandardDeviation)
{
    EXPECT_FALSE(mean_sd({}));
    const auto one = mean_sd({4.0});
    EXPECT_DOUBLE_EQ(one->mean, 4.0);
    EXPECT_DOUBLE_EQ(one->sd, 0.0);
    const auto m = mean_sd({2, 4, 4, 4, 5, 5, 7, 9});
    EXPECT_DOUBLE_EQ(m->mean, 5.0);
    EXPECT_NEAR(m->sd, std::sqrt(32.0 / 7.0), 1e-12);
    EXPECT_EQ(m->n, 8u);
}

TEST(StudyInputs, ParseViewsAndPrompts)
{
    const auto v = parse_views("# c\nap 0 0 0\n\nlat 90 0 5 1 2 3 # trailing\n");
    ASSERT_EQ(v.size(), 2u);
    EXPECT_EQ(v[1].name, "lat");
    EXPECT_DOUBLE_EQ(v[1].carm.alpha, 90.0);
    EXPECT_DOUBLE_EQ(v[1].carm.roll, 5.0);
    EXPECT_EQ(v[1].carm.isocenter, Vec3(1, 2, 3));
    EXPECT_THROW(parse_views("ap 0 0\n"), Error);
    EXPECT_THROW(parse_views("ap 0 x 0\n"), Error);
    EXPECT_EQ(parse_prompt_list("# head\nsacrum\n  left kidney  # x\n\n"),
              (std::vector<std::string>{"sacrum", "left kidney"}));
}

TEST(SubsetSampler, RespectsSeparationAndSizes)
{
    const auto& images = study_images();
    const SubsetStudyParams p = quick_params();
    const auto subsets = sample_view_subsets(images, p);
    ASSERT_FALSE(subsets.empty());
    for (const auto& s : subsets) {
        EXPECT_GE(static_cast<int>(s.size()), p.n_min);
        EXPECT_LE(static_cast<int>(s.size()), p.n_max);
        for (std::size_t i = 0; i < s.size(); ++i)
            for (std::size_t j = i + 1; j < s.size(); ++j)
                EXPECT_GE(viewing_angle(images[s[i]].image.projection.pose, images[s[j]].image.projection.pose), p.min_angle_deg);
    }
    EXPECT_EQ(subsets, sample_view_subsets(images, p));
}

TEST(SubsetSampler, ConfigurationErrors)
{
    const auto& images = study_images();
    SubsetStudyParams p = quick_params();
    p.n_min = 1;
    EXPECT_THROW(sample_view_subsets(images, p), Error);
    p = quick_params();
    p.min_angle_deg = 179.0;
    try {
        sample_view_subsets(images, p);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::configuration);
    }
}

TEST(SubsetStudy, SummaryMatchesPerSampleCsv)
{
    const auto& e = default_phantom();
    const std::vector<std::string> prompts{"sacrum", "left kidney"};
    const SubsetStudy s = run_subset_study(*e.volume, *e.vocabulary, study_images(), prompts, CorruptionConfig::identity(),
                                           quick_params());
    ASSERT_EQ(s.rows.size(), 2u);
    std::ostringstream os;
    write_subset_samples(s, os);
    const auto csv = read_csv(os.str());
    ASSERT_EQ(csv.front()[4], "centroid3d_mm");
    for (const auto& row : s.rows) {
        std::vector<double> c3;
        std::size_t n = 0, undefined = 0;
        for (std::size_t i = 1; i < csv.size(); ++i) {
            if (csv[i][0] != row.prompt) continue;
            ++n;
            if (csv[i][4].empty()) ++undefined;
            else c3.push_back(std::stod(csv[i][4]));
        }
        EXPECT_EQ(row.n_samples, n);
        EXPECT_EQ(row.n_undefined, undefined);
        const auto m = mean_sd(c3);
        ASSERT_EQ(m.has_value(), row.centroid3d_mm.has_value());
        if (m) {
            EXPECT_NEAR(m->mean, row.centroid3d_mm->mean, 1e-9);
            EXPECT_NEAR(m->sd, row.centroid3d_mm->sd, 1e-9);
        }
    }
}

TEST(SubsetStudy, DiceFloorAboveOneLeavesNoRows)
{
    const auto& e = default_phantom();
    SubsetStudyParams p = quick_params();
    p.dice_floor = 1.1;
    const SubsetStudy s = run_subset_study(*e.volume, *e.vocabulary, study_images(), {"sacrum"}, CorruptionConfig::identity(), p);
    EXPECT_TRUE(s.rows.empty());
    EXPECT_TRUE(s.samples.empty());
}

TEST(SubsetStudy, SameSeedSameOutput)
{
    const auto& e = default_phantom();
    auto run = [&] {
        const SubsetStudy s = run_subset_study(*e.volume, *e.vocabulary, study_images(), {"kidneys", "l3 vertebra bone"},
                                               CorruptionConfig::stylized(7), quick_params());
        std::ostringstream os;
        write_subset_samples(s, os);
        write_summary(s.rows, os);
        return os.str();
    };
    EXPECT_EQ(run(), run());
}

TEST(SubsetStudy, UnknownPromptIsConfigurationError)
{
    const auto& e = default_phantom();
    EXPECT_THROW(run_subset_study(*e.volume, *e.vocabulary, study_images(), {"spleen of doom"}, CorruptionConfig::identity(),
                                  quick_params()),
                 Error);
}

TEST(SingleImageStudy, IdentityOracleIsPerfect)
{
    const auto& e = default_phantom();
    const SingleImageStudy s = run_single_image_study(*e.volume, *e.vocabulary, study_images(), {"sacrum", "left kidney"},
                                                      CorruptionConfig::identity());
    ASSERT_EQ(s.samples.size(), 8u);
    for (const auto& x : s.samples) {
        EXPECT_DOUBLE_EQ(x.dice, 1.0);
        if (x.centroid2d_mm) {
            EXPECT_NEAR(*x.centroid2d_mm, 0.0, 1e-9);
        }
    }
    ASSERT_EQ(s.rows.size(), 2u);
    EXPECT_DOUBLE_EQ(s.rows[0].dice->mean, 1.0);
}

TEST(Csv, QuotesSpecialFields)
{
    EXPECT_EQ(csv_field("plain"), "plain");
    EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
    EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
}
