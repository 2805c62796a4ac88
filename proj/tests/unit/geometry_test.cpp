#include "support/scenes.hpp"

#include <gtest/gtest.h>

using namespace carmtwin;

namespace {

ProjectionMatrix default_projection(const CArmState& c = {})
{
    return make_projection(make_intrinsics(430.0, 1.2, c.source_detector_dist), pose_from_carm(c));
}

} // namespace

TEST(Intrinsics, DefaultDetectorBinning)
{
    const IntrinsicMatrix k = make_intrinsics(430.0, 1.2, 1200.0);
    EXPECT_EQ(k.width(), 358);
    EXPECT_EQ(k.height(), 358);
    EXPECT_DOUBLE_EQ(k.focal_px, 1000.0);
    EXPECT_DOUBLE_EQ(k.principal_point.x(), 179.0);
    EXPECT_THROW(make_intrinsics(430.0, 0.0, 1200.0), Error);
    EXPECT_THROW(make_intrinsics(0.2, 1.0, 1200.0), Error);
}

TEST(Projection, IsocenterHitsPrincipalPoint)
{
    for (double alpha : {0.0, 37.0, 90.0, -120.0})
        for (double beta : {-30.0, 0.0, 20.0}) {
            CArmState c;
            c.alpha = alpha;
            c.beta = beta;
            c.roll = 13.0;
            c.isocenter = Vec3(10.0, -40.0, 25.0);
            const Vec2 uv = project(default_projection(c), c.isocenter);
            EXPECT_NEAR(uv.x(), 179.0, 1e-9);
            EXPECT_NEAR(uv.y(), 179.0, 1e-9);
        }
}

TEST(Projection, ApMagnificationAndOrientation)
{
    const ProjectionMatrix p = default_projection();
    // 10 mm patient-left at the isocentre: magnification 1200/750, 1.2 mm pixels
    const Vec2 left = project(p, Vec3(10.0, 0.0, 0.0));
    EXPECT_NEAR(left.x() - 179.0, 10.0 * 1.6 / 1.2, 1e-9);
    EXPECT_NEAR(left.y(), 179.0, 1e-9);
    // superior is up on the detector (smaller row index)
    EXPECT_LT(project(p, Vec3(0.0, 10.0, 0.0)).y(), 179.0);
    EXPECT_TRUE(p.pose.viewing_direction().isApprox(Vec3(0, 0, -1)));
    EXPECT_TRUE(p.pose.source_position().isApprox(Vec3(0, 0, 750)));
}

TEST(Projection, LateralLooksAlongMinusX)
{
    CArmState c;
    c.alpha = 90.0;
    EXPECT_TRUE(pose_from_carm(c).viewing_direction().isApprox(Vec3(-1, 0, 0), 1e-12));
    c.alpha = 0.0;
    c.beta = 90.0;
    EXPECT_NEAR(pose_from_carm(c).viewing_direction().y(), 1.0, 1e-12);
}

TEST(Projection, RollKeepsViewingAxis)
{
    CArmState a, b;
    a.alpha = b.alpha = 30.0;
    b.roll = 45.0;
    EXPECT_NEAR(viewing_angle(pose_from_carm(a), pose_from_carm(b)), 0.0, 1e-9);
    EXPECT_NEAR(viewing_angle(pose_from_carm(a), rolled(pose_from_carm(a), 45.0)), 0.0, 1e-9);
}

TEST(Projection, BackprojectRoundTripProperty)
{
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 500; ++trial) {
        CArmState c;
        c.alpha = -180.0 + 360.0 * uniform01(rng);
        c.beta = -45.0 + 90.0 * uniform01(rng);
        c.roll = -90.0 + 180.0 * uniform01(rng);
        c.isocenter = Vec3(uniform01(rng), uniform01(rng), uniform01(rng)) * 100.0;
        const ProjectionMatrix p = default_projection(c);
        const Vec2 uv(358.0 * uniform01(rng), 358.0 * uniform01(rng));
        const double depth = 200.0 + 900.0 * uniform01(rng);
        const Vec3 x = backproject(p, uv, depth);
        EXPECT_LT((project(p, x) - uv).norm(), 1e-7);
        // the point lies on the ray from the source
        const Vec3 d = (x - p.pose.source_position()).normalized();
        EXPECT_LT((d - ray_direction(p, uv)).norm(), 1e-9);
        EXPECT_TRUE((p.pose.rotation * p.pose.rotation.transpose()).isIdentity(1e-12));
        EXPECT_NEAR(p.pose.rotation.determinant(), 1.0, 1e-12);
    }
}

TEST(ViewingAngle, SymmetricAcuteAndExact)
{
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
        CArmState a, b;
        a.alpha = -180.0 + 360.0 * uniform01(rng);
        b.alpha = -180.0 + 360.0 * uniform01(rng);
        const double ab = viewing_angle(pose_from_carm(a), pose_from_carm(b));
        EXPECT_DOUBLE_EQ(ab, viewing_angle(pose_from_carm(b), pose_from_carm(a)));
        EXPECT_GE(ab, 0.0);
        EXPECT_LE(ab, 90.0);
        // pure orbits: angle is the acute difference of alpha
        double d = std::fmod(std::abs(a.alpha - b.alpha), 180.0);
        d = std::min(d, 180.0 - d);
        EXPECT_NEAR(ab, d, 1e-9);
    }
}

TEST(Angles, Normalization)
{
    EXPECT_DOUBLE_EQ(normalize_angle_deg(190.0), -170.0);
    EXPECT_DOUBLE_EQ(normalize_angle_deg(-180.0), 180.0);
    EXPECT_DOUBLE_EQ(normalize_angle_deg(540.0), 180.0);
    EXPECT_DOUBLE_EQ(normalize_angle_deg(-30.0), -30.0);
}

TEST(CArmState, RejectsBadDistances)
{
    CArmState c;
    c.source_detector_dist = 700.0;
    EXPECT_THROW(c.validate(), Error);
    c = {};
    c.alpha = std::nan("");
    EXPECT_THROW(pose_from_carm(c), Error);
}

TEST(Box3, IntersectionVolume)
{
    const Box3 a{Vec3(0, 0, 0), Vec3(2, 2, 2)};
    const Box3 b{Vec3(1, 1, 1), Vec3(3, 3, 3)};
    EXPECT_DOUBLE_EQ(a.intersect(b).volume(), 1.0);
    EXPECT_DOUBLE_EQ(a.intersect(Box3{Vec3(5, 5, 5), Vec3(6, 6, 6)}).volume(), 0.0);
}
