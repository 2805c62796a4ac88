#include "support/scenes.hpp"

#include <gtest/gtest.h>

#include <sstream>
#include <thread>

using namespace carmtwin;

namespace {

std::unique_ptr<Session> make_session(SessionConfig cfg = {})
{
    const auto& e = default_phantom();
    return std::make_unique<Session>(e.volume, e.vocabulary, carmtwin::testing::identity_oracle(), RuleBasedFallback{}, cfg);
}

ExecutionReport shoot_confirmed(Session& s)
{
    const ExecutionReport staged = s.execute(Action::shoot());
    EXPECT_TRUE(staged.staged);
    return s.confirm();
}

void move_confirmed(Session& s, std::map<Axis, double> d)
{
    ASSERT_TRUE(s.execute(Action::move(std::move(d))).staged);
    ASSERT_TRUE(s.confirm().ok);
}

} // namespace

TEST(Session, ShootingIsGatedByConfirmation)
{
    auto s = make_session();
    const ExecutionReport r = s->execute(Action::shoot());
    EXPECT_TRUE(r.ok);
    ASSERT_TRUE(r.staged);
    EXPECT_EQ(r.staged->kind, PendingKind::acquisition);
    EXPECT_TRUE(s->state()->twin.history->empty());
    const ExecutionReport c = s->confirm();
    EXPECT_EQ(c.operation, "confirm");
    ASSERT_TRUE(c.image_id);
    EXPECT_EQ(c.image_id->value, 1u);
    EXPECT_EQ(s->state()->twin.history->size(), 1u);
    EXPECT_TRUE(s->confirm().noop);
}

TEST(Session, UngatedShootAcquiresImmediately)
{
    SessionConfig cfg;
    cfg.radiation_gating = false;
    auto s = make_session(cfg);
    const ExecutionReport r = s->execute(Action::shoot());
    EXPECT_FALSE(r.staged);
    EXPECT_TRUE(r.image_id);
}

TEST(Session, NoMotionWithoutConfirmation)
{
    auto s = make_session();
    const CArmState start = s->state()->carm;
    for (const Action& a : {Action::move({{Axis::roll, 30.0}}), Action::view(ViewName::lateral, "current"),
                            Action::move({{Axis::x, 10.0}})}) {
        const ExecutionReport r = s->execute(a);
        EXPECT_TRUE(r.staged);
        EXPECT_TRUE(s->state()->carm == start);
    }
    // each new command replaced the previous pending one
    const ExecutionReport cancel = s->cancel();
    ASSERT_TRUE(cancel.cancelled);
    EXPECT_EQ(*cancel.cancelled, "action;move;x=10mm");
    EXPECT_TRUE(s->state()->carm == start);
    EXPECT_TRUE(s->cancel().noop);
}

TEST(Session, NewCommandCancelsPending)
{
    auto s = make_session();
    s->execute(Action::move({{Axis::roll, 30.0}}));
    const ExecutionReport r = s->execute(Action::clear_collimation());
    ASSERT_TRUE(r.cancelled);
    EXPECT_EQ(*r.cancelled, "action;move;roll=30deg");
    EXPECT_FALSE(s->state()->pending);
    EXPECT_TRUE(s->confirm().noop);
}

TEST(Session, MoveAppliesDeltasAfterConfirm)
{
    auto s = make_session();
    move_confirmed(*s, {{Axis::roll, 30.0}, {Axis::y, -20.0}});
    const CArmState c = s->state()->carm;
    EXPECT_DOUBLE_EQ(c.roll, 30.0);
    EXPECT_DOUBLE_EQ(c.isocenter.y(), -20.0);
}

TEST(Session, MoveBeyondLimitsIsRejected)
{
    auto s = make_session();
    const ExecutionReport r = s->execute(Action::move({{Axis::beta, 60.0}}));
    EXPECT_FALSE(r.ok);
    EXPECT_FALSE(r.staged);
    EXPECT_FALSE(s->state()->pending);
    EXPECT_NE(r.message.find("beta"), std::string::npos);
    // alpha wraps rather than leaving its range
    EXPECT_TRUE(s->execute(Action::move({{Axis::alpha, 270.0}})).staged);
}

TEST(Session, ViewTargetsAreClamped)
{
    SessionConfig cfg;
    cfg.limits.isocenter = Box3{Vec3(-5, -5, -5), Vec3(5, 5, 5)};
    auto s = make_session(cfg);
    shoot_confirmed(*s);
    const ExecutionReport r = s->execute(Action::view(ViewName::ap, "sacrum"));
    ASSERT_TRUE(r.staged);
    EXPECT_FALSE(r.warnings.empty());
    EXPECT_TRUE(cfg.limits.violations(r.staged->target).empty());
}

TEST(Session, ViewWithoutImagesWarns)
{
    auto s = make_session();
    const ExecutionReport r = s->execute(Action::view(ViewName::lateral, "heart"));
    ASSERT_TRUE(r.staged);
    EXPECT_EQ(r.warnings, std::vector<std::string>{"no localization available"});
    EXPECT_DOUBLE_EQ(r.staged->target.alpha, 90.0);
}

TEST(Session, HighlightNeedsAnImage)
{
    auto s = make_session();
    EXPECT_FALSE(s->execute(Action::highlight("heart")).ok);
    shoot_confirmed(*s);
    const ExecutionReport r = s->execute(Action::highlight("Heart"));
    ASSERT_TRUE(r.overlay);
    EXPECT_TRUE(r.success());
    const auto& e = default_phantom();
    LabelFootprint fp = compute_label_footprint(*e.volume, s->state()->current_image()->projection);
    EXPECT_DOUBLE_EQ(dice(*r.overlay, project_gt_mask(*e.volume, resolve_prompt(*e.vocabulary, "heart"), fp)), 1.0);
}

TEST(Session, UnknownPromptIsNotASuccess)
{
    auto s = make_session();
    shoot_confirmed(*s);
    const ExecutionReport r = s->execute(Action::highlight("flux capacitor"));
    EXPECT_TRUE(r.ok);
    EXPECT_FALSE(r.prompt_resolved);
    EXPECT_FALSE(r.success());
}

TEST(Session, SingleViewCollimateOnlyRecenters)
{
    auto s = make_session();
    shoot_confirmed(*s);
    const ExecutionReport r = s->execute(Action::collimate("sacrum"));
    EXPECT_TRUE(r.ok);
    EXPECT_TRUE(r.fallback);
    EXPECT_FALSE(r.collimation);
    ASSERT_TRUE(r.staged);
    EXPECT_FALSE(s->state()->active_collimation);
    // recentering moves the isocentre toward the sacrum in the AP plane only
    const auto gt = gt_centroid_bbox(*default_phantom().volume, resolve_prompt(*default_phantom().vocabulary, "sacrum"));
    EXPECT_NEAR(r.staged->target.isocenter.x(), gt.centroid.x(), 6.0);
    EXPECT_NEAR(r.staged->target.isocenter.y(), gt.centroid.y(), 6.0);
    EXPECT_DOUBLE_EQ(r.staged->target.isocenter.z(), 0.0);
}

TEST(Session, CollimationPersistsUntilCleared)
{
    auto s = make_session();
    shoot_confirmed(*s);
    move_confirmed(*s, {{Axis::alpha, 90.0}});
    shoot_confirmed(*s);
    const ExecutionReport col = s->execute(Action::collimate("kidneys"));
    ASSERT_TRUE(col.ok) << col.message;
    ASSERT_TRUE(col.collimation);
    ASSERT_TRUE(col.reconstruction);
    EXPECT_EQ(col.reconstruction->views_used.n(), 2u);
    for (int shot = 0; shot < 2; ++shot) {
        const ExecutionReport c = shoot_confirmed(*s);
        const ImagePtr img = s->state()->current_image();
        ASSERT_TRUE(img->collimation_px);
        EXPECT_NO_THROW(img->validate());
        EXPECT_EQ(img->id, *c.image_id);
    }
    EXPECT_FALSE(s->execute(Action::clear_collimation()).noop);
    EXPECT_TRUE(s->execute(Action::clear_collimation()).noop);
    shoot_confirmed(*s);
    EXPECT_FALSE(s->state()->current_image()->collimation_px);
}

TEST(Session, ReconstructionIsCachedPerSelection)
{
    auto s = make_session();
    shoot_confirmed(*s);
    move_confirmed(*s, {{Axis::alpha, 90.0}});
    shoot_confirmed(*s);
    const auto a = s->execute(Action::collimate("sacrum")).reconstruction;
    const auto b = s->execute(Action::view(ViewName::current, "sacrum")).reconstruction;
    EXPECT_EQ(a.get(), b.get());
}

TEST(Session, ScriptsAreDeterministic)
{
    const auto script = parse_script(std::string(assets::demo_script));
    ASSERT_EQ(script.size(), 12u);
    auto run = [&] {
        auto s = make_session();
        const SessionTranscript t = run_session_script(script, *s, true);
        std::ostringstream os;
        write_transcript(t, os, s->last_reconstruction());
        return os.str();
    };
    const std::string first = run();
    EXPECT_EQ(first, run());
    EXPECT_NE(first.find("\"succeeded\":12"), std::string::npos);
}

TEST(Session, SnapshotsAreSafeDuringExecution)
{
    auto s = make_session();
    std::atomic<bool> done{false};
    std::thread reader([&] {
        while (!done) {
            const auto st = s->state();
            EXPECT_LE(st->twin.history->size(), 3u);
            const auto tr = s->transcript();
            (void)tr;
        }
    });
    for (int i = 0; i < 3; ++i) s->run_step("take a shot", true);
    done = true;
    reader.join();
    EXPECT_EQ(s->state()->twin.history->size(), 3u);
    EXPECT_EQ(s->transcript()->size(), 3u);
}

TEST(Session, RejectsBadConfiguration)
{
    SessionConfig cfg;
    cfg.initial.beta = 80.0;
    EXPECT_THROW(make_session(cfg), Error);
    const auto& e = default_phantom();
    EXPECT_THROW(Session(e.volume, e.vocabulary, nullptr, RuleBasedFallback{}), Error);
}

TEST(Transcript, JsonShape)
{
    auto s = make_session();
    const TranscriptEntry e = s->run_step("take a shot", true);
    const nlohmann::json j = transcript_entry_json(e, 0);
    EXPECT_EQ(j["step"], 1);
    EXPECT_EQ(j["action"], "action;shoot");
    EXPECT_EQ(j["success"], true);
    EXPECT_EQ(j["confirmation"]["image_id"], 1);
    Mask2D m(4, 2, 0);
    m(1, 0) = m(2, 0) = m(3, 0) = m(0, 1) = 1;
    const nlohmann::json runs = mask_runs_json(m);
    EXPECT_EQ(runs["width"], 4);
    EXPECT_EQ(runs["runs"], nlohmann::json::parse("[1,4]"));
}
