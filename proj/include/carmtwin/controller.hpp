#pragma once

// Session state machine: executes actions against the simulated C-arm, gates
// motion (and, by default, radiation) behind explicit confirmation, and keeps
// the digital twin up to date.

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "carmtwin/error.hpp"
#include "carmtwin/external.hpp"
#include "carmtwin/geometry.hpp"
#include "carmtwin/interpreter.hpp"
#include "carmtwin/phantom.hpp"
#include "carmtwin/protocol.hpp"
#include "carmtwin/segmentation.hpp"
#include "carmtwin/twin.hpp"
#include "carmtwin/vocabulary.hpp"
#include "carmtwin/xray.hpp"

namespace carmtwin {

/// Reachable range of every axis. Angles are compared after normalization to
/// (-180, 180].
struct AxisLimits {
    double alpha_min = -180.0, alpha_max = 180.0;
    double beta_min = -45.0, beta_max = 45.0;
    double roll_min = -90.0, roll_max = 90.0;
    Box3 isocenter{Vec3(-250.0, -450.0, -200.0), Vec3(250.0, 450.0, 200.0)};

    /// One message per axis outside its range; empty when reachable.
    std::vector<std::string> violations(const CArmState& s) const
    {
        const CArmState n = s.normalized();
        std::vector<std::string> out;
        auto check = [&](const char* name, double v, double lo, double hi, const char* unit) {
            if (v < lo || v > hi)
                out.push_back(std::string(name) + " " + format_double(v) + unit + " outside [" + format_double(lo) + ", "
                              + format_double(hi) + "]");
        };
        check("alpha", n.alpha, alpha_min, alpha_max, "deg");
        check("beta", n.beta, beta_min, beta_max, "deg");
        check("roll", n.roll, roll_min, roll_max, "deg");
        static const char* iso_names[] = {"x", "y", "z"};
        for (int a = 0; a < 3; ++a) check(iso_names[a], n.isocenter[a], isocenter.min[a], isocenter.max[a], "mm");
        return out;
    }

    CArmState clamp(const CArmState& s) const
    {
        CArmState n = s.normalized();
        n.alpha = std::clamp(n.alpha, alpha_min, alpha_max);
        n.beta = std::clamp(n.beta, beta_min, beta_max);
        n.roll = std::clamp(n.roll, roll_min, roll_max);
        n.isocenter = n.isocenter.cwiseMax(isocenter.min).cwiseMin(isocenter.max);
        return n;
    }
};

enum class PendingKind { motion, acquisition };

struct PendingMotion {
    PendingKind kind = PendingKind::motion;
    CArmState target;
    std::string reason; ///< originating command
    bool requires_confirmation = true;
};

struct SessionConfig {
    double detector_mm = 430.0;
    double pixel_pitch_mm = 1.2;
    CArmState initial;
    AxisLimits limits;
    bool radiation_gating = true;
    ReconstructionParams reconstruction;
    ViewSelectionParams selection;
};

struct SessionState {
    CArmState carm;
    TwinState twin;
    std::optional<CollimationBox> active_collimation;
    std::optional<PendingMotion> pending;
    Tick tick;
    std::uint64_t next_image_id = 1;

    ImagePtr current_image() const { return twin.history->latest(); }
};

struct ExecutionReport {
    std::string operation = "execute"; ///< execute | confirm | cancel
    std::optional<Action> action;      ///< set for execute
    bool ok = true;
    bool noop = false;
    bool prompt_resolved = true; ///< prompt is "current" or in the vocabulary
    std::string message;
    std::vector<std::string> warnings;
    std::optional<ImageId> image_id;
    std::optional<Mask2D> overlay; ///< highlight result at threshold 0.5
    std::shared_ptr<const ReconstructionResult> reconstruction;
    std::optional<FallbackLocalization> fallback;
    std::optional<CollimationBox> collimation;
    std::optional<PendingMotion> staged;
    std::optional<std::string> cancelled;
    CArmState carm_after;

    /// Completed without error and, for prompt-bearing actions, with a prompt
    /// the vocabulary knows.
    bool success() const { return ok && prompt_resolved && !(action && action->kind == ActionKind::report_error); }
};

struct TranscriptEntry {
    std::string utterance;
    ExecutionReport report;
    std::optional<ExecutionReport> confirmation; ///< auto-confirmation, if any
};

class Session {
public:
    Session(std::shared_ptr<const LabeledVolume> volume, std::shared_ptr<const PromptVocabulary> vocabulary,
            std::shared_ptr<SegmentationModel> segmenter, LanguageAdapter adapter, SessionConfig config = {})
        : volume_(std::move(volume)), vocabulary_(std::move(vocabulary)), segmenter_(std::move(segmenter)),
          adapter_(std::move(adapter)), config_(std::move(config))
    {
        if (!volume_ || !vocabulary_ || !segmenter_) throw Error(ErrorCode::configuration, "session needs a phantom, vocabulary and segmenter");
        config_.initial.validate();
        if (!config_.limits.violations(config_.initial).empty())
            throw Error(ErrorCode::configuration, "initial C-arm state violates the axis limits");
        make_intrinsics(config_.detector_mm, config_.pixel_pitch_mm, config_.initial.source_detector_dist);
        state_.carm = config_.initial.normalized();
        state_.twin.selection_params = config_.selection;
        publish();
    }

    /// Interprets an utterance and executes the resulting action.
    ExecutionReport submit(const std::string& utterance)
    {
        std::lock_guard lock(exec_);
        const Action a = interpret(utterance, context_, adapter_);
        ExecutionReport rep = execute_locked(a);
        transcript_.push_back({utterance, rep, std::nullopt});
        publish();
        return rep;
    }

    ExecutionReport execute(const Action& a)
    {
        std::lock_guard lock(exec_);
        ExecutionReport rep = execute_locked(a);
        publish();
        return rep;
    }

    ExecutionReport confirm()
    {
        std::lock_guard lock(exec_);
        ExecutionReport rep = confirm_locked();
        publish();
        return rep;
    }

    ExecutionReport cancel()
    {
        std::lock_guard lock(exec_);
        ExecutionReport rep;
        rep.operation = "cancel";
        if (!state_.pending) {
            rep.noop = true;
            rep.message = "nothing pending";
        } else {
            rep.cancelled = state_.pending->reason;
            rep.message = "cancelled: " + state_.pending->reason;
            state_.pending.reset();
        }
        rep.carm_after = state_.carm;
        publish();
        return rep;
    }

    /// Runs an utterance and, when auto_confirm is set, confirms whatever it
    /// staged. The confirmation is folded into the transcript entry.
    TranscriptEntry run_step(const std::string& utterance, bool auto_confirm)
    {
        std::lock_guard lock(exec_);
        TranscriptEntry entry{utterance, execute_locked(interpret(utterance, context_, adapter_)), std::nullopt};
        if (auto_confirm && entry.report.staged) {
            entry.confirmation = confirm_locked();
            if (!entry.confirmation->ok) entry.report.ok = false;
        }
        transcript_.push_back(entry);
        publish();
        return entry;
    }

    /// Heatmap for prompt on the current image.
    SegmentationHeatmap overlay(const std::string& prompt)
    {
        std::lock_guard lock(exec_);
        const ImagePtr img = state_.current_image();
        if (!img) throw Error(ErrorCode::not_found, "no image acquired yet");
        return heatmap(*img, prompt);
    }

    /// Snapshot of the state; safe to call while another thread executes.
    std::shared_ptr<const SessionState> state() const
    {
        std::lock_guard lock(snapshot_mutex_);
        return snapshot_;
    }

    std::shared_ptr<const std::vector<TranscriptEntry>> transcript() const
    {
        std::lock_guard lock(snapshot_mutex_);
        return transcript_snapshot_;
    }

    /// Most recent reconstruction produced by collimate or view, if any.
    std::shared_ptr<const ReconstructionResult> last_reconstruction() const
    {
        std::lock_guard lock(snapshot_mutex_);
        return last_reconstruction_snapshot_;
    }

    const SessionConfig& config() const noexcept { return config_; }
    const LabeledVolume& volume() const noexcept { return *volume_; }
    const PromptVocabulary& vocabulary() const noexcept { return *vocabulary_; }

    ProjectionMatrix projection_for(const CArmState& s, Tick t = {}) const
    {
        return make_projection(make_intrinsics(config_.detector_mm, config_.pixel_pitch_mm, s.source_detector_dist),
                               pose_from_carm(s, t));
    }

private:
    struct Localization {
        Vec3 isocenter;
        std::shared_ptr<const ReconstructionResult> reconstruction;
        std::optional<FallbackLocalization> fallback;
    };

    void publish()
    {
        auto snap = std::make_shared<const SessionState>(state_);
        auto tr = std::make_shared<const std::vector<TranscriptEntry>>(transcript_);
        std::lock_guard lock(snapshot_mutex_);
        snapshot_ = std::move(snap);
        transcript_snapshot_ = std::move(tr);
        last_reconstruction_snapshot_ = last_reconstruction_;
    }

    bool prompt_known(const std::string& p) const { return p == current_prompt || !vocabulary_->canonical(p).empty(); }

    const SegmentationHeatmap& heatmap(const XRayImage& img, const std::string& prompt)
    {
        const auto key = std::make_pair(img.id, normalize_prompt(prompt));
        auto it = heatmaps_.find(key);
        if (it == heatmaps_.end()) it = heatmaps_.emplace(key, segmenter_->segment(img, prompt)).first;
        return it->second;
    }

    /// Centroid of prompt from the current view selection: multi-view
    /// reconstruction when possible, single-image fallback otherwise.
    Localization localize(const std::string& prompt)
    {
        const ImagePtr img = state_.current_image();
        if (!img) throw Error(ErrorCode::not_found, "no image acquired yet");
        const ViewSelection sel = select_views(*state_.twin.history, img->id, config_.selection);
        Localization out;
        if (sel.n() == 1) {
            out.fallback = single_image_fallback(*img, heatmap(*img, prompt));
            out.isocenter = img->carm.isocenter + out.fallback->translation_mm;
            return out;
        }
        if (const auto* c = state_.twin.cached(prompt, sel.primary); c && c->selection == sel) {
            out.reconstruction = c->result;
        } else {
            std::vector<ViewHeatmap> views;
            for (ImageId id : sel.ids()) {
                const ImagePtr v = state_.twin.history->find(id);
                views.push_back({std::cref(v->projection), std::cref(heatmap(*v, prompt))});
            }
            auto result = std::make_shared<const ReconstructionResult>(
                reconstruct(sel, views, img->carm.isocenter, config_.reconstruction));
            state_.twin.store(prompt, {sel, result});
            out.reconstruction = std::move(result);
        }
        last_reconstruction_ = out.reconstruction;
        out.isocenter = out.reconstruction->centroid;
        return out;
    }

    void acquire(ExecutionReport& rep)
    {
        state_.tick.value += 1;
        const ProjectionMatrix p = projection_for(state_.carm, state_.tick);
        auto footprint = std::make_shared<LabelFootprint>();
        XRayImage img = render_drr(*volume_, p, state_.active_collimation, &rep.warnings, footprint.get());
        img.id = ImageId{state_.next_image_id++};
        img.carm = state_.carm;
        img.acquired_at = state_.tick;
        auto ptr = std::make_shared<const XRayImage>(std::move(img));
        state_.twin = update_twin(state_.twin, ptr);
        segmenter_->observe(*ptr, std::move(footprint));
        rep.image_id = ptr->id;
        rep.message = "acquired image " + std::to_string(ptr->id.value)
            + (ptr->collimation_px ? " (collimated to " + state_.active_collimation->source_prompt + ")" : "");
    }

    void stage(ExecutionReport& rep, PendingKind kind, const CArmState& target, std::string reason)
    {
        state_.pending = PendingMotion{kind, target.normalized(), std::move(reason), true};
        rep.staged = state_.pending;
    }

    ExecutionReport confirm_locked()
    {
        ExecutionReport rep;
        rep.operation = "confirm";
        if (!state_.pending) {
            rep.noop = true;
            rep.message = "nothing to confirm";
            rep.carm_after = state_.carm;
            return rep;
        }
        const PendingMotion p = *state_.pending;
        state_.pending.reset();
        try {
            if (p.kind == PendingKind::motion) {
                state_.carm = p.target;
                state_.tick.value += 1;
                rep.message = "moved: " + p.reason;
            } else {
                acquire(rep);
            }
        } catch (const std::exception& e) {
            rep.ok = false;
            rep.message = e.what();
        }
        rep.carm_after = state_.carm;
        return rep;
    }

    ExecutionReport execute_locked(const Action& a)
    {
        ExecutionReport rep;
        rep.action = a;
        if (!is_valid(a)) {
            rep.ok = false;
            rep.message = "invalid action";
            rep.carm_after = state_.carm;
            return rep;
        }
        if (state_.pending) {
            rep.cancelled = state_.pending->reason;
            rep.warnings.push_back("pending '" + state_.pending->reason + "' cancelled by a new command");
            state_.pending.reset();
        }
        if (a.prompt) rep.prompt_resolved = prompt_known(*a.prompt);
        if (!rep.prompt_resolved) rep.warnings.push_back("'" + *a.prompt + "' is not in the vocabulary");
        const std::string reason = serialize_action(a);
        try {
            switch (a.kind) {
            case ActionKind::highlight: {
                const ImagePtr img = state_.current_image();
                if (!img) throw Error(ErrorCode::not_found, "no image acquired yet");
                rep.overlay = threshold_heatmap(heatmap(*img, *a.prompt).scores, 0.5f);
                rep.image_id = img->id;
                rep.message = "highlighted '" + *a.prompt + "' on image " + std::to_string(img->id.value) + " ("
                    + std::to_string(count_nonzero(*rep.overlay)) + " px)";
                break;
            }
            case ActionKind::collimate: {
                Localization loc = localize(*a.prompt);
                if (loc.fallback) {
                    CArmState target = state_.carm;
                    target.isocenter = loc.isocenter;
                    rep.fallback = loc.fallback;
                    rep.warnings.push_back("only one usable view: recentering instead of collimating");
                    stage_clamped(rep, target, reason);
                    rep.message = "staged recentering on '" + *a.prompt + "'";
                    break;
                }
                CollimationBox box{loc.reconstruction->bbox, *a.prompt, state_.tick};
                box.validate();
                state_.active_collimation = box;
                rep.collimation = box;
                rep.reconstruction = loc.reconstruction;
                rep.message = "collimating to '" + *a.prompt + "' (" + std::to_string(loc.reconstruction->points.size())
                    + " points from " + std::to_string(loc.reconstruction->views_used.n()) + " views)";
                break;
            }
            case ActionKind::view: {
                CArmState target = state_.carm;
                if (*a.view_name == ViewName::ap) target.alpha = target.beta = target.roll = 0.0;
                if (*a.view_name == ViewName::lateral) {
                    target.alpha = 90.0;
                    target.beta = target.roll = 0.0;
                }
                if (*a.prompt != current_prompt) {
                    if (state_.twin.history->empty()) {
                        rep.warnings.push_back("no localization available");
                    } else {
                        Localization loc = localize(*a.prompt);
                        target.isocenter = loc.isocenter;
                        rep.reconstruction = loc.reconstruction;
                        rep.fallback = loc.fallback;
                    }
                }
                stage_clamped(rep, target, reason);
                rep.message = "staged " + std::string(to_string(*a.view_name)) + " view"
                    + (*a.prompt == current_prompt ? std::string{} : " of '" + *a.prompt + "'") + "; confirm to move";
                break;
            }
            case ActionKind::move: {
                CArmState target = state_.carm;
                for (const auto& [axis, d] : a.axis_deltas) {
                    switch (axis) {
                    case Axis::alpha: target.alpha += d; break;
                    case Axis::beta: target.beta += d; break;
                    case Axis::roll: target.roll += d; break;
                    case Axis::x: target.isocenter.x() += d; break;
                    case Axis::y: target.isocenter.y() += d; break;
                    case Axis::z: target.isocenter.z() += d; break;
                    }
                }
                const auto v = config_.limits.violations(target);
                if (!v.empty()) {
                    std::string msg = "motion rejected:";
                    for (const auto& s : v) msg += " " + s + ";";
                    msg.pop_back();
                    throw Error(ErrorCode::invalid_parameter, msg);
                }
                stage(rep, PendingKind::motion, target, reason);
                rep.message = "staged move; confirm to execute";
                break;
            }
            case ActionKind::shoot:
                if (config_.radiation_gating) {
                    stage(rep, PendingKind::acquisition, state_.carm, reason);
                    rep.message = "acquisition staged; confirm to expose";
                } else {
                    acquire(rep);
                }
                break;
            case ActionKind::clear_collimation:
                if (state_.active_collimation) {
                    rep.message = "collimation to '" + state_.active_collimation->source_prompt + "' cleared";
                    state_.active_collimation.reset();
                } else {
                    rep.noop = true;
                    rep.message = "no active collimation";
                }
                break;
            case ActionKind::report_error:
                rep.ok = false;
                rep.message = a.message.empty() ? "could not interpret the command" : a.message;
                break;
            }
        } catch (const std::exception& e) {
            rep.ok = false;
            rep.message = e.what();
            rep.staged.reset();
        }
        rep.carm_after = state_.carm;
        return rep;
    }

    void stage_clamped(ExecutionReport& rep, const CArmState& target, const std::string& reason)
    {
        const auto v = config_.limits.violations(target);
        CArmState t = target;
        if (!v.empty()) {
            for (const auto& s : v) rep.warnings.push_back("clamped: " + s);
            t = config_.limits.clamp(target);
        }
        stage(rep, PendingKind::motion, t, reason);
    }

    std::shared_ptr<const LabeledVolume> volume_;
    std::shared_ptr<const PromptVocabulary> vocabulary_;
    std::shared_ptr<SegmentationModel> segmenter_;
    LanguageAdapter adapter_;
    SessionConfig config_;

    std::mutex exec_;
    SessionState state_;
    InterpreterContext context_;
    std::vector<TranscriptEntry> transcript_;
    std::map<std::pair<ImageId, std::string>, SegmentationHeatmap> heatmaps_;
    std::shared_ptr<const ReconstructionResult> last_reconstruction_;

    mutable std::mutex snapshot_mutex_;
    std::shared_ptr<const SessionState> snapshot_;
    std::shared_ptr<const std::vector<TranscriptEntry>> transcript_snapshot_;
    std::shared_ptr<const ReconstructionResult> last_reconstruction_snapshot_;
};

// ---------------------------------------------------------------------------
// Scripts

struct SessionTranscript {
    std::vector<TranscriptEntry> entries;

    std::size_t succeeded() const
    {
        return static_cast<std::size_t>(
            std::count_if(entries.begin(), entries.end(), [](const TranscriptEntry& e) { return e.report.success(); }));
    }
};

/// Non-empty lines of a script file; '#' starts a comment.
inline std::vector<std::string> parse_script(const std::string& text)
{
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        line = trim(line.substr(0, line.find('#')));
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

/// Interprets and executes each utterance in order. Failures are recorded and
/// the session continues.
inline SessionTranscript run_session_script(const std::vector<std::string>& script, Session& session, bool auto_confirm)
{
    SessionTranscript t;
    for (const auto& u : script) t.entries.push_back(session.run_step(u, auto_confirm));
    return t;
}

// ---------------------------------------------------------------------------
// JSON views

inline nlohmann::json carm_json(const CArmState& s)
{
    return {{"alpha_deg", s.alpha},
            {"beta_deg", s.beta},
            {"roll_deg", s.roll},
            {"isocenter_mm", vec_json(s.isocenter)},
            {"source_isocenter_mm", s.source_isocenter_dist},
            {"source_detector_mm", s.source_detector_dist}};
}

inline nlohmann::json box_json(const Box3& b) { return {{"min", vec_json(b.min)}, {"max", vec_json(b.max)}}; }

/// Row-major run-length encoding of a mask: [start, length, start, length, ...].
inline nlohmann::json mask_runs_json(const Mask2D& m)
{
    nlohmann::json runs = nlohmann::json::array();
    const auto v = m.values();
    std::size_t i = 0;
    while (i < v.size()) {
        if (!v[i]) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < v.size() && v[j]) ++j;
        runs.push_back(i);
        runs.push_back(j - i);
        i = j;
    }
    return {{"width", m.width()}, {"height", m.height()}, {"runs", runs}};
}

inline nlohmann::json pending_json(const PendingMotion& p)
{
    return {{"kind", p.kind == PendingKind::motion ? "motion" : "acquisition"},
            {"target", carm_json(p.target)},
            {"reason", p.reason},
            {"requires_confirmation", p.requires_confirmation}};
}

inline nlohmann::json report_json(const ExecutionReport& r, bool include_overlay = true)
{
    nlohmann::json j{{"operation", r.operation},
                     {"action", r.action ? nlohmann::json(serialize_action(*r.action)) : nlohmann::json(nullptr)},
                     {"ok", r.ok},
                     {"success", r.success()},
                     {"noop", r.noop},
                     {"message", r.message},
                     {"warnings", r.warnings},
                     {"carm", carm_json(r.carm_after)}};
    if (r.image_id) j["image_id"] = r.image_id->value;
    if (r.overlay) {
        j["overlay_area_px"] = count_nonzero(*r.overlay);
        if (include_overlay) j["overlay"] = mask_runs_json(*r.overlay);
    }
    if (r.reconstruction) j["reconstruction"] = summary_json(*r.reconstruction);
    if (r.fallback)
        j["fallback"] = {{"centroid_px", {r.fallback->centroid_px.x(), r.fallback->centroid_px.y()}},
                         {"translation_mm", vec_json(r.fallback->translation_mm)}};
    if (r.collimation) j["collimation"] = {{"box_mm", box_json(r.collimation->bounds)}, {"prompt", r.collimation->source_prompt}};
    if (r.staged) j["staged"] = pending_json(*r.staged);
    if (r.cancelled) j["cancelled"] = *r.cancelled;
    return j;
}

inline nlohmann::json state_json(const SessionState& s)
{
    nlohmann::json j{{"carm", carm_json(s.carm)}, {"tick", s.tick.value}, {"image_count", s.twin.history->size()}};
    j["pending"] = s.pending ? pending_json(*s.pending) : nlohmann::json(nullptr);
    j["collimation"] = s.active_collimation
        ? nlohmann::json{{"box_mm", box_json(s.active_collimation->bounds)}, {"prompt", s.active_collimation->source_prompt}}
        : nlohmann::json(nullptr);
    if (const ImagePtr img = s.current_image()) j["current_image_id"] = img->id.value;
    else j["current_image_id"] = nullptr;
    return j;
}

inline nlohmann::json transcript_entry_json(const TranscriptEntry& e, std::size_t index)
{
    nlohmann::json j{{"step", index + 1}, {"utterance", e.utterance}};
    j.update(report_json(e.report, false));
    if (e.confirmation) {
        j["confirmed"] = true;
        j["confirmation"] = report_json(*e.confirmation, false);
        j["carm"] = carm_json(e.confirmation->carm_after);
        if (e.confirmation->image_id) j["image_id"] = e.confirmation->image_id->value;
    }
    return j;
}

/// One JSON object per line: every step, then a closing summary line.
inline void write_transcript(const SessionTranscript& t, std::ostream& os,
                             const std::shared_ptr<const ReconstructionResult>& twin = nullptr)
{
    for (std::size_t i = 0; i < t.entries.size(); ++i) os << transcript_entry_json(t.entries[i], i).dump() << '\n';
    nlohmann::json summary{{"steps", t.entries.size()}, {"succeeded", t.succeeded()}};
    summary["twin"] = twin ? summary_json(*twin) : nlohmann::json(nullptr);
    os << nlohmann::json{{"summary", summary}}.dump() << '\n';
}

} // namespace carmtwin
