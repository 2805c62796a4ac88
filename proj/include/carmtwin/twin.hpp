#pragma once

// Patient digital twin: image history, view selection and sparse 3D
// reconstruction of a prompted structure from multi-view heatmaps.
//
// A candidate point x on an isocentric grid is reconstructed iff
//   (a) it projects inside the primary image I_0,
//   (b) at least two selected views score it above the membership threshold
//       (nearest-pixel lookup; points projecting outside a view score 0), and
//   (c) its mean score reaches the mean threshold. By default the mean runs over
//       all selected views; MeanOver::member_views restricts it to the views
//       counted in (b).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "carmtwin/error.hpp"
#include "carmtwin/geometry.hpp"
#include "carmtwin/numfmt.hpp"
#include "carmtwin/segmentation.hpp"
#include "carmtwin/vocabulary.hpp"
#include "carmtwin/xray.hpp"

namespace carmtwin {

using ImagePtr = std::shared_ptr<const XRayImage>;

/// Acquisitions ordered by tick.
class ImageHistory {
public:
    void append(ImagePtr img)
    {
        if (!img) throw Error(ErrorCode::invalid_parameter, "null image");
        if (find(img->id)) throw Error(ErrorCode::duplicate_id, "image id " + std::to_string(img->id.value) + " already in history");
        if (!entries_.empty() && !(entries_.back()->acquired_at < img->acquired_at))
            throw Error(ErrorCode::invalid_parameter, "acquisition ticks must be strictly increasing");
        entries_.push_back(std::move(img));
    }

    ImagePtr find(ImageId id) const
    {
        for (const auto& e : entries_)
            if (e->id == id) return e;
        return nullptr;
    }

    const std::vector<ImagePtr>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    ImagePtr latest() const { return entries_.empty() ? nullptr : entries_.back(); }

private:
    std::vector<ImagePtr> entries_;
};

struct ViewSelection {
    ImageId primary;
    std::vector<ImageId> secondary; ///< newest first

    std::size_t n() const noexcept { return 1 + secondary.size(); }
    std::vector<ImageId> ids() const
    {
        std::vector<ImageId> out{primary};
        out.insert(out.end(), secondary.begin(), secondary.end());
        return out;
    }
    bool operator==(const ViewSelection&) const = default;
};

struct ViewSelectionParams {
    double min_angle_deg = 30.0;
    double dedup_angle_deg = 10.0;
    std::size_t n_max = 5;
};

/// Drops every image with a newer one (or the current image) within
/// dedup_angle_deg, always keeping the current image, then greedily adds
/// images newest first whose viewing angle to every image already selected is
/// at least min_angle_deg.
inline ViewSelection select_views(const ImageHistory& h, ImageId current, const ViewSelectionParams& params = {})
{
    const ImagePtr cur = h.find(current);
    if (!cur) throw Error(ErrorCode::not_found, "current image " + std::to_string(current.value) + " not in history");
    if (params.n_max < 1) throw Error(ErrorCode::invalid_parameter, "n_max must be at least 1");

    std::vector<ImagePtr> newest_first;
    for (auto it = h.entries().rbegin(); it != h.entries().rend(); ++it)
        if ((*it)->id != current) newest_first.push_back(*it);

    // an image is superseded by the current image or by any newer one within
    // the dedup angle, whether or not that newer image survives itself
    std::vector<ImagePtr> kept{cur};
    for (std::size_t i = 0; i < newest_first.size(); ++i) {
        const auto& img = newest_first[i];
        auto close = [&](const ImagePtr& o) {
            return viewing_angle(o->projection.pose, img->projection.pose) < params.dedup_angle_deg;
        };
        const auto newer_end = newest_first.begin() + static_cast<std::ptrdiff_t>(i);
        const bool duplicate = close(cur) || std::any_of(newest_first.begin(), newer_end, close);
        if (!duplicate) kept.push_back(img);
    }

    ViewSelection sel{current, {}};
    std::vector<const XRayImage*> chosen{cur.get()};
    for (std::size_t i = 1; i < kept.size() && chosen.size() < params.n_max; ++i) {
        const auto& cand = kept[i];
        const bool separated = std::all_of(chosen.begin(), chosen.end(), [&](const XRayImage* s) {
            return viewing_angle(s->projection.pose, cand->projection.pose) >= params.min_angle_deg;
        });
        if (separated) {
            chosen.push_back(cand.get());
            sel.secondary.push_back(cand->id);
        }
    }
    return sel;
}

// ---------------------------------------------------------------------------
// Reconstruction

/// Cubic candidate grid; point (i, j, k) = center + (index - (count - 1) / 2) * spacing.
struct CandidateGrid {
    Vec3 center = Vec3::Zero();
    double spacing_mm = 3.0;
    std::array<int, 3> counts{1, 1, 1};

    static CandidateGrid around(const Vec3& center, double spacing_mm, double radius_mm)
    {
        if (!(spacing_mm > 0.0) || !(radius_mm >= 0.0))
            throw Error(ErrorCode::invalid_parameter, "grid spacing must be positive and radius non-negative");
        const int half = static_cast<int>(std::floor(radius_mm / spacing_mm));
        return {center, spacing_mm, {2 * half + 1, 2 * half + 1, 2 * half + 1}};
    }

    double coord(int axis, int index) const
    {
        return center[axis] + (index - 0.5 * (counts[static_cast<std::size_t>(axis)] - 1)) * spacing_mm;
    }
    Vec3 point(int i, int j, int k) const { return {coord(0, i), coord(1, j), coord(2, k)}; }
    std::size_t size() const
    {
        return static_cast<std::size_t>(counts[0]) * static_cast<std::size_t>(counts[1]) * static_cast<std::size_t>(counts[2]);
    }
};

enum class MeanOver { all_views, member_views };

struct ReconstructionParams {
    double grid_spacing_mm = 3.0;
    double radius_mm = 256.0;
    double membership_thresh = 0.5;
    double mean_thresh = 0.5;
    MeanOver mean_over = MeanOver::all_views;
    /// Fraction of points trimmed from each end, per axis, before taking the
    /// box. 0 keeps every point.
    double bbox_trim_fraction = 0.0;
};

/// One selected view: its projection and the heatmap computed on it.
struct ViewHeatmap {
    std::reference_wrapper<const ProjectionMatrix> projection;
    std::reference_wrapper<const SegmentationHeatmap> heatmap;
};

struct ReconstructedPoint {
    Vec3 position;
    int support = 0;        ///< |I_x|
    double mean_score = 0.0; ///< mean over the averaging set
};

struct ReconstructionResult {
    std::vector<ReconstructedPoint> points;
    Vec3 centroid = Vec3::Zero();
    Box3 bbox;
    std::string prompt;
    double grid_spacing_mm = 3.0;
    ViewSelection views_used;
    std::vector<std::size_t> mask_areas_px; ///< per view, pixels above the membership threshold
};

/// Centroid and box of a point set; the box is grown by half a grid cell.
inline void summarize_points(ReconstructionResult& r, double trim_fraction = 0.0)
{
    if (r.points.empty()) return;
    Vec3 sum = Vec3::Zero();
    for (const auto& p : r.points) sum += p.position;
    r.centroid = sum / static_cast<double>(r.points.size());
    const double half = r.grid_spacing_mm / 2.0;
    const std::size_t n = r.points.size();
    const auto trim = static_cast<std::size_t>(std::floor(std::clamp(trim_fraction, 0.0, 0.49) * static_cast<double>(n)));
    for (int a = 0; a < 3; ++a) {
        std::vector<double> c(n);
        for (std::size_t i = 0; i < n; ++i) c[i] = r.points[i].position[a];
        std::sort(c.begin(), c.end());
        r.bbox.min[a] = c[trim] - half;
        r.bbox.max[a] = c[n - 1 - trim] + half;
    }
}

/// Evaluates the three conditions over grid. views[0] is the primary image.
inline ReconstructionResult reconstruct_on_grid(const ViewSelection& sel, std::span<const ViewHeatmap> views,
                                                const CandidateGrid& grid, const ReconstructionParams& params = {})
{
    if (views.size() < 2) throw Error(ErrorCode::invalid_parameter, "reconstruction needs at least two views");
    if (views.size() != sel.n()) throw Error(ErrorCode::invalid_parameter, "one heatmap per selected view is required");
    const std::string prompt_key = normalize_prompt(views[0].heatmap.get().prompt);
    for (const auto& v : views) {
        const auto& hm = v.heatmap.get();
        if (normalize_prompt(hm.prompt) != prompt_key)
            throw Error(ErrorCode::invalid_parameter, "all heatmaps must share one prompt");
        if (hm.scores.width() != v.projection.get().width() || hm.scores.height() != v.projection.get().height())
            throw Error(ErrorCode::shape_mismatch, "heatmap does not match its projection");
    }

    struct View {
        Mat34 m;
        double w, h;
        const Grid2D<float>* scores;
    };
    std::vector<View> vs;
    vs.reserve(views.size());
    for (const auto& v : views)
        vs.push_back({v.projection.get().matrix, static_cast<double>(v.projection.get().width()),
                      static_cast<double>(v.projection.get().height()), &v.heatmap.get().scores});

    ReconstructionResult out;
    out.prompt = views[0].heatmap.get().prompt;
    out.grid_spacing_mm = grid.spacing_mm;
    out.views_used = sel;
    for (const auto& v : vs)
        out.mask_areas_px.push_back(static_cast<std::size_t>(std::count_if(
            v.scores->values().begin(), v.scores->values().end(),
            [&](float s) { return static_cast<double>(s) > params.membership_thresh; })));

    const std::size_t n = vs.size();
    const auto n_d = static_cast<double>(n);
    // row-invariant part of each homogeneous coordinate: m1*y + (m2*z + m3)
    std::vector<Vec3> row_const(n);
    std::vector<double> scores(n);
    for (int k = 0; k < grid.counts[2]; ++k) {
        const double z = grid.coord(2, k);
        for (int j = 0; j < grid.counts[1]; ++j) {
            const double y = grid.coord(1, j);
            for (std::size_t vi = 0; vi < n; ++vi)
                for (int r = 0; r < 3; ++r)
                    row_const[vi][r] = vs[vi].m(r, 1) * y + (vs[vi].m(r, 2) * z + vs[vi].m(r, 3));
            for (int i = 0; i < grid.counts[0]; ++i) {
                const double x = grid.coord(0, i);
                int support = 0;
                bool rejected = false;
                for (std::size_t vi = 0; vi < n; ++vi) {
                    const View& v = vs[vi];
                    const double hw = v.m(2, 0) * x + row_const[vi][2];
                    double f = 0.0;
                    bool inside = false;
                    if (hw > 0.0) {
                        const double u = (v.m(0, 0) * x + row_const[vi][0]) / hw;
                        const double t = (v.m(1, 0) * x + row_const[vi][1]) / hw;
                        inside = u >= 0.0 && u < v.w && t >= 0.0 && t < v.h;
                        if (inside) f = static_cast<double>((*v.scores)(static_cast<int>(u), static_cast<int>(t)));
                    }
                    if (vi == 0 && !inside) {
                        rejected = true;
                        break;
                    }
                    scores[vi] = f;
                    if (f > params.membership_thresh) ++support;
                    // too few views left to reach a support of two
                    if (support + static_cast<int>(n - vi - 1) < 2) {
                        rejected = true;
                        break;
                    }
                }
                if (rejected || support < 2) continue;
                double sum = 0.0;
                double mean = 0.0;
                if (params.mean_over == MeanOver::all_views) {
                    for (std::size_t vi = 0; vi < n; ++vi) sum += scores[vi];
                    mean = sum / n_d;
                } else {
                    for (std::size_t vi = 0; vi < n; ++vi)
                        if (scores[vi] > params.membership_thresh) sum += scores[vi];
                    mean = sum / static_cast<double>(support);
                }
                if (!(mean >= params.mean_thresh)) continue;
                out.points.push_back({Vec3(x, y, z), support, mean});
            }
        }
    }
    if (out.points.empty()) throw EmptyReconstructionError(out.mask_areas_px);
    summarize_points(out, params.bbox_trim_fraction);
    return out;
}

/// Reconstruction on the isocentric grid of the primary view (radius and
/// spacing from params).
inline ReconstructionResult reconstruct(const ViewSelection& sel, std::span<const ViewHeatmap> views,
                                        const Vec3& isocenter, const ReconstructionParams& params = {})
{
    return reconstruct_on_grid(sel, views, CandidateGrid::around(isocenter, params.grid_spacing_mm, params.radius_mm),
                               params);
}

// ---------------------------------------------------------------------------
// Single-image fallback

struct FallbackLocalization {
    Vec2 centroid_px;
    Vec3 translation_mm; ///< isocentre shift, patient frame
};

/// With only one usable view: centroid of the thresholded heatmap, and the
/// isocentre shift in the detector plane that would centre it.
inline FallbackLocalization single_image_fallback(const XRayImage& img, const SegmentationHeatmap& hm)
{
    if (hm.scores.width() != img.projection.width() || hm.scores.height() != img.projection.height())
        throw Error(ErrorCode::shape_mismatch, "heatmap does not match its image");
    double su = 0.0, sv = 0.0;
    std::size_t count = 0;
    for (int y = 0; y < hm.scores.height(); ++y)
        for (int x = 0; x < hm.scores.width(); ++x)
            if (hm.scores(x, y) >= 0.5f) {
                su += x + 0.5;
                sv += y + 0.5;
                ++count;
            }
    if (count == 0) throw Error(ErrorCode::no_detection, "'" + hm.prompt + "' not detected in the image");
    FallbackLocalization out;
    out.centroid_px = Vec2(su, sv) / static_cast<double>(count);
    const auto& k = img.projection.intrinsics;
    const Vec2 offset = out.centroid_px - k.principal_point;
    const double scale = k.pixel_pitch_mm * img.carm.source_isocenter_dist / img.carm.source_detector_dist;
    const auto& pose = img.projection.pose;
    out.translation_mm = scale * (offset.x() * pose.detector_u_axis() + offset.y() * pose.detector_v_axis());
    return out;
}

// ---------------------------------------------------------------------------
// Twin state

struct CachedReconstruction {
    ViewSelection selection;
    std::shared_ptr<const ReconstructionResult> result;
};

/// Image history plus cached reconstructions keyed by (normalized prompt,
/// primary image). Copies share the immutable history, so a copy taken before
/// an acquisition is a stable snapshot.
struct TwinState {
    std::shared_ptr<const ImageHistory> history = std::make_shared<ImageHistory>();
    std::map<std::pair<std::string, ImageId>, CachedReconstruction> cache;
    ViewSelectionParams selection_params;

    const CachedReconstruction* cached(const std::string& prompt, ImageId primary) const
    {
        const auto it = cache.find({normalize_prompt(prompt), primary});
        return it == cache.end() ? nullptr : &it->second;
    }

    void store(const std::string& prompt, CachedReconstruction entry)
    {
        const ImageId primary = entry.selection.primary;
        cache[{normalize_prompt(prompt), primary}] = std::move(entry);
    }
};

/// Appends an image and drops cached reconstructions whose view selection
/// changes because of it.
inline TwinState update_twin(const TwinState& state, ImagePtr image)
{
    auto next_history = std::make_shared<ImageHistory>(*state.history);
    next_history->append(std::move(image));
    TwinState next;
    next.history = next_history;
    next.selection_params = state.selection_params;
    for (const auto& [key, entry] : state.cache)
        if (select_views(*next_history, entry.selection.primary, state.selection_params) == entry.selection)
            next.cache.emplace(key, entry);
    return next;
}

// ---------------------------------------------------------------------------
// Export

/// One line per point: "x y z support mean_score".
inline void write_point_cloud(const ReconstructionResult& r, std::ostream& os)
{
    for (const auto& p : r.points)
        os << format_double(p.position.x()) << ' ' << format_double(p.position.y()) << ' '
           << format_double(p.position.z()) << ' ' << p.support << ' ' << format_double(p.mean_score) << '\n';
}

inline nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

inline nlohmann::json summary_json(const ReconstructionResult& r)
{
    nlohmann::json views = nlohmann::json::array();
    for (ImageId id : r.views_used.ids()) views.push_back(id.value);
    return {
        {"prompt", r.prompt},
        {"centroid_mm", vec_json(r.centroid)},
        {"bbox_mm", {{"min", vec_json(r.bbox.min)}, {"max", vec_json(r.bbox.max)}}},
        {"point_count", r.points.size()},
        {"grid_spacing_mm", r.grid_spacing_mm},
        {"view_ids", views},
        {"mask_areas_px", r.mask_areas_px},
    };
}

} // namespace carmtwin
