#pragma once

// Simulated acquisition: line integrals through the labelled volume, ground
// truth mask projection and box collimation.

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "carmtwin/error.hpp"
#include "carmtwin/geometry.hpp"
#include "carmtwin/grid.hpp"
#include "carmtwin/phantom.hpp"

namespace carmtwin {

struct ImageId {
    std::uint64_t value = 0;
    auto operator<=>(const ImageId&) const = default;
};

struct XRayImage {
    ImageId id;
    Grid2D<float> pixels; ///< intensity in [0, 1]
    ProjectionMatrix projection;
    CArmState carm; ///< device state at acquisition (isocentre, distances)
    Tick acquired_at;
    std::optional<DetectorRect> collimation_px;

    Vec2i size_px() const { return {pixels.width(), pixels.height()}; }

    void validate() const
    {
        if (size_px() != projection.image_size_px)
            throw Error(ErrorCode::validation, "image size does not match its projection");
        if (collimation_px)
            for (int y = 0; y < pixels.height(); ++y)
                for (int x = 0; x < pixels.width(); ++x)
                    if (!collimation_px->contains_pixel(x, y) && pixels(x, y) != 0.0f)
                        throw Error(ErrorCode::validation, "non-zero pixel outside the collimation rectangle");
    }
};

/// 3D collimation volume in the patient frame.
struct CollimationBox {
    Box3 bounds;
    std::string source_prompt;
    Tick created_at;

    void validate() const
    {
        if (!(bounds.min.array() < bounds.max.array()).all())
            throw Error(ErrorCode::invalid_parameter, "collimation box must have positive extent on every axis");
    }
};

/// Per-pixel bitset of the labels each detector ray passes through (bit l set
/// iff label l was sampled; background is never recorded).
using LabelFootprint = Grid2D<std::uint64_t>;

namespace detail {

/// Calls visit(pixel_x, pixel_y, sample_label, step_mm) for every sample of
/// every detector ray. Rays are clipped to the volume and sampled at midpoints
/// of equal sub-intervals no longer than half the smallest voxel spacing.
template <typename Visit, typename Finish>
void trace_rays(const LabeledVolume& v, const ProjectionMatrix& p, Visit&& visit, Finish&& finish)
{
    const Box3 bounds = v.bounds();
    const Vec3 source = p.pose.source_position();
    const double step_max = v.spacing_mm.minCoeff() / 2.0;
    const auto& dims = v.dims();
    const auto labels = v.labels.values();
    const Vec3 inv_spacing = v.spacing_mm.cwiseInverse();
    for (int r = 0; r < p.height(); ++r) {
        for (int c = 0; c < p.width(); ++c) {
            const Vec3 d = ray_direction(p, Vec2(c + 0.5, r + 0.5));
            double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
            for (int a = 0; a < 3; ++a) {
                if (d[a] == 0.0) {
                    if (source[a] < bounds.min[a] || source[a] > bounds.max[a]) t1 = -1.0;
                    continue;
                }
                double ta = (bounds.min[a] - source[a]) / d[a];
                double tb = (bounds.max[a] - source[a]) / d[a];
                if (ta > tb) std::swap(ta, tb);
                t0 = std::max(t0, ta);
                t1 = std::min(t1, tb);
            }
            if (t1 > t0) {
                const double length = t1 - t0;
                const auto n = static_cast<long>(std::ceil(length / step_max));
                const double step = length / static_cast<double>(n);
                // voxel-unit coordinates advance linearly along the ray
                const Vec3 q0 = (source + d * (t0 + 0.5 * step) - v.origin_mm).cwiseProduct(inv_spacing);
                const Vec3 dq = d.cwiseProduct(inv_spacing) * step;
                for (long k = 0; k < n; ++k) {
                    const double kd = static_cast<double>(k);
                    const double qx = q0.x() + dq.x() * kd, qy = q0.y() + dq.y() * kd, qz = q0.z() + dq.z() * kd;
                    const int i = static_cast<int>(std::floor(qx));
                    const int j = static_cast<int>(std::floor(qy));
                    const int l = static_cast<int>(std::floor(qz));
                    if (i < 0 || j < 0 || l < 0 || i >= dims[0] || j >= dims[1] || l >= dims[2]) continue;
                    visit(c, r, labels[v.labels.index(i, j, l)], step);
                }
            }
            finish(c, r);
        }
    }
}

} // namespace detail

struct RenderResult {
    Grid2D<float> intensity;
    LabelFootprint footprint;
};

/// One traversal producing both the line-integral image (uncollimated) and the
/// label footprint.
inline RenderResult render_with_footprint(const LabeledVolume& v, const ProjectionMatrix& p)
{
    std::array<double, 256> mu{};
    for (const auto& [id, a] : v.attenuation) mu[id] = a;
    RenderResult out{Grid2D<float>(p.width(), p.height(), 0.0f), LabelFootprint(p.width(), p.height(), 0)};
    double integral = 0.0;
    std::uint64_t bits = 0;
    detail::trace_rays(
        v, p,
        [&](int, int, LabelId label, double step) {
            integral += mu[label] * step;
            if (label != 0 && label < max_labels) bits |= std::uint64_t{1} << label;
        },
        [&](int c, int r) {
            out.intensity(c, r) = static_cast<float>(1.0 - std::exp(-integral));
            out.footprint(c, r) = bits;
            integral = 0.0;
            bits = 0;
        });
    return out;
}

inline LabelFootprint compute_label_footprint(const LabeledVolume& v, const ProjectionMatrix& p)
{
    LabelFootprint fp(p.width(), p.height(), 0);
    std::uint64_t bits = 0;
    detail::trace_rays(
        v, p,
        [&](int, int, LabelId label, double) {
            if (label != 0 && label < max_labels) bits |= std::uint64_t{1} << label;
        },
        [&](int c, int r) {
            fp(c, r) = bits;
            bits = 0;
        });
    return fp;
}

struct CollimationOptions {
    double margin_px = 0.0;
    bool clip_to_detector = true;
};

/// Detector rectangle bounding the projections of the box's eight corners.
inline DetectorRect project_collimation(const CollimationBox& box, const ProjectionMatrix& p,
                                        const CollimationOptions& opts = {})
{
    box.validate();
    const Box3& b = box.bounds;
    double x0 = std::numeric_limits<double>::infinity(), y0 = x0;
    double x1 = -x0, y1 = -x0;
    int behind = 0;
    for (int corner = 0; corner < 8; ++corner) {
        const Vec3 x((corner & 1) ? b.max.x() : b.min.x(), (corner & 2) ? b.max.y() : b.min.y(),
                     (corner & 4) ? b.max.z() : b.min.z());
        const Vec3 h = project_homogeneous(p.matrix, x);
        if (!(h.z() > 1e-12)) {
            ++behind;
            continue;
        }
        const double u = h.x() / h.z(), v = h.y() / h.z();
        x0 = std::min(x0, u);
        x1 = std::max(x1, u);
        y0 = std::min(y0, v);
        y1 = std::max(y1, v);
    }
    if (behind == 8) throw Error(ErrorCode::degenerate_collimation, "collimation box lies behind the source");
    DetectorRect rect{x0 - opts.margin_px, y0 - opts.margin_px, x1 + opts.margin_px, y1 + opts.margin_px};
    if (behind > 0) {
        // the box straddles the source plane; its projection is unbounded
        rect = {-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
                std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
    }
    if (opts.clip_to_detector) {
        rect.x0 = std::max(rect.x0, 0.0);
        rect.y0 = std::max(rect.y0, 0.0);
        rect.x1 = std::min(rect.x1, static_cast<double>(p.width()));
        rect.y1 = std::min(rect.y1, static_cast<double>(p.height()));
        if (rect.empty()) throw Error(ErrorCode::degenerate_collimation, "collimation box projects outside the detector");
    }
    return rect;
}

template <typename T>
void apply_collimation(Grid2D<T>& g, const DetectorRect& rect)
{
    for (int y = 0; y < g.height(); ++y)
        for (int x = 0; x < g.width(); ++x)
            if (!rect.contains_pixel(x, y)) g(x, y) = T{};
}

/// Simulated radiograph: pixel = 1 - exp(-line integral of attenuation). With
/// a collimation box, pixels outside its projected rectangle are zeroed; a
/// degenerate projection leaves the image uncollimated and adds a warning.
/// The returned image carries the projection; id, tick and C-arm state are left
/// for the caller to fill in.
inline XRayImage render_drr(const LabeledVolume& v, const ProjectionMatrix& p,
                            const std::optional<CollimationBox>& collimation = std::nullopt,
                            std::vector<std::string>* warnings = nullptr, LabelFootprint* footprint_out = nullptr)
{
    RenderResult rr = render_with_footprint(v, p);
    XRayImage img;
    img.pixels = std::move(rr.intensity);
    img.projection = p;
    if (footprint_out) *footprint_out = std::move(rr.footprint);
    if (collimation) {
        try {
            const DetectorRect rect = project_collimation(*collimation, p);
            apply_collimation(img.pixels, rect);
            img.collimation_px = rect;
        } catch (const Error& e) {
            if (e.code() != ErrorCode::degenerate_collimation) throw;
            if (warnings) warnings->push_back(std::string("acquired uncollimated: ") + e.what());
        }
    }
    return img;
}

inline Mask2D footprint_mask(const LabelFootprint& fp, std::uint64_t bits)
{
    Mask2D m(fp.width(), fp.height(), 0);
    auto src = fp.values();
    auto dst = m.values();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = (src[i] & bits) != 0;
    return m;
}

/// Boolean projection of a structure: a pixel is set iff its ray samples at
/// least one voxel of the structure. Collimation is ignored.
inline Mask2D project_gt_mask(const LabeledVolume& v, const LabelSet& labels, const LabelFootprint& footprint)
{
    check_labels(v, labels);
    const std::uint64_t bits = label_bits(labels);
    bool present = false;
    for (LabelId l : v.labels.values())
        if ((bits >> l) & 1u) {
            present = true;
            break;
        }
    if (!present) throw Error(ErrorCode::empty_structure, "structure has no voxels in the volume");
    return footprint_mask(footprint, bits);
}

inline Mask2D project_gt_mask(const LabeledVolume& v, const LabelSet& labels, const ProjectionMatrix& p)
{
    check_labels(v, labels);
    return project_gt_mask(v, labels, compute_label_footprint(v, p));
}

} // namespace carmtwin
