#pragma once

// Pinhole X-ray camera model and isocentric C-arm kinematics.
//
// Patient frame (right-handed, mm): +x patient-left, +y superior, +z anterior.
// A C-arm at alpha = beta = roll = 0 is the AP view: the beam travels along -z
// (anterior to posterior). alpha is the orbital angle about +y; alpha = 90 puts
// the source on the patient's left with the beam travelling along -x. beta is the
// angular tilt about +x; positive beta tilts the beam toward superior. roll turns
// the detector about the viewing axis.
//
// Detector pixel (c, r) covers [c, c+1) x [r, r+1) in continuous pixel
// coordinates, so its centre is (c + 0.5, r + 0.5).

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <numbers>
#include <optional>

#include "carmtwin/error.hpp"

namespace carmtwin {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec2i = Eigen::Vector2i;
using Mat3 = Eigen::Matrix3d;
using Mat34 = Eigen::Matrix<double, 3, 4>;

/// Monotonic logical clock value.
struct Tick {
    std::uint64_t value = 0;
    auto operator<=>(const Tick&) const = default;
};

inline double deg_to_rad(double deg) noexcept { return deg * std::numbers::pi / 180.0; }
inline double rad_to_deg(double rad) noexcept { return rad * 180.0 / std::numbers::pi; }

/// Maps any finite angle in degrees to (-180, 180].
inline double normalize_angle_deg(double deg) noexcept
{
    double a = std::fmod(deg, 360.0);
    if (a <= -180.0) a += 360.0;
    else if (a > 180.0) a -= 360.0;
    return a;
}

/// Axis-aligned box in the patient frame (mm).
struct Box3 {
    Vec3 min = Vec3::Zero();
    Vec3 max = Vec3::Zero();

    Vec3 size() const { return (max - min).cwiseMax(0.0); }
    Vec3 center() const { return 0.5 * (min + max); }
    double volume() const
    {
        const Vec3 s = size();
        return s.x() * s.y() * s.z();
    }
    bool valid() const { return (min.array() <= max.array()).all(); }
    bool contains(const Vec3& p) const { return (p.array() >= min.array()).all() && (p.array() <= max.array()).all(); }
    Box3 intersect(const Box3& o) const { return {min.cwiseMax(o.min), max.cwiseMin(o.max)}; }
    bool operator==(const Box3& o) const { return min == o.min && max == o.max; }
};

/// Axis-aligned rectangle in continuous detector pixel coordinates.
struct DetectorRect {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    bool empty() const noexcept { return !(x1 > x0 && y1 > y0); }
    double width() const noexcept { return std::max(0.0, x1 - x0); }
    double height() const noexcept { return std::max(0.0, y1 - y0); }
    /// Pixel (c, r) belongs to the rectangle iff its centre does.
    bool contains_pixel(int c, int r) const noexcept
    {
        const double u = c + 0.5, v = r + 0.5;
        return u >= x0 && u <= x1 && v >= y0 && v <= y1;
    }
    bool operator==(const DetectorRect&) const = default;
};

struct IntrinsicMatrix {
    double focal_px = 1.0;
    Vec2 principal_point = Vec2::Zero();
    Vec2i detector_size_px = Vec2i::Ones();
    double pixel_pitch_mm = 1.0;

    int width() const noexcept { return detector_size_px.x(); }
    int height() const noexcept { return detector_size_px.y(); }

    Mat3 matrix() const
    {
        Mat3 k;
        k << focal_px, 0.0, principal_point.x(),
             0.0, focal_px, principal_point.y(),
             0.0, 0.0, 1.0;
        return k;
    }

    void validate() const
    {
        if (!(focal_px > 0.0) || !(pixel_pitch_mm > 0.0))
            throw Error(ErrorCode::invalid_parameter, "focal length and pixel pitch must be positive");
        if (detector_size_px.x() <= 0 || detector_size_px.y() <= 0)
            throw Error(ErrorCode::invalid_parameter, "detector size must be positive");
        for (int a = 0; a < 2; ++a)
            if (!(principal_point[a] >= 0.0 && principal_point[a] < detector_size_px[a]))
                throw Error(ErrorCode::invalid_parameter, "principal point outside the detector");
    }
};

/// Square detector of detector_mm per side sampled at pixel_pitch_mm, with the
/// principal point at the detector centre.
inline IntrinsicMatrix make_intrinsics(double detector_mm, double pixel_pitch_mm, double source_detector_dist_mm)
{
    if (!(detector_mm > 0.0) || !(pixel_pitch_mm > 0.0) || !(source_detector_dist_mm > 0.0))
        throw Error(ErrorCode::invalid_parameter, "make_intrinsics: inputs must be positive");
    const double px = detector_mm / pixel_pitch_mm;
    const double rounded = std::round(px);
    if (std::abs(px - rounded) > 0.5 + 1e-9 || rounded < 1.0)
        throw Error(ErrorCode::invalid_parameter, "make_intrinsics: detector is smaller than one pixel");
    IntrinsicMatrix k;
    k.detector_size_px = Vec2i::Constant(static_cast<int>(rounded));
    k.principal_point = k.detector_size_px.cast<double>() / 2.0;
    k.focal_px = source_detector_dist_mm / pixel_pitch_mm;
    k.pixel_pitch_mm = pixel_pitch_mm;
    return k;
}

/// World-to-camera extrinsics. Camera +z is the principal viewing direction,
/// camera +x / +y are the detector u / v axes.
struct CameraPose {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();
    Tick timestamp{};

    Vec3 viewing_direction() const { return rotation.row(2).transpose(); }
    Vec3 detector_u_axis() const { return rotation.row(0).transpose(); }
    Vec3 detector_v_axis() const { return rotation.row(1).transpose(); }
    Vec3 source_position() const { return -rotation.transpose() * translation; }

    void validate() const
    {
        const double ortho = (rotation * rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff();
        if (!(ortho <= 1e-9) || !(std::abs(rotation.determinant() - 1.0) <= 1e-9))
            throw Error(ErrorCode::invalid_parameter, "camera rotation is not a proper rotation");
        if (!translation.allFinite()) throw Error(ErrorCode::invalid_parameter, "camera translation is not finite");
    }
};

/// Rotates the detector about the viewing axis by deg.
inline CameraPose rolled(const CameraPose& pose, double deg)
{
    const Mat3 rz = Eigen::AngleAxisd(deg_to_rad(deg), Vec3::UnitZ()).toRotationMatrix();
    CameraPose out = pose;
    const Vec3 source = pose.source_position();
    out.rotation = rz.transpose() * pose.rotation;
    out.translation = -out.rotation * source;
    return out;
}

struct CArmState {
    double alpha = 0.0; ///< orbital, degrees
    double beta = 0.0;  ///< angular tilt, degrees
    double roll = 0.0;  ///< degrees
    Vec3 isocenter = Vec3::Zero();
    double source_isocenter_dist = 750.0;
    double source_detector_dist = 1200.0;

    CArmState normalized() const
    {
        CArmState s = *this;
        s.alpha = normalize_angle_deg(alpha);
        s.beta = normalize_angle_deg(beta);
        s.roll = normalize_angle_deg(roll);
        return s;
    }

    void validate() const
    {
        if (!(source_isocenter_dist > 0.0) || !(source_detector_dist > source_isocenter_dist))
            throw Error(ErrorCode::invalid_parameter, "need source_detector_dist > source_isocenter_dist > 0");
        if (!std::isfinite(alpha) || !std::isfinite(beta) || !std::isfinite(roll) || !isocenter.allFinite())
            throw Error(ErrorCode::invalid_parameter, "C-arm state is not finite");
    }

    bool operator==(const CArmState& o) const
    {
        return alpha == o.alpha && beta == o.beta && roll == o.roll && isocenter == o.isocenter
            && source_isocenter_dist == o.source_isocenter_dist && source_detector_dist == o.source_detector_dist;
    }
};

/// Camera-to-world rotation of a C-arm with the given angles.
inline Mat3 carm_camera_to_world(double alpha_deg, double beta_deg, double roll_deg)
{
    Mat3 ap;
    // columns: detector u = +x, detector v = -y (rows run caudal), view = -z
    ap << 1.0, 0.0, 0.0,
          0.0, -1.0, 0.0,
          0.0, 0.0, -1.0;
    const Mat3 orbit = Eigen::AngleAxisd(deg_to_rad(alpha_deg), Vec3::UnitY()).toRotationMatrix();
    const Mat3 tilt = Eigen::AngleAxisd(deg_to_rad(beta_deg), Vec3::UnitX()).toRotationMatrix();
    const Mat3 roll = Eigen::AngleAxisd(deg_to_rad(roll_deg), Vec3::UnitZ()).toRotationMatrix();
    return orbit * tilt * ap * roll;
}

inline CameraPose pose_from_carm(const CArmState& state, Tick timestamp = {})
{
    state.validate();
    const Mat3 c2w = carm_camera_to_world(state.alpha, state.beta, state.roll);
    CameraPose pose;
    pose.rotation = c2w.transpose();
    const Vec3 source = state.isocenter - state.source_isocenter_dist * c2w.col(2);
    pose.translation = -pose.rotation * source;
    pose.timestamp = timestamp;
    return pose;
}

struct ProjectionMatrix {
    Mat34 matrix = Mat34::Zero();
    IntrinsicMatrix intrinsics;
    CameraPose pose;
    Vec2i image_size_px = Vec2i::Ones();

    int width() const noexcept { return image_size_px.x(); }
    int height() const noexcept { return image_size_px.y(); }

    void validate() const
    {
        intrinsics.validate();
        pose.validate();
        Mat34 rt;
        rt << pose.rotation, pose.translation;
        const Mat34 expected = intrinsics.matrix() * rt;
        const double scale = std::max(1.0, expected.cwiseAbs().maxCoeff());
        if (!((matrix - expected).cwiseAbs().maxCoeff() <= 1e-9 * scale))
            throw Error(ErrorCode::invalid_parameter, "projection matrix disagrees with K[R|t]");
        if (std::abs(matrix.leftCols<3>().determinant()) < 1e-12)
            throw Error(ErrorCode::invalid_parameter, "projection matrix is singular");
    }
};

inline ProjectionMatrix make_projection(const IntrinsicMatrix& k, const CameraPose& pose)
{
    k.validate();
    pose.validate();
    ProjectionMatrix p;
    Mat34 rt;
    rt << pose.rotation, pose.translation;
    p.matrix = k.matrix() * rt;
    p.intrinsics = k;
    p.pose = pose;
    p.image_size_px = k.detector_size_px;
    return p;
}

/// Homogeneous image of x under P. Every row is evaluated as
/// m0*x + (m1*y + (m2*z + m3)) so that code hoisting the (y, z) part out of a
/// loop over x rounds identically.
inline Vec3 project_homogeneous(const Mat34& m, const Vec3& x) noexcept
{
    Vec3 h;
    for (int r = 0; r < 3; ++r)
        h[r] = m(r, 0) * x.x() + (m(r, 1) * x.y() + (m(r, 2) * x.z() + m(r, 3)));
    return h;
}

/// Perspective projection of a patient-frame point to continuous detector
/// pixel coordinates. No clipping is applied.
inline Vec2 project(const ProjectionMatrix& p, const Vec3& x)
{
    const Vec3 h = project_homogeneous(p.matrix, x);
    if (std::abs(h.z()) < 1e-12) throw Error(ErrorCode::degenerate_projection, "point lies on the principal plane");
    return {h.x() / h.z(), h.y() / h.z()};
}

/// Point at distance depth_mm along the principal axis (camera z) from the
/// source that projects to detector point uv.
inline Vec3 backproject(const ProjectionMatrix& p, const Vec2& uv, double depth_mm)
{
    const IntrinsicMatrix& k = p.intrinsics;
    const Vec3 cam((uv.x() - k.principal_point.x()) / k.focal_px * depth_mm,
                   (uv.y() - k.principal_point.y()) / k.focal_px * depth_mm, depth_mm);
    return p.pose.rotation.transpose() * (cam - p.pose.translation);
}

/// World-space unit direction of the ray from the source through detector point uv.
inline Vec3 ray_direction(const ProjectionMatrix& p, const Vec2& uv)
{
    const IntrinsicMatrix& k = p.intrinsics;
    const Vec3 cam((uv.x() - k.principal_point.x()) / k.focal_px, (uv.y() - k.principal_point.y()) / k.focal_px, 1.0);
    return (p.pose.rotation.transpose() * cam).normalized();
}

/// Acute angle in degrees, in [0, 90], between the principal viewing directions.
inline double viewing_angle(const CameraPose& a, const CameraPose& b)
{
    const Vec3 da = a.viewing_direction().normalized();
    const Vec3 db = b.viewing_direction().normalized();
    // atan2 keeps precision near 0 and 90 where acos/asin do not
    return rad_to_deg(std::atan2(da.cross(db).norm(), std::abs(da.dot(db))));
}

} // namespace carmtwin
