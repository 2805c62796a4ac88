#pragma once

// Synthetic labelled patient volume: generation from a primitive spec, file
// persistence and ground-truth structure queries.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "carmtwin/error.hpp"
#include "carmtwin/geometry.hpp"
#include "carmtwin/grid.hpp"
#include "carmtwin/numfmt.hpp"

namespace carmtwin {

using LabelId = std::uint8_t;
using LabelSet = std::set<LabelId>;

/// Label ids must fit a 64-bit footprint mask; id 0 is background air.
inline constexpr int max_labels = 64;

inline std::uint64_t label_bits(const LabelSet& labels)
{
    std::uint64_t bits = 0;
    for (LabelId l : labels) {
        if (l >= max_labels) throw Error(ErrorCode::invalid_label, "label id exceeds 63");
        bits |= std::uint64_t{1} << l;
    }
    return bits;
}

struct LabeledVolume {
    Vec3 spacing_mm = Vec3::Ones();
    Vec3 origin_mm = Vec3::Zero(); ///< corner of voxel (0, 0, 0)
    Grid3D<LabelId> labels;
    std::map<LabelId, double> attenuation; ///< 1/mm
    std::map<LabelId, std::string> label_names;

    const std::array<int, 3>& dims() const noexcept { return labels.dims(); }

    Vec3 voxel_center(int i, int j, int k) const
    {
        return origin_mm + Vec3((i + 0.5) * spacing_mm.x(), (j + 0.5) * spacing_mm.y(), (k + 0.5) * spacing_mm.z());
    }

    Box3 bounds() const
    {
        const auto& d = dims();
        return {origin_mm, origin_mm + Vec3(d[0] * spacing_mm.x(), d[1] * spacing_mm.y(), d[2] * spacing_mm.z())};
    }

    std::optional<LabelId> find_label(const std::string& name) const
    {
        for (const auto& [id, n] : label_names)
            if (n == name) return id;
        return std::nullopt;
    }

    void validate() const
    {
        const auto& d = dims();
        if (d[0] <= 0 || d[1] <= 0 || d[2] <= 0) throw Error(ErrorCode::invalid_spec, "volume dims must be positive");
        if (!(spacing_mm.array() > 0.0).all()) throw Error(ErrorCode::invalid_spec, "voxel spacing must be positive");
        if (!label_names.contains(0) || attenuation.count(0) == 0 || attenuation.at(0) != 0.0)
            throw Error(ErrorCode::invalid_spec, "label 0 must be background air with zero attenuation");
        for (const auto& [id, name] : label_names) {
            if (id >= max_labels) throw Error(ErrorCode::invalid_spec, "label id exceeds 63");
            if (!attenuation.contains(id)) throw Error(ErrorCode::invalid_spec, "missing attenuation for " + name);
        }
        std::array<bool, 256> seen{};
        for (LabelId l : labels.values()) seen[l] = true;
        for (int l = 0; l < 256; ++l)
            if (seen[l] && !label_names.contains(static_cast<LabelId>(l)))
                throw Error(ErrorCode::invalid_spec, "voxel label " + std::to_string(l) + " has no name");
    }

    bool operator==(const LabeledVolume& o) const
    {
        return spacing_mm == o.spacing_mm && origin_mm == o.origin_mm && labels == o.labels
            && attenuation == o.attenuation && label_names == o.label_names;
    }
};

// ---------------------------------------------------------------------------
// Primitive spec

enum class PrimitiveKind { ellipsoid, box, tube };

struct PrimitiveSpec {
    PrimitiveKind kind = PrimitiveKind::ellipsoid;
    std::string label;
    Vec3 center = Vec3::Zero();
    /// ellipsoid: semi-axes; box: half edge lengths; tube: (radius, half length, radius)
    /// with the tube axis along local +y.
    Vec3 extent = Vec3::Ones();
    Mat3 orientation = Mat3::Identity(); ///< local-to-patient rotation

    bool contains(const Vec3& p) const
    {
        const Vec3 q = orientation.transpose() * (p - center);
        switch (kind) {
        case PrimitiveKind::ellipsoid: return q.cwiseQuotient(extent).squaredNorm() <= 1.0;
        case PrimitiveKind::box: return (q.cwiseAbs().array() <= extent.array()).all();
        case PrimitiveKind::tube: {
            const double a = q.x() / extent.x(), b = q.z() / extent.z();
            return a * a + b * b <= 1.0 && std::abs(q.y()) <= extent.y();
        }
        }
        return false;
    }

    Box3 world_bounds() const
    {
        // |R| * extent bounds the rotated local box
        const Vec3 half = orientation.cwiseAbs() * extent;
        return {center - half, center + half};
    }
};

struct LabelSpec {
    std::string name;
    double attenuation = 0.0;
};

struct PhantomSpec {
    std::array<int, 3> dims{64, 64, 64};
    Vec3 spacing_mm = Vec3::Constant(3.0);
    Vec3 origin_mm = Vec3::Zero();
    std::vector<LabelSpec> labels; ///< ids assigned 1.. in order
    std::vector<PrimitiveSpec> primitives;
};

namespace detail {

inline Vec3 json_vec3(const nlohmann::json& j, const char* key)
{
    if (!j.contains(key) || !j.at(key).is_array() || j.at(key).size() != 3)
        throw Error(ErrorCode::invalid_spec, std::string("expected 3-vector '") + key + "'");
    return {j.at(key)[0].get<double>(), j.at(key)[1].get<double>(), j.at(key)[2].get<double>()};
}

/// Rotation taking local +y onto the unit vector axis.
inline Mat3 rotation_from_y(const Vec3& axis)
{
    return Eigen::Quaterniond::FromTwoVectors(Vec3::UnitY(), axis.normalized()).toRotationMatrix();
}

} // namespace detail

/// Parses the JSON phantom spec document. Layout:
///   { "dims": [nx,ny,nz], "spacing_mm": [..], "origin_mm": [..],
///     "labels": [ {"name": "...", "attenuation": 0.05}, ... ],
///     "primitives": [ {"kind": "ellipsoid", "label": "...", "center": [..], "radii": [..]},
///                     {"kind": "box", "label": "...", "center": [..], "size": [..]},
///                     {"kind": "tube", "label": "...", "center": [..], "radii": [a, b],
///                      "length": L, "axis": [..]} ] }
/// Any primitive may carry "rotation_deg": [rx, ry, rz] (applied x, then y, then z).
inline PhantomSpec parse_phantom_spec(const std::string& text)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text, nullptr, true, /*ignore_comments=*/true);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::invalid_spec, std::string("phantom spec is not valid JSON: ") + e.what());
    }
    PhantomSpec spec;
    try {
        const auto& d = j.at("dims");
        if (!d.is_array() || d.size() != 3) throw Error(ErrorCode::invalid_spec, "dims must have 3 entries");
        spec.dims = {d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
        spec.spacing_mm = detail::json_vec3(j, "spacing_mm");
        spec.origin_mm = j.contains("origin_mm") ? detail::json_vec3(j, "origin_mm") : Vec3::Zero();
        for (const auto& l : j.value("labels", nlohmann::json::array()))
            spec.labels.push_back({l.at("name").get<std::string>(), l.at("attenuation").get<double>()});
        for (const auto& p : j.value("primitives", nlohmann::json::array())) {
            PrimitiveSpec prim;
            const auto kind = p.at("kind").get<std::string>();
            prim.label = p.at("label").get<std::string>();
            prim.center = detail::json_vec3(p, "center");
            Mat3 rot = Mat3::Identity();
            if (p.contains("rotation_deg")) {
                const Vec3 r = detail::json_vec3(p, "rotation_deg");
                rot = (Eigen::AngleAxisd(deg_to_rad(r.z()), Vec3::UnitZ())
                       * Eigen::AngleAxisd(deg_to_rad(r.y()), Vec3::UnitY())
                       * Eigen::AngleAxisd(deg_to_rad(r.x()), Vec3::UnitX()))
                          .toRotationMatrix();
            }
            if (kind == "ellipsoid") {
                prim.kind = PrimitiveKind::ellipsoid;
                prim.extent = detail::json_vec3(p, "radii");
            } else if (kind == "box") {
                prim.kind = PrimitiveKind::box;
                prim.extent = detail::json_vec3(p, "size") / 2.0;
            } else if (kind == "tube") {
                prim.kind = PrimitiveKind::tube;
                const auto& r = p.at("radii");
                if (!r.is_array() || r.size() != 2) throw Error(ErrorCode::invalid_spec, "tube radii must have 2 entries");
                prim.extent = Vec3(r[0].get<double>(), p.at("length").get<double>() / 2.0, r[1].get<double>());
                if (p.contains("axis")) rot = rot * detail::rotation_from_y(detail::json_vec3(p, "axis"));
            } else {
                throw Error(ErrorCode::invalid_spec, "unknown primitive kind '" + kind + "'");
            }
            prim.orientation = rot;
            if (!(prim.extent.array() > 0.0).all())
                throw Error(ErrorCode::invalid_spec, "primitive extents must be positive");
            spec.primitives.push_back(std::move(prim));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::invalid_spec, std::string("malformed phantom spec: ") + e.what());
    }
    return spec;
}

/// Voxelizes the spec. Later primitives overwrite earlier ones. Primitives
/// extending past the volume are clipped and reported through warnings.
inline LabeledVolume build_synthetic_phantom(const PhantomSpec& spec, std::vector<std::string>* warnings = nullptr)
{
    if (spec.dims[0] <= 0 || spec.dims[1] <= 0 || spec.dims[2] <= 0)
        throw Error(ErrorCode::invalid_spec, "dims must be positive");
    if (!(spec.spacing_mm.array() > 0.0).all()) throw Error(ErrorCode::invalid_spec, "spacing must be positive");
    if (spec.labels.size() >= static_cast<std::size_t>(max_labels))
        throw Error(ErrorCode::invalid_spec, "at most 63 structure labels are supported");

    LabeledVolume v;
    v.spacing_mm = spec.spacing_mm;
    v.origin_mm = spec.origin_mm;
    v.labels = Grid3D<LabelId>(spec.dims, 0);
    v.label_names[0] = "background";
    v.attenuation[0] = 0.0;
    std::map<std::string, LabelId> by_name;
    for (std::size_t i = 0; i < spec.labels.size(); ++i) {
        const auto id = static_cast<LabelId>(i + 1);
        const auto& l = spec.labels[i];
        if (l.name.empty() || l.name == "background" || by_name.contains(l.name))
            throw Error(ErrorCode::invalid_spec, "label names must be unique and non-empty: '" + l.name + "'");
        if (!(l.attenuation >= 0.0)) throw Error(ErrorCode::invalid_spec, "attenuation must be non-negative");
        by_name[l.name] = id;
        v.label_names[id] = l.name;
        v.attenuation[id] = l.attenuation;
    }

    const Box3 vb = v.bounds();
    for (std::size_t pi = 0; pi < spec.primitives.size(); ++pi) {
        const auto& prim = spec.primitives[pi];
        const auto it = by_name.find(prim.label);
        if (it == by_name.end()) throw Error(ErrorCode::invalid_spec, "primitive references unknown label '" + prim.label + "'");
        const Box3 pb = prim.world_bounds();
        if (warnings && !(vb.contains(pb.min) && vb.contains(pb.max)))
            warnings->push_back("primitive " + std::to_string(pi) + " ('" + prim.label + "') clipped to volume bounds");
        std::array<int, 3> lo{}, hi{};
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::max(0, static_cast<int>(std::floor((pb.min[a] - v.origin_mm[a]) / v.spacing_mm[a])));
            hi[a] = std::min(spec.dims[a] - 1, static_cast<int>(std::floor((pb.max[a] - v.origin_mm[a]) / v.spacing_mm[a])));
        }
        for (int k = lo[2]; k <= hi[2]; ++k)
            for (int j = lo[1]; j <= hi[1]; ++j)
                for (int i = lo[0]; i <= hi[0]; ++i)
                    if (prim.contains(v.voxel_center(i, j, k))) v.labels(i, j, k) = it->second;
    }
    return v;
}

inline void check_labels(const LabeledVolume& v, const LabelSet& labels)
{
    if (labels.empty()) throw Error(ErrorCode::invalid_label, "label set is empty");
    for (LabelId l : labels)
        if (!v.label_names.contains(l)) throw Error(ErrorCode::invalid_label, "unknown label id " + std::to_string(l));
}

inline Mask3D structure_mask(const LabeledVolume& v, const LabelSet& labels)
{
    check_labels(v, labels);
    const std::uint64_t bits = label_bits(labels);
    Mask3D mask(v.dims(), 0);
    auto src = v.labels.values();
    auto dst = mask.values();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = (bits >> src[i]) & 1u;
    return mask;
}

struct StructureExtent {
    Vec3 centroid = Vec3::Zero();
    Box3 box;
    std::size_t voxel_count = 0;
};

/// Centroid (mean voxel centre) and tight box (voxel-centre bounds grown by
/// half a voxel) of the voxels carrying one of labels and accepted by keep.
template <typename Filter>
StructureExtent gt_centroid_bbox(const LabeledVolume& v, const LabelSet& labels, Filter&& keep)
{
    check_labels(v, labels);
    const std::uint64_t bits = label_bits(labels);
    const auto& d = v.dims();
    StructureExtent out;
    Vec3 sum = Vec3::Zero();
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i) {
                if (!((bits >> v.labels(i, j, k)) & 1u)) continue;
                const Vec3 c = v.voxel_center(i, j, k);
                if (!keep(c)) continue;
                sum += c;
                lo = lo.cwiseMin(c);
                hi = hi.cwiseMax(c);
                ++out.voxel_count;
            }
    if (out.voxel_count == 0) throw Error(ErrorCode::empty_structure, "structure has no voxels");
    out.centroid = sum / static_cast<double>(out.voxel_count);
    out.box = {lo - v.spacing_mm / 2.0, hi + v.spacing_mm / 2.0};
    return out;
}

inline StructureExtent gt_centroid_bbox(const LabeledVolume& v, const LabelSet& labels)
{
    return gt_centroid_bbox(v, labels, [](const Vec3&) { return true; });
}

// ---------------------------------------------------------------------------
// Persistence: text header, then the raw little-endian label grid, x fastest.

inline constexpr const char* phantom_magic = "CARMTWIN-PHANTOM";

inline void save_phantom(const LabeledVolume& v, std::ostream& os)
{
    const auto& d = v.dims();
    os << phantom_magic << " 1\n";
    os << "dims " << d[0] << ' ' << d[1] << ' ' << d[2] << '\n';
    os << "spacing " << format_double(v.spacing_mm.x()) << ' ' << format_double(v.spacing_mm.y()) << ' '
       << format_double(v.spacing_mm.z()) << '\n';
    os << "origin " << format_double(v.origin_mm.x()) << ' ' << format_double(v.origin_mm.y()) << ' '
       << format_double(v.origin_mm.z()) << '\n';
    os << "labels " << v.label_names.size() << '\n';
    for (const auto& [id, name] : v.label_names)
        os << "label " << int(id) << ' ' << format_double(v.attenuation.at(id)) << ' ' << name << '\n';
    os << "data\n";
    // LabelId is a single byte so the grid is already little-endian
    const auto vals = v.labels.values();
    os.write(reinterpret_cast<const char*>(vals.data()), static_cast<std::streamsize>(vals.size()));
    if (!os) throw Error(ErrorCode::io, "failed writing phantom");
}

inline LabeledVolume load_phantom(std::istream& is)
{
    auto fail = [](const std::string& what) { return Error(ErrorCode::io, "phantom file: " + what); };
    std::string line;
    auto next_line = [&]() {
        if (!std::getline(is, line)) throw fail("unexpected end of header");
        return std::istringstream(line);
    };
    auto expect_vec3 = [&](const char* key) {
        auto ss = next_line();
        std::string k, a, b, c;
        ss >> k >> a >> b >> c;
        const auto x = parse_double(a), y = parse_double(b), z = parse_double(c);
        if (k != key || !x || !y || !z) throw fail(std::string("expected '") + key + "'");
        return Vec3(*x, *y, *z);
    };
    {
        auto ss = next_line();
        std::string magic;
        int version = 0;
        ss >> magic >> version;
        if (magic != phantom_magic || version != 1) throw fail("bad magic or version");
    }
    std::array<int, 3> dims{};
    {
        auto ss = next_line();
        std::string k;
        ss >> k >> dims[0] >> dims[1] >> dims[2];
        if (k != "dims" || !ss || dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0) throw fail("bad dims");
    }
    LabeledVolume v;
    v.spacing_mm = expect_vec3("spacing");
    v.origin_mm = expect_vec3("origin");
    std::size_t count = 0;
    {
        auto ss = next_line();
        std::string k;
        ss >> k >> count;
        if (k != "labels" || !ss) throw fail("bad label count");
    }
    for (std::size_t i = 0; i < count; ++i) {
        auto ss = next_line();
        std::string k, att;
        int id = -1;
        ss >> k >> id >> att;
        const auto mu = parse_double(att);
        std::string name;
        std::getline(ss >> std::ws, name);
        if (k != "label" || id < 0 || id >= max_labels || !mu || name.empty()) throw fail("bad label line '" + line + "'");
        v.label_names[static_cast<LabelId>(id)] = name;
        v.attenuation[static_cast<LabelId>(id)] = *mu;
    }
    if (!std::getline(is, line) || line != "data") throw fail("missing data marker");
    v.labels = Grid3D<LabelId>(dims, 0);
    auto vals = v.labels.values();
    is.read(reinterpret_cast<char*>(vals.data()), static_cast<std::streamsize>(vals.size()));
    if (is.gcount() != static_cast<std::streamsize>(vals.size())) throw fail("truncated label grid");
    v.validate();
    return v;
}

inline void save_phantom(const LabeledVolume& v, const std::string& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(ErrorCode::io, "cannot open " + path);
    save_phantom(v, os);
}

inline LabeledVolume load_phantom(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorCode::io, "cannot open " + path);
    return load_phantom(is);
}

} // namespace carmtwin
