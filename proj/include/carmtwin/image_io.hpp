#pragma once

// Image interchange pair: a 16-bit binary PGM (big-endian samples, as the
// netpbm format mandates) plus a text sidecar with the acquisition geometry.
//
// Sidecar layout, one key per line:
//   CARMTWIN-IMAGE 1
//   id <uint>
//   acquired_at <uint>
//   size <width> <height>
//   pixel_pitch_mm <mm>
//   focal_px <px>
//   principal_point <u> <v>
//   rotation <r00 r01 r02 r10 r11 r12 r20 r21 r22>
//   translation <tx ty tz>                      (mm)
//   carm <alpha beta roll iso_x iso_y iso_z sid sdd>
//   projection
//   <p00 p01 p02 p03>                           (row-major 3x4, maps mm to px)
//   <p10 p11 p12 p13>
//   <p20 p21 p22 p23>
//   collimation <x0 y0 x1 y1> | collimation none

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "carmtwin/error.hpp"
#include "carmtwin/grid.hpp"
#include "carmtwin/numfmt.hpp"
#include "carmtwin/xray.hpp"

namespace carmtwin {

inline std::string encode_pgm16(const Grid2D<float>& img)
{
    std::string out = "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n65535\n";
    out.reserve(out.size() + img.size() * 2);
    for (float v : img.values()) {
        const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 65535.0));
        out.push_back(static_cast<char>(q >> 8));
        out.push_back(static_cast<char>(q & 0xff));
    }
    return out;
}

inline Grid2D<float> decode_pgm16(const std::string& bytes)
{
    std::istringstream is(bytes);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    if (magic != "P5" || w <= 0 || h <= 0 || maxval != 65535)
        throw Error(ErrorCode::protocol, "expected a 16-bit binary PGM");
    is.get(); // single whitespace before the raster
    const auto offset = static_cast<std::size_t>(is.tellg());
    if (bytes.size() != offset + static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 2)
        throw Error(ErrorCode::protocol, "PGM raster size mismatch");
    Grid2D<float> img(w, h, 0.0f);
    auto vals = img.values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const auto hi = static_cast<unsigned char>(bytes[offset + 2 * i]);
        const auto lo = static_cast<unsigned char>(bytes[offset + 2 * i + 1]);
        vals[i] = static_cast<float>(((hi << 8) | lo) / 65535.0);
    }
    return img;
}

namespace detail {

inline void write_values(std::ostringstream& os, std::initializer_list<double> vs)
{
    bool first = true;
    for (double v : vs) {
        if (!first) os << ' ';
        os << format_double(v);
        first = false;
    }
    os << '\n';
}

inline std::vector<double> read_values(std::istringstream& ss, std::size_t n)
{
    std::vector<double> out;
    std::string tok;
    while (out.size() < n && ss >> tok) {
        const auto v = parse_double(tok);
        if (!v) throw Error(ErrorCode::protocol, "sidecar: bad number '" + tok + "'");
        out.push_back(*v);
    }
    if (out.size() != n) throw Error(ErrorCode::protocol, "sidecar: expected " + std::to_string(n) + " numbers");
    return out;
}

} // namespace detail

inline std::string encode_sidecar(const XRayImage& img)
{
    const auto& p = img.projection;
    const auto& r = p.pose.rotation;
    const auto& t = p.pose.translation;
    std::ostringstream os;
    os << "CARMTWIN-IMAGE 1\n";
    os << "id " << img.id.value << '\n';
    os << "acquired_at " << img.acquired_at.value << '\n';
    os << "size " << p.width() << ' ' << p.height() << '\n';
    os << "pixel_pitch_mm ";
    detail::write_values(os, {p.intrinsics.pixel_pitch_mm});
    os << "focal_px ";
    detail::write_values(os, {p.intrinsics.focal_px});
    os << "principal_point ";
    detail::write_values(os, {p.intrinsics.principal_point.x(), p.intrinsics.principal_point.y()});
    os << "rotation ";
    detail::write_values(os, {r(0, 0), r(0, 1), r(0, 2), r(1, 0), r(1, 1), r(1, 2), r(2, 0), r(2, 1), r(2, 2)});
    os << "translation ";
    detail::write_values(os, {t.x(), t.y(), t.z()});
    os << "carm ";
    const auto& c = img.carm;
    detail::write_values(os, {c.alpha, c.beta, c.roll, c.isocenter.x(), c.isocenter.y(), c.isocenter.z(),
                              c.source_isocenter_dist, c.source_detector_dist});
    os << "projection\n";
    for (int row = 0; row < 3; ++row)
        detail::write_values(os, {p.matrix(row, 0), p.matrix(row, 1), p.matrix(row, 2), p.matrix(row, 3)});
    if (img.collimation_px) {
        const auto& cr = *img.collimation_px;
        os << "collimation ";
        detail::write_values(os, {cr.x0, cr.y0, cr.x1, cr.y1});
    } else {
        os << "collimation none\n";
    }
    return os.str();
}

/// Parses a sidecar into an image with empty pixels and validates that the
/// stored matrix agrees with the stored intrinsics and pose.
inline XRayImage decode_sidecar(const std::string& text)
{
    std::istringstream is(text);
    std::string line;
    auto next = [&](const std::string& key) {
        if (!std::getline(is, line)) throw Error(ErrorCode::protocol, "sidecar: missing '" + key + "'");
        std::istringstream ss(line);
        std::string k;
        ss >> k;
        if (k != key) throw Error(ErrorCode::protocol, "sidecar: expected '" + key + "', got '" + k + "'");
        return ss;
    };
    {
        auto ss = next("CARMTWIN-IMAGE");
        int version = 0;
        ss >> version;
        if (version != 1) throw Error(ErrorCode::protocol, "sidecar: unsupported version");
    }
    XRayImage img;
    {
        auto ss = next("id");
        std::string tok;
        ss >> tok;
        const auto v = parse_int<std::uint64_t>(tok);
        if (!v) throw Error(ErrorCode::protocol, "sidecar: bad id");
        img.id = ImageId{*v};
    }
    {
        auto ss = next("acquired_at");
        std::string tok;
        ss >> tok;
        const auto v = parse_int<std::uint64_t>(tok);
        if (!v) throw Error(ErrorCode::protocol, "sidecar: bad tick");
        img.acquired_at = Tick{*v};
    }
    Vec2i size;
    {
        auto ss = next("size");
        ss >> size.x() >> size.y();
        if (!ss || size.x() <= 0 || size.y() <= 0) throw Error(ErrorCode::protocol, "sidecar: bad size");
    }
    IntrinsicMatrix k;
    { auto ss = next("pixel_pitch_mm"); k.pixel_pitch_mm = detail::read_values(ss, 1)[0]; }
    { auto ss = next("focal_px"); k.focal_px = detail::read_values(ss, 1)[0]; }
    {
        auto ss = next("principal_point");
        const auto v = detail::read_values(ss, 2);
        k.principal_point = {v[0], v[1]};
    }
    k.detector_size_px = size;
    CameraPose pose;
    {
        auto ss = next("rotation");
        const auto v = detail::read_values(ss, 9);
        pose.rotation << v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8];
    }
    {
        auto ss = next("translation");
        const auto v = detail::read_values(ss, 3);
        pose.translation = {v[0], v[1], v[2]};
    }
    pose.timestamp = img.acquired_at;
    {
        auto ss = next("carm");
        const auto v = detail::read_values(ss, 8);
        img.carm = {v[0], v[1], v[2], Vec3(v[3], v[4], v[5]), v[6], v[7]};
    }
    next("projection");
    Mat34 m;
    for (int row = 0; row < 3; ++row) {
        if (!std::getline(is, line)) throw Error(ErrorCode::protocol, "sidecar: truncated projection");
        std::istringstream ss(line);
        const auto v = detail::read_values(ss, 4);
        for (int col = 0; col < 4; ++col) m(row, col) = v[static_cast<std::size_t>(col)];
    }
    {
        auto ss = next("collimation");
        std::string tok;
        ss >> tok;
        if (tok != "none") {
            std::istringstream rest(line.substr(line.find("collimation") + 11));
            const auto v = detail::read_values(rest, 4);
            img.collimation_px = DetectorRect{v[0], v[1], v[2], v[3]};
        }
    }
    try {
        img.projection = make_projection(k, pose);
        img.projection.matrix = m;
        img.projection.validate();
    } catch (const Error& e) {
        throw Error(ErrorCode::protocol, std::string("sidecar geometry is inconsistent: ") + e.what());
    }
    return img;
}

inline void write_image_pair(const XRayImage& img, const std::string& stem)
{
    std::ofstream pgm(stem + ".pgm", std::ios::binary);
    std::ofstream txt(stem + ".txt");
    if (!pgm || !txt) throw Error(ErrorCode::io, "cannot write image pair " + stem);
    pgm << encode_pgm16(img.pixels);
    txt << encode_sidecar(img);
}

inline XRayImage read_image_pair(const std::string& stem)
{
    auto slurp = [](const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw Error(ErrorCode::io, "cannot read " + path);
        std::ostringstream ss;
        ss << is.rdbuf();
        return ss.str();
    };
    XRayImage img = decode_sidecar(slurp(stem + ".txt"));
    img.pixels = decode_pgm16(slurp(stem + ".pgm"));
    img.validate();
    return img;
}

} // namespace carmtwin
