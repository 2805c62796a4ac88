#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace carmtwin {

enum class ErrorCode {
    invalid_parameter,
    degenerate_projection,
    invalid_spec,
    invalid_label,
    empty_structure,
    degenerate_collimation,
    unavailable,
    protocol,
    validation,
    empty_reconstruction,
    no_detection,
    duplicate_id,
    parse,
    shape_mismatch,
    configuration,
    io,
    not_found,
};

constexpr std::string_view to_string(ErrorCode code) noexcept
{
    switch (code) {
    case ErrorCode::invalid_parameter: return "invalid-parameter";
    case ErrorCode::degenerate_projection: return "degenerate-projection";
    case ErrorCode::invalid_spec: return "invalid-spec";
    case ErrorCode::invalid_label: return "invalid-label";
    case ErrorCode::empty_structure: return "empty-structure";
    case ErrorCode::degenerate_collimation: return "degenerate-collimation";
    case ErrorCode::unavailable: return "unavailable";
    case ErrorCode::protocol: return "protocol";
    case ErrorCode::validation: return "validation";
    case ErrorCode::empty_reconstruction: return "empty-reconstruction";
    case ErrorCode::no_detection: return "no-detection";
    case ErrorCode::duplicate_id: return "duplicate-id";
    case ErrorCode::parse: return "parse";
    case ErrorCode::shape_mismatch: return "shape-mismatch";
    case ErrorCode::configuration: return "configuration";
    case ErrorCode::io: return "io";
    case ErrorCode::not_found: return "not-found";
    }
    return "unknown";
}

/// Base exception for every failure raised by the library. The code is stable
/// and is what callers (and the HTTP layer) should branch on.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message)
        , code_(code)
    {
    }

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

/// Raised by the action parser; carries the offending token and its byte offset.
class ParseError : public Error {
public:
    ParseError(std::string token, std::size_t position, const std::string& message)
        : Error(ErrorCode::parse,
                message + " (token '" + token + "' at position " + std::to_string(position) + ")")
        , token_(std::move(token))
        , position_(position)
    {
    }

    const std::string& token() const noexcept { return token_; }
    std::size_t position() const noexcept { return position_; }

private:
    std::string token_;
    std::size_t position_;
};

/// Raised when no grid point satisfies the reconstruction conditions.
/// mask_areas_px holds, per selected view, the number of pixels scoring above
/// the membership threshold.
class EmptyReconstructionError : public Error {
public:
    explicit EmptyReconstructionError(std::vector<std::size_t> mask_areas_px)
        : Error(ErrorCode::empty_reconstruction, describe(mask_areas_px))
        , mask_areas_px_(std::move(mask_areas_px))
    {
    }

    const std::vector<std::size_t>& mask_areas_px() const noexcept { return mask_areas_px_; }

private:
    static std::string describe(const std::vector<std::size_t>& areas)
    {
        std::string s = "no point satisfies the reconstruction conditions; per-view mask areas [";
        for (std::size_t i = 0; i < areas.size(); ++i) {
            if (i) s += ", ";
            s += std::to_string(areas[i]);
        }
        return s + "] px";
    }

    std::vector<std::size_t> mask_areas_px_;
};

} // namespace carmtwin
