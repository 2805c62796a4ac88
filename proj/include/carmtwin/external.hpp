#pragma once

// HTTP clients for models running outside the process.
//
// Segmentation:  POST <endpoint>/segment, multipart/form-data with parts
//   "image" (16-bit PGM), "sidecar" (image sidecar text) and "prompt".
//   Reply body: the ASCII header "HEATMAP <height> <width>\n" followed by
//   height * width little-endian float32 scores, row-major.
//
// Language model: POST <endpoint>/interpret with the JSON body
//   {"system": str, "transcript": [{"utterance": str, "action": str}], "utterance": str}
//   Reply: either {"action": str} as JSON or the action string as plain text.

#include <bit>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <regex>
#include <sstream>
#include <string>

// Eigen first: httplib pulls in <resolv.h>, whose _res macro breaks Eigen.
#include "carmtwin/error.hpp"
#include "carmtwin/image_io.hpp"
#include "carmtwin/interpreter.hpp"
#include "carmtwin/segmentation.hpp"
#include "carmtwin/xray.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace carmtwin {

// ---------------------------------------------------------------------------
// Heatmap wire format

inline std::string encode_heatmap(const Grid2D<float>& scores)
{
    std::string out = "HEATMAP " + std::to_string(scores.height()) + " " + std::to_string(scores.width()) + "\n";
    const std::size_t header = out.size();
    out.resize(header + scores.size() * 4);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        std::uint32_t bits = std::bit_cast<std::uint32_t>(scores.values()[i]);
        for (int b = 0; b < 4; ++b) out[header + 4 * i + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xffu);
    }
    return out;
}

/// Parses a heatmap reply. Malformed framing throws Error(protocol); values
/// are not range-checked here.
inline Grid2D<float> decode_heatmap(const std::string& body)
{
    const auto nl = body.find('\n');
    if (nl == std::string::npos) throw Error(ErrorCode::protocol, "heatmap reply has no header line");
    std::istringstream hs(body.substr(0, nl));
    std::string magic;
    long long h = -1, w = -1;
    hs >> magic >> h >> w;
    if (magic != "HEATMAP" || hs.fail() || h <= 0 || w <= 0 || h > 65535 || w > 65535)
        throw Error(ErrorCode::protocol, "bad heatmap header '" + body.substr(0, std::min<std::size_t>(nl, 64)) + "'");
    const std::size_t n = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    if (body.size() - nl - 1 != n * 4)
        throw Error(ErrorCode::protocol, "heatmap payload holds " + std::to_string(body.size() - nl - 1) + " bytes, expected "
                                             + std::to_string(n * 4));
    Grid2D<float> g(static_cast<int>(w), static_cast<int>(h), 0.0f);
    const auto* p = reinterpret_cast<const unsigned char*>(body.data() + nl + 1);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[4 * i + static_cast<std::size_t>(b)]) << (8 * b);
        g.values()[i] = std::bit_cast<float>(bits);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Endpoints

struct Endpoint {
    std::string origin;      ///< scheme://host[:port]
    std::string path_prefix; ///< no trailing slash
};

inline Endpoint parse_endpoint(const std::string& url)
{
    static const std::regex re(R"(^(http://[^/\s]+)(/[^\s]*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, re)) throw Error(ErrorCode::configuration, "unsupported endpoint '" + url + "' (need http://host[:port][/path])");
    std::string prefix = m[2].matched ? std::string(m[2]) : std::string{};
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {m[1], prefix};
}

namespace detail {

inline httplib::Client make_client(const Endpoint& ep, std::chrono::milliseconds timeout)
{
    httplib::Client cli(ep.origin);
    const auto sec = std::chrono::duration_cast<std::chrono::seconds>(timeout);
    const auto usec = std::chrono::duration_cast<std::chrono::microseconds>(timeout - sec);
    cli.set_connection_timeout(sec.count(), usec.count());
    cli.set_read_timeout(sec.count(), usec.count());
    cli.set_write_timeout(sec.count(), usec.count());
    return cli;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Segmentation models

/// Anything that maps (image, prompt) to a heatmap.
class SegmentationModel {
public:
    virtual ~SegmentationModel() = default;
    virtual SegmentationHeatmap segment(const XRayImage& img, const std::string& prompt) = 0;
    /// Called once per acquisition with the label footprint the simulator
    /// computed while rendering; models that do not need it ignore it.
    virtual void observe(const XRayImage&, std::shared_ptr<const LabelFootprint>) {}
};

/// The phantom oracle. Footprints handed to observe are reused; others are
/// traced on demand.
class OracleSegmentation : public SegmentationModel {
public:
    OracleSegmentation(std::shared_ptr<const LabeledVolume> volume, std::shared_ptr<const PromptVocabulary> vocabulary,
                       CorruptionConfig cfg)
        : volume_(std::move(volume)), vocabulary_(std::move(vocabulary)), cfg_(std::move(cfg))
    {
        cfg_.validate();
    }

    SegmentationHeatmap segment(const XRayImage& img, const std::string& prompt) override
    {
        auto fp = footprints_.find(img.id);
        if (fp == footprints_.end() || fp->second->width() != img.projection.width()
            || fp->second->height() != img.projection.height())
            return segment_oracle(*volume_, *vocabulary_, img, prompt, cfg_);
        return segment_oracle(*volume_, *vocabulary_, img, prompt, cfg_, fp->second.get());
    }

    void observe(const XRayImage& img, std::shared_ptr<const LabelFootprint> footprint) override
    {
        if (footprint) footprints_[img.id] = std::move(footprint);
    }

    const CorruptionConfig& config() const noexcept { return cfg_; }

private:
    std::shared_ptr<const LabeledVolume> volume_;
    std::shared_ptr<const PromptVocabulary> vocabulary_;
    CorruptionConfig cfg_;
    std::map<ImageId, std::shared_ptr<const LabelFootprint>> footprints_;
};

/// Remote model over HTTP (see the contract at the top of this file).
class ExternalSegmentation : public SegmentationModel {
public:
    explicit ExternalSegmentation(std::string endpoint, std::chrono::milliseconds timeout = std::chrono::seconds(30))
        : endpoint_(parse_endpoint(endpoint)), timeout_(timeout)
    {
    }

    SegmentationHeatmap segment(const XRayImage& img, const std::string& prompt) override
    {
        httplib::Client cli = detail::make_client(endpoint_, timeout_);
        httplib::MultipartFormDataItems items{
            {"image", encode_pgm16(img.pixels), "image.pgm", "image/x-portable-graymap"},
            {"sidecar", encode_sidecar(img), "image.txt", "text/plain"},
            {"prompt", prompt, "", "text/plain"},
        };
        auto res = cli.Post(endpoint_.path_prefix + "/segment", items);
        if (!res) throw Error(ErrorCode::unavailable, "segmentation service: " + httplib::to_string(res.error()));
        if (res->status != 200)
            throw Error(ErrorCode::protocol, "segmentation service answered HTTP " + std::to_string(res->status));
        SegmentationHeatmap hm;
        hm.scores = decode_heatmap(res->body);
        if (hm.scores.width() != img.pixels.width() || hm.scores.height() != img.pixels.height())
            throw Error(ErrorCode::protocol, "segmentation service returned " + std::to_string(hm.scores.height()) + "x"
                                                 + std::to_string(hm.scores.width()) + " scores for a "
                                                 + std::to_string(img.pixels.height()) + "x"
                                                 + std::to_string(img.pixels.width()) + " image");
        hm.prompt = prompt;
        hm.image_id = img.id;
        hm.model_tag = "external";
        hm.validate(&img);
        return hm;
    }

private:
    Endpoint endpoint_;
    std::chrono::milliseconds timeout_;
};

// ---------------------------------------------------------------------------
// Language model

class HttpLanguageModel : public LanguageModelClient {
public:
    explicit HttpLanguageModel(std::string endpoint, std::chrono::milliseconds timeout = std::chrono::seconds(30))
        : endpoint_(parse_endpoint(endpoint)), timeout_(timeout)
    {
    }

    std::string complete(const LanguageModelRequest& request) override
    {
        nlohmann::json body{{"system", request.system_instruction}, {"utterance", request.utterance}};
        body["transcript"] = nlohmann::json::array();
        for (const auto& [u, a] : request.transcript) body["transcript"].push_back({{"utterance", u}, {"action", a}});
        httplib::Client cli = detail::make_client(endpoint_, timeout_);
        auto res = cli.Post(endpoint_.path_prefix + "/interpret", body.dump(), "application/json");
        if (!res) throw Error(ErrorCode::unavailable, "language model: " + httplib::to_string(res.error()));
        if (res->status != 200) throw Error(ErrorCode::unavailable, "language model answered HTTP " + std::to_string(res->status));
        if (res->get_header_value("Content-Type").find("json") != std::string::npos) {
            const auto j = nlohmann::json::parse(res->body, nullptr, false);
            if (j.is_discarded() || !j.contains("action") || !j["action"].is_string())
                throw Error(ErrorCode::protocol, "language model reply lacks an 'action' string");
            return j["action"].get<std::string>();
        }
        return res->body;
    }

private:
    Endpoint endpoint_;
    std::chrono::milliseconds timeout_;
};

} // namespace carmtwin
