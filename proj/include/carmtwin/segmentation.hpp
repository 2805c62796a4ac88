#pragma once

// Promptable segmentation oracle: per-pixel scores f(u, I, t) in [0, 1] derived
// from the phantom's projected ground truth, with configurable corruption that
// mimics the failure modes of a text-prompted foundation model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "carmtwin/error.hpp"
#include "carmtwin/grid.hpp"
#include "carmtwin/phantom.hpp"
#include "carmtwin/rng.hpp"
#include "carmtwin/vocabulary.hpp"
#include "carmtwin/xray.hpp"

namespace carmtwin {

struct SegmentationHeatmap {
    Grid2D<float> scores;
    std::string prompt;
    ImageId image_id;
    std::string model_tag = "oracle";

    void validate(const XRayImage* source = nullptr) const
    {
        for (float s : scores.values())
            if (!(s >= 0.0f && s <= 1.0f)) throw Error(ErrorCode::validation, "heatmap score outside [0, 1]");
        if (source && (scores.width() != source->pixels.width() || scores.height() != source->pixels.height()))
            throw Error(ErrorCode::validation, "heatmap shape differs from its image");
    }
};

struct CorruptionConfig {
    double blur_sigma_px = 0.0;
    int dilate_erode_px = 0; ///< > 0 dilates, < 0 erodes
    double dropout_prob = 0.0;
    std::map<std::string, std::string> confusion_map; ///< prompt -> prompt actually segmented
    std::uint64_t seed = 0;

    static CorruptionConfig identity() { return {}; }

    /// Stylized defaults loosely resembling a text-only foundation model.
    static CorruptionConfig stylized(std::uint64_t seed = 0)
    {
        CorruptionConfig c;
        c.blur_sigma_px = 2.0;
        c.dilate_erode_px = -1;
        c.dropout_prob = 0.05;
        c.seed = seed;
        return c;
    }

    void validate() const
    {
        if (!(blur_sigma_px >= 0.0) || !std::isfinite(blur_sigma_px))
            throw Error(ErrorCode::invalid_parameter, "blur sigma must be >= 0");
        if (!(dropout_prob >= 0.0 && dropout_prob <= 1.0))
            throw Error(ErrorCode::invalid_parameter, "dropout probability must lie in [0, 1]");
    }
};

/// Pixels scoring at least threshold.
inline Mask2D threshold_heatmap(const Grid2D<float>& scores, float threshold = 0.5f)
{
    Mask2D m(scores.width(), scores.height(), 0);
    auto src = scores.values();
    auto dst = m.values();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] >= threshold;
    return m;
}

/// Dilation (radius > 0) or erosion (radius < 0) by a Euclidean disk. Pixels
/// beyond the image border do not participate.
inline Mask2D morph_disk(const Mask2D& in, int radius)
{
    if (radius == 0) return in;
    const int r = std::abs(radius);
    std::vector<std::pair<int, int>> offsets;
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx)
            if (dx * dx + dy * dy <= r * r) offsets.emplace_back(dx, dy);
    Mask2D out(in.width(), in.height(), 0);
    const bool dilate = radius > 0;
    for (int y = 0; y < in.height(); ++y)
        for (int x = 0; x < in.width(); ++x) {
            if (dilate) {
                if (in(x, y)) {
                    for (const auto& [dx, dy] : offsets)
                        if (in.contains(x + dx, y + dy)) out(x + dx, y + dy) = 1;
                }
            } else if (in(x, y)) {
                bool keep = true;
                for (const auto& [dx, dy] : offsets)
                    if (in.contains(x + dx, y + dy) && !in(x + dx, y + dy)) {
                        keep = false;
                        break;
                    }
                out(x, y) = keep;
            }
        }
    return out;
}

/// Separable Gaussian blur with replicated borders, kernel radius ceil(3 sigma).
inline Grid2D<float> gaussian_blur(const Grid2D<float>& in, double sigma)
{
    if (sigma <= 0.0) return in;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        total += kernel[static_cast<std::size_t>(i + radius)];
    }
    for (double& k : kernel) k /= total;
    const int w = in.width(), h = in.height();
    Grid2D<float> tmp(w, h, 0.0f), out(w, h, 0.0f);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<std::size_t>(i + radius)] * in(std::clamp(x + i, 0, w - 1), y);
            tmp(x, y) = static_cast<float>(acc);
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<std::size_t>(i + radius)] * tmp(x, std::clamp(y + i, 0, h - 1));
            out(x, y) = static_cast<float>(acc);
        }
    return out;
}

/// Seed of the per-(image, prompt) random stream.
inline std::uint64_t oracle_stream_seed(std::uint64_t seed, ImageId image, std::string_view prompt)
{
    return mix64(seed ^ mix64(image.value ^ fnv1a(normalize_prompt(prompt))));
}

/// Vocabulary entry the oracle actually draws for prompt on image: the
/// resolved prompt after the confusion map and, with probability dropout_prob,
/// a different entry chosen uniformly. Empty for unknown prompts.
inline std::string oracle_structure(const PromptVocabulary& voc, ImageId image, const std::string& prompt,
                                    const CorruptionConfig& cfg)
{
    std::string key = voc.canonical(prompt);
    if (key.empty()) return key;
    for (const auto& [from, to] : cfg.confusion_map) {
        if (voc.canonical(from) != key) continue;
        const std::string swapped = voc.canonical(to);
        if (!swapped.empty()) key = swapped;
        break;
    }
    std::mt19937_64 rng(oracle_stream_seed(cfg.seed, image, prompt));
    const double u = uniform01(rng);
    if (u < cfg.dropout_prob && voc.entries.size() > 1) {
        std::vector<std::string> others;
        for (const auto& [k, _] : voc.entries)
            if (k != key) others.push_back(k);
        key = others[uniform_index(rng, others.size())];
    }
    return key;
}

/// Scores for a structure given as label bits: footprint mask, dilated or
/// eroded, blurred, clamped, and zeroed outside the collimation rectangle.
inline Grid2D<float> oracle_scores(const LabelFootprint& footprint, std::uint64_t bits, const CorruptionConfig& cfg,
                                   const std::optional<DetectorRect>& collimation)
{
    const Mask2D mask = morph_disk(footprint_mask(footprint, bits), cfg.dilate_erode_px);
    Grid2D<float> scores(mask.width(), mask.height(), 0.0f);
    for (std::size_t i = 0; i < mask.size(); ++i) scores.values()[i] = mask.values()[i] ? 1.0f : 0.0f;
    scores = gaussian_blur(scores, cfg.blur_sigma_px);
    for (float& s : scores.values()) s = std::clamp(s, 0.0f, 1.0f);
    if (collimation) apply_collimation(scores, *collimation);
    return scores;
}

/// Oracle heatmap for prompt on img: oracle_structure followed by
/// oracle_scores. Nothing is visible outside the image's collimation, so those
/// pixels score 0. Unknown prompts give an all-zero heatmap. footprint, if
/// given, must be the label footprint of img's projection.
inline SegmentationHeatmap segment_oracle(const LabeledVolume& v, const PromptVocabulary& voc, const XRayImage& img,
                                          const std::string& prompt, const CorruptionConfig& cfg,
                                          const LabelFootprint* footprint = nullptr)
{
    cfg.validate();
    SegmentationHeatmap out;
    out.prompt = prompt;
    out.image_id = img.id;
    out.model_tag = "oracle";
    out.scores = Grid2D<float>(img.projection.width(), img.projection.height(), 0.0f);

    const std::string key = oracle_structure(voc, img.id, prompt, cfg);
    if (key.empty()) return out;
    LabelFootprint computed;
    if (!footprint) {
        computed = compute_label_footprint(v, img.projection);
        footprint = &computed;
    }
    if (footprint->width() != out.scores.width() || footprint->height() != out.scores.height())
        throw Error(ErrorCode::shape_mismatch, "footprint does not match the image");
    out.scores = oracle_scores(*footprint, label_bits(voc.entries.at(key)), cfg, img.collimation_px);
    return out;
}

} // namespace carmtwin
