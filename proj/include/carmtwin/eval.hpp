#pragma once

// Evaluation: DICE, 2D/3D centroid error, box precision/recall, and the
// experiment drivers built on them (single-image study, random view-subset
// study, corruption sweep).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "carmtwin/error.hpp"
#include "carmtwin/geometry.hpp"
#include "carmtwin/grid.hpp"
#include "carmtwin/numfmt.hpp"
#include "carmtwin/phantom.hpp"
#include "carmtwin/rng.hpp"
#include "carmtwin/segmentation.hpp"
#include "carmtwin/twin.hpp"
#include "carmtwin/vocabulary.hpp"
#include "carmtwin/xray.hpp"

namespace carmtwin {

// ---------------------------------------------------------------------------
// Metrics

/// 2|A and B| / (|A| + |B|); two empty masks score 1.
inline double dice(const Mask2D& a, const Mask2D& b)
{
    if (!a.same_shape(b)) throw Error(ErrorCode::shape_mismatch, "dice: masks differ in shape");
    std::size_t inter = 0, na = 0, nb = 0;
    const auto va = a.values(), vb = b.values();
    for (std::size_t i = 0; i < va.size(); ++i) {
        const bool x = va[i] != 0, y = vb[i] != 0;
        na += x;
        nb += y;
        inter += x && y;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

/// Mean pixel centre of the set pixels, nullopt if none.
inline std::optional<Vec2> mask_centroid_px(const Mask2D& m)
{
    double su = 0.0, sv = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x)
            if (m(x, y)) {
                su += x + 0.5;
                sv += y + 0.5;
                ++n;
            }
    if (n == 0) return std::nullopt;
    return Vec2(su, sv) / static_cast<double>(n);
}

/// Distance between the centroids of the thresholded prediction and gt, in mm
/// on the detector. nullopt (an undefined sample) when either mask is empty.
inline std::optional<double> centroid_error_2d(const Grid2D<float>& pred, const Mask2D& gt, double pitch_mm,
                                               float threshold = 0.5f)
{
    if (pred.width() != gt.width() || pred.height() != gt.height())
        throw Error(ErrorCode::shape_mismatch, "centroid_error_2d: shapes differ");
    const auto a = mask_centroid_px(threshold_heatmap(pred, threshold));
    const auto b = mask_centroid_px(gt);
    if (!a || !b) return std::nullopt;
    return (*a - *b).norm() * pitch_mm;
}

struct BoxPR {
    std::optional<double> precision; ///< undefined for a zero-volume prediction
    std::optional<double> recall;    ///< undefined for a zero-volume ground truth
};

inline BoxPR bbox_pr(const Box3& pred, const Box3& gt)
{
    if (!pred.valid() || !gt.valid()) throw Error(ErrorCode::invalid_parameter, "bbox_pr: box with min > max");
    const double inter = pred.intersect(gt).volume();
    BoxPR out;
    if (pred.volume() > 0.0) out.precision = inter / pred.volume();
    if (gt.volume() > 0.0) out.recall = inter / gt.volume();
    return out;
}

struct MeanSd {
    double mean = 0.0;
    double sd = 0.0; ///< sample standard deviation (n - 1); 0 for one sample
    std::size_t n = 0;
};

inline std::optional<MeanSd> mean_sd(const std::vector<double>& xs)
{
    if (xs.empty()) return std::nullopt;
    MeanSd out;
    out.n = xs.size();
    double sum = 0.0;
    for (double x : xs) sum += x;
    out.mean = sum / static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - out.mean) * (x - out.mean);
        out.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return out;
}

struct MetricRow {
    std::string prompt;
    std::optional<MeanSd> dice;
    std::optional<MeanSd> centroid2d_mm;
    std::optional<MeanSd> centroid3d_mm;
    std::optional<MeanSd> bbox_precision;
    std::optional<MeanSd> bbox_recall;
    std::size_t n_samples = 0;
    std::size_t n_undefined = 0; ///< samples excluded because a metric was undefined
};

// ---------------------------------------------------------------------------
// Inputs

struct ViewSpec {
    std::string name;
    CArmState carm;
};

/// One view per line: "name alpha beta roll [x y z]" (degrees, mm); '#'
/// starts a comment.
inline std::vector<ViewSpec> parse_views(const std::string& text)
{
    std::vector<ViewSpec> out;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::vector<std::string> tok;
        for (std::string t; ls >> t;) tok.push_back(t);
        if (tok.size() != 4 && tok.size() != 7)
            throw Error(ErrorCode::invalid_spec, "views line " + std::to_string(lineno) + ": expected name alpha beta roll [x y z]");
        std::vector<double> v;
        for (std::size_t i = 1; i < tok.size(); ++i) {
            const auto d = parse_double(tok[i]);
            if (!d) throw Error(ErrorCode::invalid_spec, "views line " + std::to_string(lineno) + ": bad number '" + tok[i] + "'");
            v.push_back(*d);
        }
        ViewSpec s{tok[0], {}};
        s.carm.alpha = v[0];
        s.carm.beta = v[1];
        s.carm.roll = v[2];
        if (v.size() == 6) s.carm.isocenter = Vec3(v[3], v[4], v[5]);
        s.carm.validate();
        out.push_back(s);
    }
    return out;
}

/// One prompt per line; '#' starts a comment.
inline std::vector<std::string> parse_prompt_list(const std::string& text)
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

struct StudyImage {
    std::string name;
    XRayImage image;
    LabelFootprint footprint;
};

/// Renders every view once (ids and ticks 1..n, no collimation).
inline std::vector<StudyImage> render_views(const LabeledVolume& v, const std::vector<ViewSpec>& views,
                                            double detector_mm = 430.0, double pitch_mm = 1.2)
{
    std::vector<StudyImage> out;
    for (std::size_t i = 0; i < views.size(); ++i) {
        const Tick t{i + 1};
        const IntrinsicMatrix k = make_intrinsics(detector_mm, pitch_mm, views[i].carm.source_detector_dist);
        StudyImage s{views[i].name, {}, {}};
        s.image = render_drr(v, make_projection(k, pose_from_carm(views[i].carm, t)), std::nullopt, nullptr, &s.footprint);
        s.image.id = ImageId{i + 1};
        s.image.carm = views[i].carm;
        s.image.acquired_at = t;
        out.push_back(std::move(s));
    }
    return out;
}

namespace detail {

/// Oracle heatmaps memoized on what they actually depend on: the image, the
/// structure drawn and the corruption shape (not the seed).
class HeatmapCache {
public:
    const SegmentationHeatmap& get(const PromptVocabulary& voc, const StudyImage& img, const std::string& prompt,
                                   const CorruptionConfig& cfg)
    {
        const std::string key = oracle_structure(voc, img.image.id, prompt, cfg);
        auto k = std::make_tuple(img.image.id.value, key, cfg.blur_sigma_px, cfg.dilate_erode_px, normalize_prompt(prompt));
        auto it = cache_.find(k);
        if (it != cache_.end()) return it->second;
        SegmentationHeatmap hm;
        hm.prompt = prompt;
        hm.image_id = img.image.id;
        hm.scores = key.empty() ? Grid2D<float>(img.image.pixels.width(), img.image.pixels.height(), 0.0f)
                                : oracle_scores(img.footprint, label_bits(voc.entries.at(key)), cfg, img.image.collimation_px);
        return cache_.emplace(k, std::move(hm)).first->second;
    }

private:
    std::map<std::tuple<std::uint64_t, std::string, double, int, std::string>, SegmentationHeatmap> cache_;
};

/// Ground truth restricted to voxels projecting inside the primary image.
inline StructureExtent gt_in_view(const LabeledVolume& v, const LabelSet& labels, const ProjectionMatrix& p)
{
    return gt_centroid_bbox(v, labels, [&](const Vec3& x) {
        const Vec3 h = project_homogeneous(p.matrix, x);
        if (!(h.z() > 0.0)) return false;
        const double u = h.x() / h.z(), t = h.y() / h.z();
        return u >= 0.0 && u < p.width() && t >= 0.0 && t < p.height();
    });
}

inline LabelSet checked_labels(const PromptVocabulary& voc, const std::string& prompt)
{
    const LabelSet labels = resolve_prompt(voc, prompt);
    if (labels.empty()) throw Error(ErrorCode::configuration, "prompt '" + prompt + "' is not in the vocabulary");
    return labels;
}

inline void fill_row(MetricRow& row, const std::vector<double>& dice_v, const std::vector<double>& c2, const std::vector<double>& c3,
                     const std::vector<double>& prec, const std::vector<double>& rec)
{
    row.dice = mean_sd(dice_v);
    row.centroid2d_mm = mean_sd(c2);
    row.centroid3d_mm = mean_sd(c3);
    row.bbox_precision = mean_sd(prec);
    row.bbox_recall = mean_sd(rec);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Single-image study

struct SingleImageSample {
    std::string prompt;
    std::string view;
    ImageId image;
    double dice = 0.0;
    std::optional<double> centroid2d_mm;
};

struct SingleImageStudy {
    std::vector<SingleImageSample> samples;
    std::vector<MetricRow> rows;
};

inline SingleImageStudy run_single_image_study(const LabeledVolume& v, const PromptVocabulary& voc,
                                               const std::vector<StudyImage>& images, const std::vector<std::string>& prompts,
                                               const CorruptionConfig& cfg)
{
    cfg.validate();
    SingleImageStudy out;
    detail::HeatmapCache cache;
    for (const auto& prompt : prompts) {
        const LabelSet labels = detail::checked_labels(voc, prompt);
        MetricRow row;
        row.prompt = prompt;
        std::vector<double> d, c2;
        for (const auto& img : images) {
            const Mask2D gt = project_gt_mask(v, labels, img.footprint);
            const auto& hm = cache.get(voc, img, prompt, cfg);
            SingleImageSample s{prompt, img.name, img.image.id, dice(threshold_heatmap(hm.scores), gt),
                                centroid_error_2d(hm.scores, gt, img.image.projection.intrinsics.pixel_pitch_mm)};
            d.push_back(s.dice);
            if (s.centroid2d_mm) c2.push_back(*s.centroid2d_mm);
            else ++row.n_undefined;
            ++row.n_samples;
            out.samples.push_back(std::move(s));
        }
        detail::fill_row(row, d, c2, {}, {}, {});
        out.rows.push_back(std::move(row));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Subset study

struct SubsetStudyParams {
    int n_min = 2;
    int n_max = 5;
    double dice_floor = 0.3;
    std::size_t draws_per_primary = 64; ///< random permutations tried per (primary, n)
    std::uint64_t seed = 0;
    double min_angle_deg = 30.0;
    ReconstructionParams reconstruction;
};

/// A view subset: the primary first, then the other members in ascending index order.
using ViewSubset = std::vector<std::size_t>;

struct SubsetSample {
    std::string prompt;
    ViewSubset views;
    double primary_dice = 0.0;
    std::optional<double> centroid3d_mm; ///< nullopt: empty reconstruction
    std::optional<double> bbox_precision;
    std::optional<double> bbox_recall;
};

struct SubsetStudy {
    std::vector<ViewSubset> subsets; ///< unique subsets realized by the sampler
    std::vector<SubsetSample> samples;
    std::vector<MetricRow> rows;
};

/// Fisher-Yates with the portable index sampler.
template <typename T>
void portable_shuffle(std::vector<T>& xs, std::mt19937_64& rng)
{
    for (std::size_t i = xs.size(); i > 1; --i) std::swap(xs[i - 1], xs[uniform_index(rng, i)]);
}

/// For every primary and every n in [n_min, n_max], draws random orders of the
/// other views and greedily keeps those at least min_angle_deg from every view
/// already kept; complete subsets of size n are collected without duplicates.
inline std::vector<ViewSubset> sample_view_subsets(const std::vector<StudyImage>& images, const SubsetStudyParams& params)
{
    if (params.n_min < 2 || params.n_max < params.n_min)
        throw Error(ErrorCode::invalid_parameter, "subset sizes must satisfy 2 <= n_min <= n_max");
    const std::size_t m = images.size();
    auto separated = [&](std::size_t a, std::size_t b) {
        return viewing_angle(images[a].image.projection.pose, images[b].image.projection.pose) >= params.min_angle_deg;
    };
    bool any_pair = false;
    for (std::size_t a = 0; a < m && !any_pair; ++a)
        for (std::size_t b = a + 1; b < m; ++b)
            if (separated(a, b)) {
                any_pair = true;
                break;
            }
    if (!any_pair) throw Error(ErrorCode::configuration, "subset study needs two views at least min_angle apart");

    std::set<ViewSubset> seen;
    std::vector<ViewSubset> out;
    for (std::size_t p = 0; p < m; ++p) {
        std::mt19937_64 rng(mix64(params.seed ^ mix64(p + 1)));
        for (int n = params.n_min; n <= params.n_max; ++n) {
            for (std::size_t d = 0; d < params.draws_per_primary; ++d) {
                std::vector<std::size_t> others;
                for (std::size_t o = 0; o < m; ++o)
                    if (o != p) others.push_back(o);
                portable_shuffle(others, rng);
                std::vector<std::size_t> kept{p};
                for (std::size_t o : others) {
                    if (static_cast<int>(kept.size()) == n) break;
                    if (std::all_of(kept.begin(), kept.end(), [&](std::size_t k) { return separated(k, o); })) kept.push_back(o);
                }
                if (static_cast<int>(kept.size()) != n) continue;
                std::sort(kept.begin() + 1, kept.end());
                if (seen.insert(kept).second) out.push_back(kept);
            }
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline SubsetStudy run_subset_study(const LabeledVolume& v, const PromptVocabulary& voc, const std::vector<StudyImage>& images,
                                    const std::vector<std::string>& prompts, const CorruptionConfig& cfg,
                                    const SubsetStudyParams& params = {})
{
    cfg.validate();
    SubsetStudy out;
    out.subsets = sample_view_subsets(images, params);
    detail::HeatmapCache cache;
    for (const auto& prompt : prompts) {
        const LabelSet labels = detail::checked_labels(voc, prompt);
        MetricRow row;
        row.prompt = prompt;
        std::vector<double> c3, prec, rec;
        std::map<std::size_t, std::optional<StructureExtent>> gt_by_primary;
        std::map<std::size_t, double> dice_by_primary;
        for (const auto& subset : out.subsets) {
            const std::size_t p = subset.front();
            const StudyImage& primary = images[p];
            if (!dice_by_primary.contains(p)) {
                const Mask2D gt_mask = project_gt_mask(v, labels, primary.footprint);
                dice_by_primary[p] = dice(threshold_heatmap(cache.get(voc, primary, prompt, cfg).scores), gt_mask);
            }
            const double pd = dice_by_primary[p];
            if (!(pd > params.dice_floor)) continue;
            if (!gt_by_primary.contains(p)) {
                try {
                    gt_by_primary[p] = detail::gt_in_view(v, labels, primary.image.projection);
                } catch (const Error& e) {
                    if (e.code() != ErrorCode::empty_structure) throw;
                    gt_by_primary[p] = std::nullopt;
                }
            }
            const auto& gt = gt_by_primary[p];
            SubsetSample s{prompt, subset, pd, std::nullopt, std::nullopt, std::nullopt};
            ViewSelection sel{primary.image.id, {}};
            std::vector<ViewHeatmap> views;
            for (std::size_t i = 0; i < subset.size(); ++i) {
                const StudyImage& img = images[subset[i]];
                if (i > 0) sel.secondary.push_back(img.image.id);
                views.push_back({std::cref(img.image.projection), std::cref(cache.get(voc, img, prompt, cfg))});
            }
            try {
                if (!gt) throw EmptyReconstructionError({});
                const ReconstructionResult r = reconstruct(sel, views, primary.image.carm.isocenter, params.reconstruction);
                s.centroid3d_mm = (r.centroid - gt->centroid).norm();
                const BoxPR pr = bbox_pr(r.bbox, gt->box);
                s.bbox_precision = pr.precision;
                s.bbox_recall = pr.recall;
            } catch (const EmptyReconstructionError&) {
            }
            ++row.n_samples;
            if (s.centroid3d_mm) c3.push_back(*s.centroid3d_mm);
            else ++row.n_undefined;
            if (s.bbox_precision) prec.push_back(*s.bbox_precision);
            if (s.bbox_recall) rec.push_back(*s.bbox_recall);
            out.samples.push_back(std::move(s));
        }
        detail::fill_row(row, {}, {}, c3, prec, rec);
        if (row.n_samples > 0) out.rows.push_back(std::move(row));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Corruption sweep

struct DegradationParams {
    std::vector<double> blur_levels{0.0, 1.0, 2.0, 3.0, 4.0};
    int seeds = 20;
    double dropout_prob = 0.05;
    int dilate_erode_px = 0;
    ReconstructionParams reconstruction;
};

struct DegradationLevel {
    double blur_sigma_px = 0.0;
    double mean_dice = 0.0;           ///< over seeds, prompts and images
    double mean_centroid3d_mm = 0.0;  ///< over defined samples
    std::size_t n_reconstructions = 0;
    std::size_t n_undefined = 0;
};

/// For each blur level and seed, segments every prompt on every image and
/// reconstructs it with images[0] as the primary and the rest as secondaries.
inline std::vector<DegradationLevel> run_degradation_sweep(const LabeledVolume& v, const PromptVocabulary& voc,
                                                           const std::vector<StudyImage>& images,
                                                           const std::vector<std::string>& prompts,
                                                           const DegradationParams& params = {})
{
    if (images.size() < 2) throw Error(ErrorCode::configuration, "degradation sweep needs at least two views");
    detail::HeatmapCache cache;
    const StudyImage& primary = images.front();
    std::map<std::string, StructureExtent> gt;
    std::map<std::string, std::vector<Mask2D>> gt_masks;
    for (const auto& prompt : prompts) {
        const LabelSet labels = detail::checked_labels(voc, prompt);
        gt.emplace(prompt, detail::gt_in_view(v, labels, primary.image.projection));
        for (const auto& img : images) gt_masks[prompt].push_back(project_gt_mask(v, labels, img.footprint));
    }
    // reconstructions depend only on which structure each view drew
    std::map<std::tuple<double, std::string, std::vector<std::string>>, std::optional<Vec3>> recon_cache;

    std::vector<DegradationLevel> out;
    for (double blur : params.blur_levels) {
        DegradationLevel level;
        level.blur_sigma_px = blur;
        double dice_sum = 0.0, c3_sum = 0.0;
        std::size_t dice_n = 0, c3_n = 0;
        for (int seed = 0; seed < params.seeds; ++seed) {
            CorruptionConfig cfg;
            cfg.blur_sigma_px = blur;
            cfg.dilate_erode_px = params.dilate_erode_px;
            cfg.dropout_prob = params.dropout_prob;
            cfg.seed = static_cast<std::uint64_t>(seed);
            cfg.validate();
            for (const auto& prompt : prompts) {
                std::vector<std::string> keys;
                ViewSelection sel{primary.image.id, {}};
                std::vector<ViewHeatmap> views;
                for (std::size_t i = 0; i < images.size(); ++i) {
                    const auto& hm = cache.get(voc, images[i], prompt, cfg);
                    dice_sum += dice(threshold_heatmap(hm.scores), gt_masks[prompt][i]);
                    ++dice_n;
                    keys.push_back(oracle_structure(voc, images[i].image.id, prompt, cfg));
                    if (i > 0) sel.secondary.push_back(images[i].image.id);
                    views.push_back({std::cref(images[i].image.projection), std::cref(hm)});
                }
                const auto rk = std::make_tuple(blur, normalize_prompt(prompt), keys);
                auto it = recon_cache.find(rk);
                if (it == recon_cache.end()) {
                    std::optional<Vec3> c;
                    try {
                        c = reconstruct(sel, views, primary.image.carm.isocenter, params.reconstruction).centroid;
                    } catch (const EmptyReconstructionError&) {
                    }
                    it = recon_cache.emplace(rk, c).first;
                }
                ++level.n_reconstructions;
                if (it->second) {
                    c3_sum += (*it->second - gt.at(prompt).centroid).norm();
                    ++c3_n;
                } else {
                    ++level.n_undefined;
                }
            }
        }
        level.mean_dice = dice_n ? dice_sum / static_cast<double>(dice_n) : 0.0;
        level.mean_centroid3d_mm = c3_n ? c3_sum / static_cast<double>(c3_n) : 0.0;
        out.push_back(level);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Output

inline std::string csv_field(const std::string& s)
{
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline std::string csv_number(const std::optional<double>& v) { return v ? format_double(*v) : std::string{}; }

inline void write_single_image_samples(const SingleImageStudy& s, std::ostream& os)
{
    os << "prompt,view,image_id,dice,centroid2d_mm\n";
    for (const auto& x : s.samples)
        os << csv_field(x.prompt) << ',' << csv_field(x.view) << ',' << x.image.value << ',' << format_double(x.dice) << ','
           << csv_number(x.centroid2d_mm) << '\n';
}

inline std::string subset_label(const ViewSubset& v)
{
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + std::to_string(v[i]);
    return out;
}

inline void write_subset_samples(const SubsetStudy& s, std::ostream& os)
{
    os << "prompt,views,n,primary_dice,centroid3d_mm,bbox_precision,bbox_recall\n";
    for (const auto& x : s.samples)
        os << csv_field(x.prompt) << ',' << subset_label(x.views) << ',' << x.views.size() << ',' << format_double(x.primary_dice)
           << ',' << csv_number(x.centroid3d_mm) << ',' << csv_number(x.bbox_precision) << ',' << csv_number(x.bbox_recall)
           << '\n';
}

/// Per-prompt summary; each metric as mean and sample sd columns, blank when
/// no defined sample exists.
inline void write_summary(const std::vector<MetricRow>& rows, std::ostream& os)
{
    os << "prompt,n_samples,n_undefined,dice_mean,dice_sd,centroid2d_mm_mean,centroid2d_mm_sd,centroid3d_mm_mean,"
          "centroid3d_mm_sd,bbox_precision_mean,bbox_precision_sd,bbox_recall_mean,bbox_recall_sd\n";
    auto ms = [](const std::optional<MeanSd>& m) {
        return m ? format_double(m->mean) + ',' + format_double(m->sd) : std::string(",");
    };
    for (const auto& r : rows)
        os << csv_field(r.prompt) << ',' << r.n_samples << ',' << r.n_undefined << ',' << ms(r.dice) << ','
           << ms(r.centroid2d_mm) << ',' << ms(r.centroid3d_mm) << ',' << ms(r.bbox_precision) << ',' << ms(r.bbox_recall)
           << '\n';
}

inline void write_degradation(const std::vector<DegradationLevel>& levels, std::ostream& os)
{
    os << "blur_sigma_px,mean_dice,mean_centroid3d_mm,n_reconstructions,n_undefined\n";
    for (const auto& l : levels)
        os << format_double(l.blur_sigma_px) << ',' << format_double(l.mean_dice) << ',' << format_double(l.mean_centroid3d_mm)
           << ',' << l.n_reconstructions << ',' << l.n_undefined << '\n';
}

} // namespace carmtwin
