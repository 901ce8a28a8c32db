#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nfaseg/error.hpp"
#include "nfaseg/nfa.hpp"
#include "nfaseg/rng.hpp"
#include "nfaseg/special.hpp"
#include "nfaseg/tensor.hpp"

namespace nfaseg {

/// One 8-connected blob: pixel indices in raster order plus bounding box.
struct Component {
    std::vector<long> pixels;
    long y0 = 0, x0 = 0, y1 = 0, x1 = 0;
};

struct DetectionSet {
    long h = 0, w = 0;
    double threshold = 0.0;
    std::vector<Component> components;
};

/// Positive iff score > threshold (strict).
inline TensorPtr binarize(const TensorPtr& scores, double threshold) {
    auto out = Tensor::create(scores->shape, 0.0, false);
    for (size_t i = 0; i < scores->data.size(); ++i)
        out->data[i] = scores->data[i] > threshold ? 1.0 : 0.0;
    return out;
}

/// 8-connectivity labeling by single-pass union-find; components are emitted
/// in raster order of their first pixel.
inline DetectionSet connected_components(const TensorPtr& binary,
                                         double threshold = 0.0) {
    const auto [n, c, h, w] = binary->shape;
    if (n != 1 || c != 1)
        throw_parameter("connected_components expects a (1,1,h,w) map");
    for (double v : binary->data)
        if (v != 0.0 && v != 1.0)
            throw_parameter("connected_components input must be binary");

    std::vector<long> parent(static_cast<size_t>(h) * w, -1);
    std::function<long(long)> find = [&](long i) {
        while (parent[i] != i) {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        return i;
    };
    auto unite = [&](long a, long b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);  // root = first pixel
    };

    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            const long i = y * w + x;
            if (binary->data[i] == 0.0) continue;
            parent[i] = i;
            // earlier raster neighbors: W, NW, N, NE
            if (x > 0 && parent[i - 1] >= 0) unite(i, i - 1);
            if (y > 0) {
                if (x > 0 && parent[i - w - 1] >= 0) unite(i, i - w - 1);
                if (parent[i - w] >= 0) unite(i, i - w);
                if (x + 1 < w && parent[i - w + 1] >= 0) unite(i, i - w + 1);
            }
        }

    DetectionSet out;
    out.h = h;
    out.w = w;
    out.threshold = threshold;
    std::vector<long> label(parent.size(), -1);
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            const long i = y * w + x;
            if (parent[i] < 0) continue;
            const long root = find(i);
            if (label[root] < 0) {
                label[root] = static_cast<long>(out.components.size());
                out.components.emplace_back();
                auto& comp = out.components.back();
                comp.y0 = comp.y1 = y;
                comp.x0 = comp.x1 = x;
            }
            auto& comp = out.components[label[root]];
            comp.pixels.push_back(i);
            comp.y0 = std::min(comp.y0, y);
            comp.y1 = std::max(comp.y1, y);
            comp.x0 = std::min(comp.x0, x);
            comp.x1 = std::max(comp.x1, x);
        }
    return out;
}

/// IoU of two components given as sorted pixel-index lists.
inline double component_iou(const Component& a, const Component& b) {
    size_t i = 0, j = 0, inter = 0;
    while (i < a.pixels.size() && j < b.pixels.size()) {
        if (a.pixels[i] == b.pixels[j]) {
            ++inter;
            ++i;
            ++j;
        } else if (a.pixels[i] < b.pixels[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    const size_t uni = a.pixels.size() + b.pixels.size() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct MatchResult {
    std::vector<std::pair<long, long>> matches;  // (pred index, gt index), IoU >= min
    std::vector<long> unmatched_pred;
    std::vector<long> unmatched_gt;
};

/// Greedy one-to-one matching in descending IoU. Ties are broken by the
/// components' first pixels, symmetrically in pred and gt, so swapping the
/// two sets transposes the matching exactly.
inline MatchResult match_objects(const DetectionSet& pred, const DetectionSet& gt,
                                 double iou_min = 0.05) {
    if (pred.h != gt.h || pred.w != gt.w)
        throw_parameter("match_objects: detection sets come from different dims");
    struct Cand {
        double iou;
        long key_lo, key_hi;  // first pixels of the two components, sorted
        long pi, gi;
    };
    std::vector<Cand> cands;
    for (long pi = 0; pi < static_cast<long>(pred.components.size()); ++pi)
        for (long gi = 0; gi < static_cast<long>(gt.components.size()); ++gi) {
            // bbox prefilter: disjoint boxes cannot overlap
            const auto& a = pred.components[pi];
            const auto& b = gt.components[gi];
            if (a.x1 < b.x0 || b.x1 < a.x0 || a.y1 < b.y0 || b.y1 < a.y0) continue;
            const double iou = component_iou(a, b);
            if (iou >= iou_min)
                cands.push_back({iou, std::min(a.pixels[0], b.pixels[0]),
                                 std::max(a.pixels[0], b.pixels[0]), pi, gi});
        }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.iou != b.iou) return a.iou > b.iou;
        if (a.key_lo != b.key_lo) return a.key_lo < b.key_lo;
        return a.key_hi < b.key_hi;
    });

    MatchResult out;
    std::vector<bool> pred_used(pred.components.size(), false);
    std::vector<bool> gt_used(gt.components.size(), false);
    for (const auto& cand : cands) {
        if (pred_used[cand.pi] || gt_used[cand.gi]) continue;
        pred_used[cand.pi] = true;
        gt_used[cand.gi] = true;
        out.matches.push_back({cand.pi, cand.gi});
    }
    for (long pi = 0; pi < static_cast<long>(pred.components.size()); ++pi)
        if (!pred_used[pi]) out.unmatched_pred.push_back(pi);
    for (long gi = 0; gi < static_cast<long>(gt.components.size()); ++gi)
        if (!gt_used[gi]) out.unmatched_gt.push_back(gi);
    return out;
}

struct ObjectMetrics {
    double precision = 1.0;  // 1 when there are no predictions
    double recall = 1.0;     // 1 when there is no ground truth
    double f1 = 0.0;
    double fa_per_image = 0.0;
    long tp = 0, fp = 0, fn = 0;
    long images = 0;
};

inline double f1_of(double precision, double recall) {
    return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall)
                                    : 0.0;
}

/// Micro-averaged object metrics over per-image score/mask pairs.
inline ObjectMetrics object_metrics(const std::vector<TensorPtr>& scores,
                                    const std::vector<TensorPtr>& gt_masks,
                                    double threshold, double iou_min = 0.05) {
    if (scores.empty() || scores.size() != gt_masks.size())
        throw_parameter("object_metrics needs matching non-empty score and mask lists");
    ObjectMetrics m;
    m.images = static_cast<long>(scores.size());
    for (size_t i = 0; i < scores.size(); ++i) {
        const auto pred = connected_components(binarize(scores[i], threshold), threshold);
        const auto gt = connected_components(gt_masks[i]);
        const auto match = match_objects(pred, gt, iou_min);
        m.tp += static_cast<long>(match.matches.size());
        m.fp += static_cast<long>(match.unmatched_pred.size());
        m.fn += static_cast<long>(match.unmatched_gt.size());
    }
    m.precision = m.tp + m.fp > 0 ? static_cast<double>(m.tp) / (m.tp + m.fp) : 1.0;
    m.recall = m.tp + m.fn > 0 ? static_cast<double>(m.tp) / (m.tp + m.fn) : 1.0;
    m.f1 = f1_of(m.precision, m.recall);
    m.fa_per_image = static_cast<double>(m.fp) / static_cast<double>(m.images);
    return m;
}

struct PrPoint {
    double threshold = 0.0;
    double precision = 1.0;
    double recall = 1.0;
};

/// 51 thresholds at the evenly spaced quantiles of the pooled scores (plus
/// the endpoints), so any strictly increasing rescoring leaves the swept
/// binarizations, and hence the AP, unchanged.
inline std::vector<double> quantile_thresholds(const std::vector<TensorPtr>& scores,
                                               long count = 51) {
    if (count < 2) throw_parameter("threshold sweep needs at least 2 thresholds");
    std::vector<double> pool;
    for (const auto& s : scores) pool.insert(pool.end(), s->data.begin(), s->data.end());
    std::sort(pool.begin(), pool.end());
    std::vector<double> out;
    out.reserve(count);
    for (long i = 0; i < count - 1; ++i) {
        const double q = static_cast<double>(i) / static_cast<double>(count - 1);
        const size_t at = std::min(pool.size() - 1,
                                   static_cast<size_t>(q * (pool.size() - 1)));
        out.push_back(pool[at]);
    }
    out.push_back(1.0);  // scores are < 1, so this anchors recall 0
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

inline std::vector<PrPoint> object_pr_curve(const std::vector<TensorPtr>& scores,
                                            const std::vector<TensorPtr>& gt_masks,
                                            const std::vector<double>& thresholds,
                                            double iou_min = 0.05) {
    if (thresholds.size() < 2)
        throw_parameter("object_pr_curve needs a grid of >= 2 thresholds");
    std::vector<PrPoint> out;
    for (double t : thresholds) {
        const auto m = object_metrics(scores, gt_masks, t, iou_min);
        out.push_back({t, m.precision, m.recall});
    }
    return out;
}

/// Area under the PR curve with the monotone precision envelope: each
/// precision is replaced by the maximum precision at any recall >= its own.
inline double ap_from_curve(std::vector<PrPoint> points) {
    if (points.empty()) return 0.0;
    std::sort(points.begin(), points.end(),
              [](const PrPoint& a, const PrPoint& b) { return a.recall < b.recall; });
    for (long i = static_cast<long>(points.size()) - 2; i >= 0; --i)
        points[i].precision = std::max(points[i].precision, points[i + 1].precision);
    double ap = 0.0;
    double prev_recall = 0.0;
    for (const auto& p : points) {
        ap += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    return ap;
}

inline double object_average_precision(const std::vector<TensorPtr>& scores,
                                       const std::vector<TensorPtr>& gt_masks,
                                       double iou_min = 0.05) {
    return ap_from_curve(
        object_pr_curve(scores, gt_masks, quantile_thresholds(scores), iou_min));
}

/// Mean number of predicted components per ground-truth object; > 1 means
/// objects shatter into several detections.
inline double fragmentation(const std::vector<TensorPtr>& scores,
                            const std::vector<TensorPtr>& gt_masks, double threshold) {
    if (scores.empty() || scores.size() != gt_masks.size())
        throw_parameter("fragmentation needs matching non-empty score and mask lists");
    double total_pred = 0.0, total_gt = 0.0;
    for (size_t i = 0; i < scores.size(); ++i) {
        total_pred += static_cast<double>(
            connected_components(binarize(scores[i], threshold)).components.size());
        total_gt +=
            static_cast<double>(connected_components(gt_masks[i]).components.size());
    }
    return total_pred / std::max(1.0, total_gt);
}

struct PixelMetrics {
    double precision = 1.0;
    double recall = 1.0;
    double f1 = 0.0;
    double ap = 0.0;
    long tolerance_px = 2;
};

namespace detail {

/// Chebyshev dilation of a binary mask by `radius`.
inline std::vector<char> dilate(const TensorPtr& mask, long radius) {
    const auto [n, c, h, w] = mask->shape;
    std::vector<char> out(static_cast<size_t>(h) * w, 0);
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            if (mask->data[y * w + x] == 0.0) continue;
            for (long dy = -radius; dy <= radius; ++dy)
                for (long dx = -radius; dx <= radius; ++dx) {
                    const long yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < h && xx >= 0 && xx < w) out[yy * w + xx] = 1;
                }
        }
    return out;
}

struct PixelCounts {
    long tp = 0, fp = 0, fn = 0;
};

inline PixelCounts pixel_counts(const TensorPtr& scores, const TensorPtr& gt,
                                double threshold, long tol_px) {
    if (!(scores->shape == gt->shape))
        throw_parameter("pixel metrics: score and mask dims differ");
    const auto ring_mask = dilate(gt, tol_px);
    PixelCounts counts;
    for (size_t i = 0; i < scores->data.size(); ++i) {
        const bool pred = scores->data[i] > threshold;
        const bool positive = gt->data[i] != 0.0;
        const bool in_ring = !positive && ring_mask[i] != 0;
        if (positive) {
            if (pred)
                ++counts.tp;
            else
                ++counts.fn;
        } else if (pred && !in_ring) {
            ++counts.fp;  // ring predictions are ignored entirely
        }
    }
    return counts;
}

}  // namespace detail

/// Pixel-level metrics with a Chebyshev tolerance ring around the ground
/// truth; predictions inside the ring count neither for nor against.
inline PixelMetrics pixel_metrics(const std::vector<TensorPtr>& scores,
                                  const std::vector<TensorPtr>& gt_masks,
                                  double threshold, long tol_px = 2) {
    if (scores.empty() || scores.size() != gt_masks.size())
        throw_parameter("pixel_metrics needs matching non-empty score and mask lists");
    if (tol_px < 0) throw_parameter("pixel tolerance must be >= 0");

    auto aggregate = [&](double t) {
        detail::PixelCounts total;
        for (size_t i = 0; i < scores.size(); ++i) {
            const auto counts = detail::pixel_counts(scores[i], gt_masks[i], t, tol_px);
            total.tp += counts.tp;
            total.fp += counts.fp;
            total.fn += counts.fn;
        }
        return total;
    };

    PixelMetrics m;
    m.tolerance_px = tol_px;
    const auto counts = aggregate(threshold);
    m.precision =
        counts.tp + counts.fp > 0 ? static_cast<double>(counts.tp) / (counts.tp + counts.fp)
                                  : 1.0;
    m.recall =
        counts.tp + counts.fn > 0 ? static_cast<double>(counts.tp) / (counts.tp + counts.fn)
                                  : 1.0;
    m.f1 = f1_of(m.precision, m.recall);

    std::vector<PrPoint> curve;
    for (double t : quantile_thresholds(scores)) {
        const auto sweep = aggregate(t);
        curve.push_back(
            {t,
             sweep.tp + sweep.fp > 0
                 ? static_cast<double>(sweep.tp) / (sweep.tp + sweep.fp)
                 : 1.0,
             sweep.tp + sweep.fn > 0
                 ? static_cast<double>(sweep.tp) / (sweep.tp + sweep.fn)
                 : 1.0});
    }
    m.ap = ap_from_curve(std::move(curve));
    return m;
}

struct CalibrationBin {
    double lo = 0.0, hi = 0.0;
    long positives = 0;  // pixels in the bin whose ground truth is foreground
    long negatives = 0;
    double frequency = 0.0;  // positives / (positives + negatives), 0 if empty
};

struct CalibrationReport {
    std::vector<CalibrationBin> bins;
    double extreme_fraction = 0.0;  // mass of scores in [0, 0.1) or [0.9, 1)
    long occupied_positive_bins = 0;  // bins holding at least one positive pixel
};

/// Reliability histogram over score deciles (or `bins` equal bins).
inline CalibrationReport calibration_report(const std::vector<TensorPtr>& scores,
                                            const std::vector<TensorPtr>& gt_masks,
                                            long bins = 10) {
    if (bins < 2) throw_parameter("calibration_report needs >= 2 bins");
    if (scores.empty() || scores.size() != gt_masks.size())
        throw_parameter("calibration_report needs matching non-empty lists");
    CalibrationReport report;
    report.bins.resize(bins);
    for (long b = 0; b < bins; ++b) {
        report.bins[b].lo = static_cast<double>(b) / bins;
        report.bins[b].hi = static_cast<double>(b + 1) / bins;
    }
    long total = 0, extreme = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (!(scores[i]->shape == gt_masks[i]->shape))
            throw_parameter("calibration_report: score and mask dims differ");
        for (size_t p = 0; p < scores[i]->data.size(); ++p) {
            const double s = scores[i]->data[p];
            // sigmoids saturate to exactly 1.0 in doubles; fold that into the
            // top bin rather than rejecting it
            if (s < 0.0 || s > 1.0)
                throw_parameter("calibration_report expects scores in [0,1]");
            long b = static_cast<long>(s * bins);
            b = std::min(b, bins - 1);
            if (gt_masks[i]->data[p] != 0.0)
                ++report.bins[b].positives;
            else
                ++report.bins[b].negatives;
            ++total;
            if (s < 0.1 || s >= 0.9) ++extreme;
        }
    }
    for (auto& b : report.bins) {
        const long n = b.positives + b.negatives;
        b.frequency = n > 0 ? static_cast<double>(b.positives) / n : 0.0;
        if (b.positives > 0) ++report.occupied_positive_bins;
    }
    report.extreme_fraction =
        total > 0 ? static_cast<double>(extreme) / static_cast<double>(total) : 0.0;
    return report;
}

/// Rescores stored significance maps with a different activation slope,
/// without retraining. Rankings are preserved (sigm is monotone).
inline std::vector<TensorPtr> recalibrated_scores(
    const std::vector<SignificanceMap>& fused, double alpha) {
    std::vector<TensorPtr> out;
    for (const auto& map : fused)
        out.push_back(sigm_alpha(map.values, ActivationConfig{alpha, map.n_test}));
    return out;
}

struct EpsilonRow {
    double epsilon = 0.0;
    double mean_count = 0.0;
    double std_error = 0.0;
};

/// Monte Carlo validation of the false-alarm guarantee: under H0 noise with
/// the true (or re-estimated) naive model, pixels with NFA <= epsilon must
/// average at most epsilon per trial.
inline std::vector<EpsilonRow> epsilon_meaningfulness_check(
    long k, long h, long w, const std::vector<double>& epsilons, long trials,
    unsigned long long seed, bool estimate_model = false) {
    if (trials < 100) throw_parameter("epsilon check needs trials >= 100");
    if (k < 1 || h < 1 || w < 1) throw_parameter("epsilon check: bad map dims");
    const double n_test = static_cast<double>(h) * static_cast<double>(w);
    std::vector<double> center(static_cast<size_t>(k), 0.0);
    const NaiveModel truth = NaiveModel::spherical(center, 1.0, n_test);

    std::vector<std::vector<long>> counts(epsilons.size());
    Rng rng(seed);
    for (long t = 0; t < trials; ++t) {
        auto noise = Tensor::create(Shape{1, k, h, w}, 0.0, false);
        for (auto& v : noise->data) v = rng.normal();
        const NaiveModel model =
            estimate_model ? estimate_naive_model(noise, CovarianceForm::Spherical)
                           : truth;
        const auto sig = significance(noise, model);
        for (size_t e = 0; e < epsilons.size(); ++e) {
            const double s_min = -std::log(epsilons[e]);  // NFA <= eps iff S >= -ln eps
            long count = 0;
            for (double s : sig.values->data)
                if (s >= s_min) ++count;
            counts[e].push_back(count);
        }
    }

    std::vector<EpsilonRow> rows;
    for (size_t e = 0; e < epsilons.size(); ++e) {
        double mean = 0.0;
        for (long v : counts[e]) mean += static_cast<double>(v);
        mean /= static_cast<double>(trials);
        double var = 0.0;
        for (long v : counts[e]) var += (v - mean) * (v - mean);
        var /= static_cast<double>(trials - 1);
        rows.push_back(
            {epsilons[e], mean, std::sqrt(var / static_cast<double>(trials))});
    }
    return rows;
}

struct CurveRow {
    double x = 0.0;
    double nfa_log10 = 0.0;
    double significance = 0.0;
};

/// NFA and significance of a centered unit-variance Gaussian sample x, for
/// plotting: u = x^2/2, NFA = N_test * Q(K/2, u), S = -ln NFA.
inline std::vector<CurveRow> significance_curve(double x_min, double x_max, long steps,
                                                long k, double n_test) {
    if (k < 1) throw_parameter("significance curve needs K >= 1");
    if (steps < 2) throw_parameter("significance curve needs >= 2 steps");
    if (n_test < 1.0) throw_parameter("significance curve needs N_test >= 1");
    const double a = static_cast<double>(k) / 2.0;
    const double log_gamma_a = special::log_gamma(a);
    std::vector<CurveRow> rows;
    for (long i = 0; i < steps; ++i) {
        const double x = x_min + (x_max - x_min) * static_cast<double>(i) /
                                     static_cast<double>(steps - 1);
        const double u = 0.5 * x * x;
        const double log_q = special::log_upper_incomplete_gamma(a, u) - log_gamma_a;
        const double log_nfa = std::log(n_test) + log_q;
        // + 0.0 canonicalizes the -0.0 that -log(1) would otherwise print
        rows.push_back({x, log_nfa / std::log(10.0) + 0.0, -log_nfa + 0.0});
    }
    return rows;
}

inline void write_curve_csv(const std::string& path, const std::vector<CurveRow>& rows) {
    std::ofstream out(path);
    if (!out) throw_io("cannot open curve CSV for writing: " + path);
    out << "x,nfa_log10,significance\n";
    out.precision(17);
    for (const auto& r : rows)
        out << r.x << "," << r.nfa_log10 << "," << r.significance << "\n";
    if (!out) throw_io("failed writing curve CSV: " + path);
}

struct MetricsReport {
    ObjectMetrics object;
    double object_ap = 0.0;
    PixelMetrics pixel;
    CalibrationReport calibration;
    double threshold = 0.1;
};

inline MetricsReport evaluate_dataset(const std::vector<TensorPtr>& scores,
                                      const std::vector<TensorPtr>& gt_masks,
                                      double threshold, double iou_min = 0.05,
                                      long tol_px = 2) {
    MetricsReport report;
    report.threshold = threshold;
    report.object = object_metrics(scores, gt_masks, threshold, iou_min);
    report.object_ap = object_average_precision(scores, gt_masks, iou_min);
    report.pixel = pixel_metrics(scores, gt_masks, threshold, tol_px);
    report.calibration = calibration_report(scores, gt_masks);
    return report;
}

inline nlohmann::json report_to_json(const MetricsReport& r) {
    nlohmann::json doc;
    doc["threshold"] = r.threshold;
    doc["object"] = {{"precision", r.object.precision}, {"recall", r.object.recall},
                     {"f1", r.object.f1},               {"ap", r.object_ap},
                     {"fa_per_image", r.object.fa_per_image},
                     {"tp", r.object.tp},               {"fp", r.object.fp},
                     {"fn", r.object.fn}};
    doc["pixel"] = {{"precision", r.pixel.precision},
                    {"recall", r.pixel.recall},
                    {"f1", r.pixel.f1},
                    {"ap", r.pixel.ap},
                    {"tolerance_px", r.pixel.tolerance_px}};
    doc["calibration"] = nlohmann::json::array();
    for (const auto& b : r.calibration.bins)
        doc["calibration"].push_back({{"lo", b.lo},
                                      {"hi", b.hi},
                                      {"positives", b.positives},
                                      {"negatives", b.negatives},
                                      {"frequency", b.frequency}});
    doc["extreme_fraction"] = r.calibration.extreme_fraction;
    return doc;
}

}  // namespace nfaseg
