#pragma once

// COCO-style detection metrics: AP averaged over IoU thresholds 0.50:0.05:0.95
// with 101-point interpolation, AP50/AP75, and size-bucketed AP over ground
// truth pixel area. Pure double arithmetic, no autodiff.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "gptr/errors.hpp"

namespace gptr {

struct Detection {
    std::array<double, 4> box{};  // cx, cy, w, h, normalized
    int category = 0;
    double score = 0.0;
};

struct TruthBox {
    std::array<double, 4> box{};  // cx, cy, w, h, normalized
    int category = 0;
};

/// Plain IoU of two (cx, cy, w, h) boxes; degenerate boxes overlap nothing.
inline double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
    if (!(a[2] > 0.0) || !(a[3] > 0.0) || !(b[2] > 0.0) || !(b[3] > 0.0)) return 0.0;
    const double ax0 = a[0] - a[2] / 2, ax1 = a[0] + a[2] / 2;
    const double ay0 = a[1] - a[3] / 2, ay1 = a[1] + a[3] / 2;
    const double bx0 = b[0] - b[2] / 2, bx1 = b[0] + b[2] / 2;
    const double by0 = b[1] - b[3] / 2, by1 = b[1] + b[3] / 2;
    const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
    const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
    const double inter = iw * ih;
    const double area_a = a[2] * a[3];
    const double area_b = b[2] * b[3];
    return inter / (area_a + area_b - inter);
}

enum class DetOutcome : unsigned char { fp = 0, tp = 1, ignored = 2 };

/// Greedy matching for one image and one category. Detections must arrive
/// score-descending; each takes the highest-IoU still-unmatched ground truth
/// with IoU >= threshold (lowest index on ties). Real ground truth is
/// preferred; a detection whose only qualifying match is an ignored ground
/// truth (size-bucket filtering) is neither TP nor FP.
inline std::vector<DetOutcome> match_detections(const std::vector<Detection>& dets,
                                                const std::vector<TruthBox>& gts,
                                                double iou_threshold,
                                                const std::vector<char>& gt_ignore = {}) {
    if (!(iou_threshold > 0.0) || !(iou_threshold <= 1.0))
        throw std::invalid_argument("match_detections: IoU threshold " +
                                    std::to_string(iou_threshold) + " outside (0, 1]");
    if (!gt_ignore.empty() && gt_ignore.size() != gts.size())
        throw std::invalid_argument("match_detections: ignore mask covers " +
                                    std::to_string(gt_ignore.size()) + " of " +
                                    std::to_string(gts.size()) + " ground truths");
    for (std::size_t i = 1; i < dets.size(); ++i)
        if (dets[i].score > dets[i - 1].score)
            throw std::invalid_argument("match_detections: detections not score-descending at " +
                                        std::to_string(i));
    constexpr std::size_t npos = static_cast<std::size_t>(-1);
    std::vector<char> used(gts.size(), 0);
    std::vector<DetOutcome> out(dets.size(), DetOutcome::fp);
    for (std::size_t d = 0; d < dets.size(); ++d) {
        std::size_t best_real = npos, best_ign = npos;
        double real_iou = 0.0, ign_iou = 0.0;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (used[g]) continue;
            const double iou = box_iou(dets[d].box, gts[g].box);
            if (iou < iou_threshold) continue;
            const bool ign = !gt_ignore.empty() && gt_ignore[g];
            if (ign ? iou > ign_iou : iou > real_iou) {
                (ign ? best_ign : best_real) = g;
                (ign ? ign_iou : real_iou) = iou;
            }
        }
        if (best_real != npos) {
            used[best_real] = 1;
            out[d] = DetOutcome::tp;
        } else if (best_ign != npos) {
            used[best_ign] = 1;
            out[d] = DetOutcome::ignored;
        }
    }
    return out;
}

/// 101-point interpolated average precision. Flags must be in global
/// score-descending order across images; precision is made monotone
/// non-increasing before sampling the recall grid 0, 0.01, ..., 1.
inline double average_precision(const std::vector<char>& tp_flags, std::size_t total_gt) {
    if (total_gt == 0) return 0.0;
    const std::size_t n = tp_flags.size();
    std::vector<double> recall(n), precision(n);
    std::size_t tp = 0;
    for (std::size_t i = 0; i < n; ++i) {
        tp += tp_flags[i] ? 1 : 0;
        recall[i] = static_cast<double>(tp) / static_cast<double>(total_gt);
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    }
    for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double sum = 0.0;
    std::size_t idx = 0;
    for (int k = 0; k <= 100; ++k) {
        const double r = static_cast<double>(k) / 100.0;
        while (idx < n && recall[idx] < r) ++idx;
        if (idx == n) break;
        sum += precision[idx];
    }
    return sum / 101.0;
}

struct EvalReport {
    double ap = 0.0;
    double ap50 = 0.0;
    double ap75 = 0.0;
    double ap_s = 0.0;
    double ap_m = 0.0;
    double ap_l = 0.0;
    std::map<int, double> per_category;
    std::size_t images = 0;
    std::size_t gt_boxes = 0;
    std::size_t detections = 0;
};

namespace detail {

// size buckets over ground-truth pixel area: small < 32^2 <= medium < 96^2 <= large
inline int area_bucket(const std::array<double, 4>& box, double side) {
    const double area = box[2] * side * (box[3] * side);
    if (area < 1024.0) return 1;
    if (area < 9216.0) return 2;
    return 3;
}

} // namespace detail

/// Evaluates detections against ground truth over parallel per-image lists.
/// AP means the 10-threshold, all-category average; headline metrics average
/// only categories with ground truth present (per_category additionally
/// reports 0 for hallucinated categories). Size-bucket metrics restrict
/// ground truth to one area bucket and neither credit nor penalize
/// detections that match a ground truth outside it; a bucket nobody
/// populates reports 0. Detections are re-sorted internally, so input order
/// never matters; at most 100 per image are kept.
inline EvalReport evaluate(const std::vector<std::vector<Detection>>& dets_per_image,
                           const std::vector<std::vector<TruthBox>>& gts_per_image,
                           double image_side = 224.0) {
    if (dets_per_image.size() != gts_per_image.size())
        throw std::invalid_argument("evaluate: " + std::to_string(dets_per_image.size()) +
                                    " detection lists vs " +
                                    std::to_string(gts_per_image.size()) + " ground-truth lists");
    if (gts_per_image.empty()) throw DataError("evaluate: empty test set");
    if (!(image_side > 0.0))
        throw std::invalid_argument("evaluate: image side must be positive");

    const std::size_t n_images = gts_per_image.size();
    EvalReport report;
    report.images = n_images;
    for (const auto& g : gts_per_image) report.gt_boxes += g.size();
    for (const auto& d : dets_per_image) report.detections += d.size();

    // canonical per-image order: score descending, ties broken by value so
    // the result cannot depend on input order
    auto det_before = [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.category != b.category) return a.category < b.category;
        return a.box < b.box;
    };
    std::vector<std::vector<Detection>> dets(n_images);
    for (std::size_t i = 0; i < n_images; ++i) {
        for (const auto& d : dets_per_image[i]) {
            if (!std::isfinite(d.score))
                throw std::invalid_argument("evaluate: non-finite detection score");
            dets[i].push_back(d);
        }
        std::sort(dets[i].begin(), dets[i].end(), det_before);
        if (dets[i].size() > 100) dets[i].resize(100);
    }

    std::set<int> categories;
    for (const auto& g : gts_per_image)
        for (const auto& t : g) categories.insert(t.category);
    for (const auto& d : dets)
        for (const auto& t : d) categories.insert(t.category);

    std::array<double, 10> thresholds{};
    for (int k = 0; k < 10; ++k) thresholds[k] = static_cast<double>(10 + k) / 20.0;

    // AP for one category at one threshold, optionally restricted to a bucket
    auto ap_one = [&](int cat, double thr, int bucket, std::size_t& gt_count) {
        gt_count = 0;
        struct Entry {
            double score;
            std::size_t image, rank;
            char tp;
        };
        std::vector<Entry> entries;
        for (std::size_t i = 0; i < n_images; ++i) {
            std::vector<Detection> dc;
            for (const auto& d : dets[i])
                if (d.category == cat) dc.push_back(d);
            std::vector<TruthBox> gc;
            for (const auto& g : gts_per_image[i])
                if (g.category == cat) gc.push_back(g);
            std::vector<char> ignore(gc.size(), 0);
            if (bucket != 0)
                for (std::size_t g = 0; g < gc.size(); ++g)
                    ignore[g] = detail::area_bucket(gc[g].box, image_side) != bucket;
            for (std::size_t g = 0; g < gc.size(); ++g)
                if (!ignore[g]) ++gt_count;
            auto outcomes = match_detections(dc, gc, thr, ignore);
            for (std::size_t d = 0; d < dc.size(); ++d) {
                if (outcomes[d] == DetOutcome::ignored) continue;
                entries.push_back({dc[d].score, i, d, outcomes[d] == DetOutcome::tp});
            }
        }
        std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.image != b.image) return a.image < b.image;
            return a.rank < b.rank;
        });
        std::vector<char> flags;
        flags.reserve(entries.size());
        for (const auto& e : entries) flags.push_back(e.tp);
        return average_precision(flags, gt_count);
    };

    std::vector<double> head_ap, head_50, head_75;
    std::array<std::vector<double>, 4> bucket_ap;  // index 1..3 used
    for (int cat : categories) {
        std::array<double, 10> ap_t{};
        std::size_t gt_count = 0;
        for (int k = 0; k < 10; ++k) ap_t[k] = ap_one(cat, thresholds[k], 0, gt_count);
        double mean = 0.0;
        for (double v : ap_t) mean += v;
        mean /= 10.0;
        report.per_category[cat] = mean;
        if (gt_count == 0) continue;  // hallucinated category: reported above, not averaged
        head_ap.push_back(mean);
        head_50.push_back(ap_t[0]);
        head_75.push_back(ap_t[5]);
        for (int bucket = 1; bucket <= 3; ++bucket) {
            double bmean = 0.0;
            std::size_t bucket_gt = 0;
            for (int k = 0; k < 10; ++k) bmean += ap_one(cat, thresholds[k], bucket, bucket_gt);
            if (bucket_gt > 0) bucket_ap[static_cast<std::size_t>(bucket)].push_back(bmean / 10.0);
        }
    }
    auto mean_of = [](const std::vector<double>& v) {
        if (v.empty()) return 0.0;
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    report.ap = mean_of(head_ap);
    report.ap50 = mean_of(head_50);
    report.ap75 = mean_of(head_75);
    report.ap_s = mean_of(bucket_ap[1]);
    report.ap_m = mean_of(bucket_ap[2]);
    report.ap_l = mean_of(bucket_ap[3]);
    return report;
}

} // namespace gptr
