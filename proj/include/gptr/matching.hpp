#pragma once

// Bipartite matching between predictions and ground truth, and the focal /
// L1 / generalized-IoU training loss.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gptr/errors.hpp"
#include "gptr/tensor.hpp"

namespace gptr {

// ---------------------------------------------------------------------------
// Generalized IoU
// ---------------------------------------------------------------------------

namespace detail {

inline void require_positive_boxes(const double* data, std::size_t n, const char* who) {
    for (std::size_t i = 0; i < n; ++i) {
        const double w = data[i * 4 + 2], h = data[i * 4 + 3];
        if (!(w > 0.0) || !(h > 0.0))
            throw std::invalid_argument(std::string(who) + ": degenerate box " +
                                        std::to_string(i) + " (w=" + std::to_string(w) +
                                        ", h=" + std::to_string(h) + ")");
    }
}

} // namespace detail

/// Generalized IoU of two (cx, cy, w, h) boxes:
/// IoU - (hull - union)/hull, in (-1, 1]. Plain-number version for cost
/// matrices and evaluation.
inline double giou_scalar(const std::array<double, 4>& a, const std::array<double, 4>& b) {
    detail::require_positive_boxes(a.data(), 1, "giou");
    detail::require_positive_boxes(b.data(), 1, "giou");
    const double ax0 = a[0] - a[2] / 2, ax1 = a[0] + a[2] / 2;
    const double ay0 = a[1] - a[3] / 2, ay1 = a[1] + a[3] / 2;
    const double bx0 = b[0] - b[2] / 2, bx1 = b[0] + b[2] / 2;
    const double by0 = b[1] - b[3] / 2, by1 = b[1] + b[3] / 2;
    const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
    const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
    const double inter = iw * ih;
    // keep the areas as separate locals: folding a product into the sum lets
    // the compiler contract it to an FMA, which breaks exact symmetry
    const double area_a = a[2] * a[3];
    const double area_b = b[2] * b[3];
    const double uni = area_a + area_b - inter;
    const double hull = (std::max(ax1, bx1) - std::min(ax0, bx0)) *
                        (std::max(ay1, by1) - std::min(ay0, by0));
    return inter / uni - (hull - uni) / hull;
}

/// Row-wise generalized IoU of two N x 4 (cx, cy, w, h) tensors,
/// differentiable through both arguments. Same arithmetic as giou_scalar.
inline Tensor giou_rows(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "giou_rows");
    detail::require_2d(b, "giou_rows");
    if (a.cols() != 4 || b.cols() != 4 || a.rows() != b.rows())
        throw std::invalid_argument("giou_rows: expected matching N x 4 boxes, got " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    detail::require_positive_boxes(a.data().data(), a.rows(), "giou_rows");
    detail::require_positive_boxes(b.data().data(), b.rows(), "giou_rows");
    auto corners = [](const Tensor& t) {
        Tensor cx = slice_cols(t, 0, 1), cy = slice_cols(t, 1, 2);
        Tensor hw = mul_scalar(slice_cols(t, 2, 3), 0.5);
        Tensor hh = mul_scalar(slice_cols(t, 3, 4), 0.5);
        return std::array<Tensor, 4>{sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)};
    };
    const auto ca = corners(a), cb = corners(b);
    Tensor iw = clamp_min(sub(elem_min(ca[2], cb[2]), elem_max(ca[0], cb[0])), 0.0);
    Tensor ih = clamp_min(sub(elem_min(ca[3], cb[3]), elem_max(ca[1], cb[1])), 0.0);
    Tensor inter = mul(iw, ih);
    Tensor area_a = mul(slice_cols(a, 2, 3), slice_cols(a, 3, 4));
    Tensor area_b = mul(slice_cols(b, 2, 3), slice_cols(b, 3, 4));
    Tensor uni = sub(add(area_a, area_b), inter);
    Tensor hull = mul(sub(elem_max(ca[2], cb[2]), elem_min(ca[0], cb[0])),
                      sub(elem_max(ca[3], cb[3]), elem_min(ca[1], cb[1])));
    Tensor out = sub(div(inter, uni), div(sub(hull, uni), hull));
    return reshape(out, {a.rows()});
}

// ---------------------------------------------------------------------------
// Focal loss
// ---------------------------------------------------------------------------

/// Summed focal loss over a probability tensor against 0/1 targets:
///   y=1: -alpha   * (1-p)^gamma * ln p
///   y=0: -(1-alpha) * p^gamma   * ln(1-p)
/// Probabilities are clamped to [1e-7, 1-1e-7] before the logs.
inline Tensor focal_loss(const Tensor& p, const Tensor& targets, double alpha = 0.25,
                         double gamma = 2.0) {
    if (p.shape() != targets.shape())
        throw std::invalid_argument("focal_loss: probability and target shapes disagree: " +
                                    shape_str(p.shape()) + " vs " + shape_str(targets.shape()));
    for (double t : targets.data())
        if (t != 0.0 && t != 1.0)
            throw std::invalid_argument("focal_loss: targets must be 0 or 1, got " +
                                        std::to_string(t));
    Tensor pc = clamp(p, 1e-7, 1.0 - 1e-7);
    Tensor one = Tensor::full(pc.shape(), 1.0);
    Tensor q = sub(one, pc);
    Tensor pos = mul_scalar(mul(pow_const(q, gamma), log_t(pc)), -alpha);
    Tensor neg = mul_scalar(mul(pow_const(pc, gamma), log_t(q)), -(1.0 - alpha));
    return sum_all(add(mul(targets, pos), mul(sub(one, targets), neg)));
}

// ---------------------------------------------------------------------------
// Hungarian matching
// ---------------------------------------------------------------------------

struct MatchResult {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (query, gt), query-ascending
    std::vector<std::size_t> unmatched_queries;
    double cost = 0.0;
};

namespace detail {

/// Minimal assignment cost for an n x m matrix with n <= m (shortest
/// augmenting paths with potentials, 1-based internally).
inline double assign_cost(const std::vector<double>& c, std::size_t n, std::size_t m) {
    if (n == 0) return 0.0;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> match(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        match[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = match[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = c[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    double total = 0.0;
    for (std::size_t j = 1; j <= m; ++j)
        if (match[j] != 0) total += c[(match[j] - 1) * m + (j - 1)];
    return total;
}

} // namespace detail

/// Minimal-cost injection of the smaller side into the larger for a
/// row-major rows x cols matrix. Deterministic among equal-cost optima:
/// scanning the smaller side in index order, each element takes the lowest
/// opposite index whose completion cost is minimal.
inline MatchResult hungarian(const std::vector<double>& cost, std::size_t rows,
                             std::size_t cols) {
    if (cost.size() != rows * cols)
        throw std::invalid_argument("hungarian: cost size " + std::to_string(cost.size()) +
                                    " does not match " + std::to_string(rows) + " x " +
                                    std::to_string(cols));
    for (double v : cost)
        if (!std::isfinite(v))
            throw std::invalid_argument("hungarian: non-finite cost entry " + std::to_string(v));

    MatchResult res;
    if (rows == 0 || cols == 0) {
        for (std::size_t q = 0; q < rows; ++q) res.unmatched_queries.push_back(q);
        return res;
    }

    // orient so the matched-for side comes first
    const bool flipped = rows > cols;
    const std::size_t n = flipped ? cols : rows, m = flipped ? rows : cols;
    std::vector<double> c(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            c[i * m + j] = flipped ? cost[j * cols + i] : cost[i * cols + j];

    std::vector<std::size_t> chosen(n);
    std::vector<std::size_t> remaining(m);
    for (std::size_t j = 0; j < m; ++j) remaining[j] = j;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t sub_rows = n - i - 1, sub_cols = remaining.size() - 1;
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_j = 0;
        std::vector<double> sub(sub_rows * sub_cols);
        for (std::size_t jj = 0; jj < remaining.size(); ++jj) {
            for (std::size_t r = 0; r < sub_rows; ++r) {
                std::size_t cidx = 0;
                for (std::size_t k = 0; k < remaining.size(); ++k) {
                    if (k == jj) continue;
                    sub[r * sub_cols + cidx++] = c[(i + 1 + r) * m + remaining[k]];
                }
            }
            const double total =
                c[i * m + remaining[jj]] + detail::assign_cost(sub, sub_rows, sub_cols);
            if (total < best) {
                best = total;
                best_j = jj;
            }
        }
        chosen[i] = remaining[best_j];
        remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(best_j));
    }

    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t q = flipped ? chosen[i] : i;
        const std::size_t g = flipped ? i : chosen[i];
        res.pairs.emplace_back(q, g);
    }
    std::sort(res.pairs.begin(), res.pairs.end());
    std::vector<char> matched(rows, 0);
    for (const auto& [q, g] : res.pairs) {
        matched[q] = 1;
        res.cost += cost[q * cols + g];
    }
    for (std::size_t q = 0; q < rows; ++q)
        if (!matched[q]) res.unmatched_queries.push_back(q);
    return res;
}

// ---------------------------------------------------------------------------
// Matching cost and total loss
// ---------------------------------------------------------------------------

struct LossCoeffs {
    double cls = 2.0;
    double l1 = 5.0;
    double giou = 2.0;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
};

/// Row-major M x G matching costs:
///   cls * (-p_correct) + l1 * |box difference|_1 + giou * (1 - GIoU).
inline std::vector<double> matching_cost(const Tensor& class_probs, const Tensor& boxes,
                                         const std::vector<std::array<double, 4>>& gt_boxes,
                                         const std::vector<std::size_t>& gt_cats,
                                         const LossCoeffs& co = {}) {
    const std::size_t m = class_probs.rows(), c = class_probs.cols(), g = gt_boxes.size();
    if (boxes.rows() != m || boxes.cols() != 4)
        throw std::invalid_argument("matching_cost: expected " + std::to_string(m) +
                                    " x 4 boxes, got " + shape_str(boxes.shape()));
    if (gt_cats.size() != g)
        throw std::invalid_argument("matching_cost: " + std::to_string(g) + " boxes vs " +
                                    std::to_string(gt_cats.size()) + " categories");
    if (g == 0)
        throw std::invalid_argument("matching_cost: empty ground truth has no matching");
    for (std::size_t k = 0; k < g; ++k)
        if (gt_cats[k] >= c)
            throw std::invalid_argument("matching_cost: category " + std::to_string(gt_cats[k]) +
                                        " out of range for " + std::to_string(c) + " classes");
    std::vector<double> out(m * g);
    for (std::size_t q = 0; q < m; ++q) {
        const std::array<double, 4> pb = {boxes.data()[q * 4 + 0], boxes.data()[q * 4 + 1],
                                          boxes.data()[q * 4 + 2], boxes.data()[q * 4 + 3]};
        for (std::size_t k = 0; k < g; ++k) {
            double l1 = 0.0;
            for (std::size_t d = 0; d < 4; ++d) l1 += std::fabs(pb[d] - gt_boxes[k][d]);
            out[q * g + k] = co.cls * (-class_probs.data()[q * c + gt_cats[k]]) + co.l1 * l1 +
                             co.giou * (1.0 - giou_scalar(pb, gt_boxes[k]));
        }
    }
    return out;
}

inline MatchResult match_predictions(const Tensor& class_probs, const Tensor& boxes,
                                     const std::vector<std::array<double, 4>>& gt_boxes,
                                     const std::vector<std::size_t>& gt_cats,
                                     const LossCoeffs& co = {}) {
    return hungarian(matching_cost(class_probs, boxes, gt_boxes, gt_cats, co),
                     class_probs.rows(), gt_boxes.size());
}

/// Matched set-prediction loss for one decoder layer:
///   cls * focal(all queries x classes, matched classes positive)
/// + (l1 * L1 + giou * (1-GIoU)) over matched pairs, scaled by 1/#GT.
/// With no ground truth the loss is classification-only (all-negative
/// targets). The match must cover min(M, #GT) distinct pairs in range.
inline Tensor total_loss(const Tensor& class_probs, const Tensor& boxes,
                         const std::vector<std::array<double, 4>>& gt_boxes,
                         const std::vector<std::size_t>& gt_cats, const MatchResult& match,
                         const LossCoeffs& co = {}) {
    const std::size_t m = class_probs.rows(), c = class_probs.cols(), g = gt_boxes.size();
    if (boxes.rows() != m || boxes.cols() != 4)
        throw std::invalid_argument("total_loss: expected " + std::to_string(m) +
                                    " x 4 boxes, got " + shape_str(boxes.shape()));
    if (gt_cats.size() != g)
        throw std::invalid_argument("total_loss: " + std::to_string(g) + " boxes vs " +
                                    std::to_string(gt_cats.size()) + " categories");
    if (match.pairs.size() != std::min(m, g))
        throw std::invalid_argument("total_loss: match covers " +
                                    std::to_string(match.pairs.size()) + " pairs, expected " +
                                    std::to_string(std::min(m, g)) +
                                    " — was it computed for these predictions?");
    std::vector<char> q_seen(m, 0), g_seen(g, 0);
    for (const auto& [q, k] : match.pairs) {
        if (q >= m || k >= g || q_seen[q] || g_seen[k])
            throw std::invalid_argument("total_loss: match pair (" + std::to_string(q) + ", " +
                                        std::to_string(k) + ") out of range or duplicated");
        q_seen[q] = 1;
        g_seen[k] = 1;
    }

    Tensor targets = Tensor::zeros({m, c});
    for (const auto& [q, k] : match.pairs) {
        if (gt_cats[k] >= c)
            throw std::invalid_argument("total_loss: category " + std::to_string(gt_cats[k]) +
                                        " out of range for " + std::to_string(c) + " classes");
        targets.data()[q * c + gt_cats[k]] = 1.0;
    }
    Tensor loss = mul_scalar(focal_loss(class_probs, targets, co.focal_alpha, co.focal_gamma),
                             co.cls);
    if (!match.pairs.empty()) {
        std::vector<std::size_t> qidx;
        std::vector<double> gflat;
        for (const auto& [q, k] : match.pairs) {
            qidx.push_back(q);
            gflat.insert(gflat.end(), gt_boxes[k].begin(), gt_boxes[k].end());
        }
        Tensor pred = gather_rows(boxes, qidx);
        Tensor gtb = Tensor::from_data({qidx.size(), 4}, std::move(gflat));
        Tensor l1 = sum_all(abs_t(sub(pred, gtb)));
        Tensor gi = sum_all(sub(Tensor::full({qidx.size()}, 1.0), giou_rows(pred, gtb)));
        const double inv_g = 1.0 / static_cast<double>(g);
        loss = add(loss, add(mul_scalar(l1, co.l1 * inv_g), mul_scalar(gi, co.giou * inv_g)));
    }
    return loss;
}

} // namespace gptr
