#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <deque>
#include <string>
#include <vector>

#include "gptr/errors.hpp"
#include "gptr/image.hpp"
#include "gptr/nn.hpp"
#include "gptr/tensor.hpp"

namespace gptr {

// ---------------------------------------------------------------------------
// Raw per-patch features
// ---------------------------------------------------------------------------

/// Per channel: mean, population standard deviation, and the signed cube
/// root of the third central moment. Layout groups by moment:
/// [mean_R, mean_G, mean_B, std_R, std_G, std_B, skew_R, skew_G, skew_B].
inline std::array<double, 9> color_moments(const Image& patch) {
    std::array<double, 9> out{};
    const double n = static_cast<double>(patch.h * patch.w);
    for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0.0;
        for (std::size_t y = 0; y < patch.h; ++y)
            for (std::size_t x = 0; x < patch.w; ++x) mean += patch.at(y, x, c);
        mean /= n;
        double m2 = 0.0, m3 = 0.0;
        for (std::size_t y = 0; y < patch.h; ++y)
            for (std::size_t x = 0; x < patch.w; ++x) {
                const double d = patch.at(y, x, c) - mean;
                m2 += d * d;
                m3 += d * d * d;
            }
        m2 /= n;
        m3 /= n;
        out[c] = mean;
        out[3 + c] = std::sqrt(m2);
        out[6 + c] = std::cbrt(m3);
    }
    return out;
}

/// Normalized corners (x0, y0, x1, y1) of patch i in a row-major grid.
inline std::array<double, 4> position_feature(std::size_t i, std::size_t grid_side) {
    if (i >= grid_side * grid_side)
        throw std::invalid_argument("position_feature: index " + std::to_string(i) +
                                    " out of range for grid " + std::to_string(grid_side));
    const double g = static_cast<double>(grid_side);
    const double row = static_cast<double>(i / grid_side);
    const double col = static_cast<double>(i % grid_side);
    return {col / g, row / g, (col + 1.0) / g, (row + 1.0) / g};
}

// ---------------------------------------------------------------------------
// Canny contour extraction
// ---------------------------------------------------------------------------

namespace detail {

inline double px_clamped(const std::vector<double>& img, std::size_t h, std::size_t w,
                         std::ptrdiff_t y, std::ptrdiff_t x) {
    y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(h) - 1);
    x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(w) - 1);
    return img[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
}

} // namespace detail

struct CannyParams {
    double sigma = 1.0;      // 5x5 Gaussian
    double low = 0.1;        // weak-edge threshold on normalized magnitude
    double high = 0.2;       // strong-edge threshold
};

/// Full Canny on an RGB patch: luminance, 5x5 Gaussian blur (replicate
/// borders), Sobel (scaled so a unit step has magnitude about 1), 4-bin
/// non-maximum suppression, double threshold with 8-connected hysteresis.
/// Returns a binary {0,1} map of the patch size.
inline std::vector<double> canny_contour(const Image& patch, const CannyParams& p = {}) {
    const std::size_t h = patch.h, w = patch.w;
    std::vector<double> gray(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            gray[y * w + x] = 0.299 * patch.at(y, x, 0) + 0.587 * patch.at(y, x, 1) +
                              0.114 * patch.at(y, x, 2);

    // 5x5 Gaussian, normalized
    double kernel[5][5];
    double ksum = 0.0;
    for (int i = -2; i <= 2; ++i)
        for (int j = -2; j <= 2; ++j) {
            kernel[i + 2][j + 2] = std::exp(-(i * i + j * j) / (2.0 * p.sigma * p.sigma));
            ksum += kernel[i + 2][j + 2];
        }
    std::vector<double> smooth(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -2; i <= 2; ++i)
                for (int j = -2; j <= 2; ++j)
                    acc += kernel[i + 2][j + 2] *
                           detail::px_clamped(gray, h, w, static_cast<std::ptrdiff_t>(y) + i,
                                              static_cast<std::ptrdiff_t>(x) + j);
            smooth[y * w + x] = acc / ksum;
        }

    // Sobel / 4: unit step response has magnitude 1
    std::vector<double> mag(h * w), dir(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            auto s = [&](int dy, int dx) {
                return detail::px_clamped(smooth, h, w, static_cast<std::ptrdiff_t>(y) + dy,
                                          static_cast<std::ptrdiff_t>(x) + dx);
            };
            const double gx = (s(-1, 1) + 2 * s(0, 1) + s(1, 1) -
                               (s(-1, -1) + 2 * s(0, -1) + s(1, -1))) / 4.0;
            const double gy = (s(1, -1) + 2 * s(1, 0) + s(1, 1) -
                               (s(-1, -1) + 2 * s(-1, 0) + s(-1, 1))) / 4.0;
            mag[y * w + x] = std::sqrt(gx * gx + gy * gy);
            dir[y * w + x] = std::atan2(gy, gx);
        }

    // NMS along the quantized gradient direction; plateau edges keep both
    // sides via the >= comparison.
    std::vector<std::uint8_t> keep(h * w, 0);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double m = mag[y * w + x];
            if (m <= 0.0) continue;
            double angle = dir[y * w + x] * 180.0 / 3.14159265358979323846;
            if (angle < 0) angle += 180.0;
            // neighbors along the gradient (y axis points down)
            int dy = 0, dx = 1;  // near 0 deg: horizontal gradient
            if (angle >= 22.5 && angle < 67.5) {
                dy = 1;
                dx = 1;  // down-right
            } else if (angle >= 67.5 && angle < 112.5) {
                dy = 1;
                dx = 0;  // vertical gradient
            } else if (angle >= 112.5 && angle < 157.5) {
                dy = 1;
                dx = -1;  // down-left
            }
            const double a = detail::px_clamped(mag, h, w, static_cast<std::ptrdiff_t>(y) + dy,
                                                static_cast<std::ptrdiff_t>(x) + dx);
            const double b = detail::px_clamped(mag, h, w, static_cast<std::ptrdiff_t>(y) - dy,
                                                static_cast<std::ptrdiff_t>(x) - dx);
            if (m >= a && m >= b) keep[y * w + x] = 1;
        }

    // double threshold + hysteresis (8-connected BFS from strong pixels)
    std::vector<double> out(h * w, 0.0);
    std::deque<std::size_t> frontier;
    for (std::size_t i = 0; i < h * w; ++i)
        if (keep[i] && mag[i] >= p.high) {
            out[i] = 1.0;
            frontier.push_back(i);
        }
    while (!frontier.empty()) {
        const std::size_t i = frontier.front();
        frontier.pop_front();
        const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i / w);
        const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(i % w);
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const std::ptrdiff_t ny = y + dy, nx = x + dx;
                if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(h) ||
                    nx >= static_cast<std::ptrdiff_t>(w))
                    continue;
                const std::size_t ni =
                    static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
                if (out[ni] == 0.0 && keep[ni] && mag[ni] >= p.low) {
                    out[ni] = 1.0;
                    frontier.push_back(ni);
                }
            }
    }
    return out;
}

/// The four border vectors of a square contour map, ordered
/// (top row, bottom row, left column, right column), each of length E.
inline std::array<std::vector<double>, 4> edge_pixel_features(const std::vector<double>& contour,
                                                              std::size_t side) {
    if (contour.size() != side * side)
        throw std::invalid_argument("edge_pixel_features: map size " +
                                    std::to_string(contour.size()) + " is not " +
                                    std::to_string(side) + " squared");
    std::array<std::vector<double>, 4> out;
    for (auto& v : out) v.resize(side);
    for (std::size_t i = 0; i < side; ++i) {
        out[0][i] = contour[i];                           // top
        out[1][i] = contour[(side - 1) * side + i];       // bottom
        out[2][i] = contour[i * side];                    // left
        out[3][i] = contour[i * side + side - 1];         // right
    }
    return out;
}

// ---------------------------------------------------------------------------
// Assembled feature set for a diagram
// ---------------------------------------------------------------------------

struct RawPatchFeatures {
    std::size_t n = 0;         // patch count
    std::size_t edge_len = 0;  // E, the patch side
    Tensor f_cb;               // N x 9
    Tensor f_pb;               // N x 4
    Tensor f_eb;               // N x 4E, per patch [top | bottom | left | right]
};

inline RawPatchFeatures compute_patch_features(const PatchGrid& grid,
                                               const CannyParams& canny = {}) {
    if (grid.patch_h != grid.patch_w)
        throw ConfigError("compute_patch_features: patches must be square, got " +
                          std::to_string(grid.patch_h) + "x" + std::to_string(grid.patch_w));
    RawPatchFeatures out;
    out.n = grid.patches.size();
    out.edge_len = grid.patch_h;
    std::vector<double> cb, pb, eb;
    cb.reserve(out.n * 9);
    pb.reserve(out.n * 4);
    eb.reserve(out.n * 4 * out.edge_len);
    for (std::size_t i = 0; i < out.n; ++i) {
        const auto moments = color_moments(grid.patches[i]);
        cb.insert(cb.end(), moments.begin(), moments.end());
        const auto pos = position_feature(i, grid.grid_side);
        pb.insert(pb.end(), pos.begin(), pos.end());
        const auto contour = canny_contour(grid.patches[i], canny);
        const auto edges = edge_pixel_features(contour, out.edge_len);
        for (const auto& e : edges) eb.insert(eb.end(), e.begin(), e.end());
    }
    out.f_cb = Tensor::from_data({out.n, 9}, std::move(cb));
    out.f_pb = Tensor::from_data({out.n, 4}, std::move(pb));
    out.f_eb = Tensor::from_data({out.n, 4 * out.edge_len}, std::move(eb));
    return out;
}

// ---------------------------------------------------------------------------
// Branch projection MLPs
// ---------------------------------------------------------------------------

/// Model-width embeddings per branch; the edge branch keeps its four
/// per-edge embeddings (top, bottom, left, right) separate for the
/// smoothness-graph construction.
struct ProjectedFeatures {
    Tensor cb;  // N x d_c
    Tensor pb;  // N x d_p
    std::array<Tensor, 4> eb;  // each N x d_e
};

inline void declare_branch_params(ParameterStore& store, const std::string& prefix,
                                  std::size_t edge_len, std::size_t d_c, std::size_t d_p,
                                  std::size_t d_e, Rng& rng) {
    declare_mlp(store, prefix + ".cb", {9, d_c, d_c}, rng);
    declare_mlp(store, prefix + ".pb", {4, d_p, d_p}, rng);
    // one shared MLP for all four edge vectors
    declare_mlp(store, prefix + ".eb", {edge_len, d_e, d_e}, rng);
}

inline ProjectedFeatures project_branches(const ParameterStore& store, const std::string& prefix,
                                          const RawPatchFeatures& raw,
                                          const TrainContext& tc = {}) {
    if (store.get(prefix + ".eb.l0.w").rows() != raw.edge_len)
        throw ConfigError("project_branches: edge MLP expects inputs of length " +
                          std::to_string(store.get(prefix + ".eb.l0.w").rows()) +
                          " but patches have side " + std::to_string(raw.edge_len));
    ProjectedFeatures out;
    out.cb = apply_mlp(store, prefix + ".cb", raw.f_cb, 2, tc);
    out.pb = apply_mlp(store, prefix + ".pb", raw.f_pb, 2, tc);
    const std::size_t e = raw.edge_len;
    for (std::size_t k = 0; k < 4; ++k) {
        Tensor edge_k = slice_cols(raw.f_eb, k * e, (k + 1) * e);
        out.eb[k] = apply_mlp(store, prefix + ".eb", edge_k, 2, tc);
    }
    return out;
}

} // namespace gptr
