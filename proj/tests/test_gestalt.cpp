#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "gptr/gestalt.hpp"
#include "gptr/synth.hpp"

using namespace gptr;

// ---------------------------------------------------------------------------
// Reference Canny, written independently of the library implementation:
// 2-d arrays instead of flat buffers, modular arithmetic instead of interval
// tests for the direction bins, recursion instead of a BFS for hysteresis.
// One caveat: on hard-edged synthetic content neighboring gradient
// magnitudes are often *exactly* equal, and the suppression comparison
// resolves the tie.  For those ties to agree bit-for-bit, the smoothing and
// gradient stages must accumulate in the same order as the library (rows
// outer, columns inner, positive taps before negative, one normalization at
// the end); everything after the magnitude computation is free to differ.
// ---------------------------------------------------------------------------
namespace reference {

using Grid = std::vector<std::vector<double>>;

Grid to_gray(const Image& img) {
    Grid g(img.h, std::vector<double>(img.w));
    for (std::size_t y = 0; y < img.h; ++y)
        for (std::size_t x = 0; x < img.w; ++x)
            g[y][x] = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) +
                      0.114 * img.at(y, x, 2);
    return g;
}

double sample(const Grid& g, long y, long x) {
    const long h = static_cast<long>(g.size()), w = static_cast<long>(g[0].size());
    if (y < 0) y = 0;
    if (x < 0) x = 0;
    if (y >= h) y = h - 1;
    if (x >= w) x = w - 1;
    return g[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)];
}

Grid gaussian5(const Grid& in, double sigma) {
    // unnormalized taps summed row-major, one division at the end (see the
    // tie-breaking caveat above; a separable implementation rounds
    // differently and flips suppression decisions on exact plateaus)
    double taps[25];
    double weight = 0.0;
    for (int i = -2; i <= 2; ++i)
        for (int j = -2; j <= 2; ++j) {
            taps[(i + 2) * 5 + (j + 2)] = std::exp(-(i * i + j * j) / (2.0 * sigma * sigma));
            weight += taps[(i + 2) * 5 + (j + 2)];
        }
    const std::size_t h = in.size(), w = in[0].size();
    Grid out(h, std::vector<double>(w));
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -2; i <= 2; ++i)
                for (int j = -2; j <= 2; ++j)
                    acc += taps[(i + 2) * 5 + (j + 2)] *
                           sample(in, static_cast<long>(y) + i, static_cast<long>(x) + j);
            out[y][x] = acc / weight;
        }
    return out;
}

void grow(std::vector<std::vector<int>>& state, std::size_t y, std::size_t x) {
    // recursive hysteresis: promote weak neighbors of a strong pixel
    state[y][x] = 3;
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
            const long ny = static_cast<long>(y) + dy, nx = static_cast<long>(x) + dx;
            if (ny < 0 || nx < 0 || ny >= static_cast<long>(state.size()) ||
                nx >= static_cast<long>(state[0].size()))
                continue;
            const auto uy = static_cast<std::size_t>(ny), ux = static_cast<std::size_t>(nx);
            if (state[uy][ux] == 1 || state[uy][ux] == 2) grow(state, uy, ux);
        }
}

std::vector<double> canny(const Image& img, double sigma = 1.0, double low = 0.1,
                          double high = 0.2) {
    const Grid smooth = gaussian5(to_gray(img), sigma);
    const std::size_t h = img.h, w = img.w;
    Grid mag(h, std::vector<double>(w));
    Grid gxs(h, std::vector<double>(w)), gys(h, std::vector<double>(w));
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const long Y = static_cast<long>(y), X = static_cast<long>(x);
            const double gx = (sample(smooth, Y - 1, X + 1) + 2 * sample(smooth, Y, X + 1) +
                               sample(smooth, Y + 1, X + 1) -
                               (sample(smooth, Y - 1, X - 1) + 2 * sample(smooth, Y, X - 1) +
                                sample(smooth, Y + 1, X - 1))) / 4.0;
            const double gy = (sample(smooth, Y + 1, X - 1) + 2 * sample(smooth, Y + 1, X) +
                               sample(smooth, Y + 1, X + 1) -
                               (sample(smooth, Y - 1, X - 1) + 2 * sample(smooth, Y - 1, X) +
                                sample(smooth, Y - 1, X + 1))) / 4.0;
            gxs[y][x] = gx;
            gys[y][x] = gy;
            mag[y][x] = std::sqrt(gx * gx + gy * gy);
        }
    // state: 0 none, 1 weak, 2 strong, 3 final
    // 45-degree direction bins via modular arithmetic, offsets as (dy, dx)
    const int offs[4][2] = {{0, 1}, {1, 1}, {1, 0}, {1, -1}};
    std::vector<std::vector<int>> state(h, std::vector<int>(w, 0));
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double m = mag[y][x];
            if (m <= 0.0 || m < low) continue;
            double deg = std::atan2(gys[y][x], gxs[y][x]) * 45.0 / std::atan(1.0);
            deg = std::fmod(deg + 360.0 + 22.5, 180.0);
            const int bin = static_cast<int>(deg / 45.0) % 4;
            const int dy = offs[bin][0], dx = offs[bin][1];
            const double fwd = sample(mag, static_cast<long>(y) + dy, static_cast<long>(x) + dx);
            const double bwd = sample(mag, static_cast<long>(y) - dy, static_cast<long>(x) - dx);
            if (m < fwd || m < bwd) continue;
            state[y][x] = m >= high ? 2 : 1;
        }
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            if (state[y][x] == 2) grow(state, y, x);
    std::vector<double> out(h * w, 0.0);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            if (state[y][x] == 3) out[y * w + x] = 1.0;
    return out;
}

} // namespace reference

namespace {

Image constant_patch(double r, double g, double b, std::size_t side = 16) {
    Image img(side, side);
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            img.at(y, x, 0) = r;
            img.at(y, x, 1) = g;
            img.at(y, x, 2) = b;
        }
    return img;
}

Image vertical_step(double lo, double hi, std::size_t col = 8, std::size_t side = 16) {
    Image img(side, side);
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x)
            for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = x < col ? lo : hi;
    return img;
}

} // namespace

TEST_CASE("color moments of constant patches") {
    auto red = color_moments(constant_patch(1, 0, 0));
    CHECK(red[0] == 1.0);
    CHECK(red[1] == 0.0);
    CHECK(red[2] == 0.0);
    for (std::size_t i = 3; i < 9; ++i) CHECK(red[i] == 0.0);

    auto white = color_moments(constant_patch(1, 1, 1));
    for (std::size_t i = 0; i < 3; ++i) CHECK(white[i] == 1.0);
    for (std::size_t i = 3; i < 9; ++i) CHECK(white[i] == 0.0);
}

TEST_CASE("color moments of a half-black half-white patch") {
    Image img = vertical_step(0.0, 1.0, 8);
    auto m = color_moments(img);
    CHECK(m[0] == Catch::Approx(0.5).margin(1e-12));   // mean R
    CHECK(m[3] == Catch::Approx(0.5).margin(1e-12));   // std R
    CHECK(m[6] == Catch::Approx(0.0).margin(1e-12));   // skew R
}

TEST_CASE("color moment ranges hold on random patches") {
    Rng rng(51);
    for (int rep = 0; rep < 50; ++rep) {
        Image img(16, 16);
        for (double& v : img.px) v = rng.uniform();
        auto m = color_moments(img);
        for (std::size_t c = 0; c < 3; ++c) {
            CHECK(m[c] >= 0.0);
            CHECK(m[c] <= 1.0);
            CHECK(m[3 + c] >= 0.0);
        }
    }
}

TEST_CASE("position features cover the grid corners") {
    auto first = position_feature(0, 14);
    CHECK(first == std::array<double, 4>{0.0, 0.0, 1.0 / 14, 1.0 / 14});
    auto last = position_feature(195, 14);
    CHECK(last == std::array<double, 4>{13.0 / 14, 13.0 / 14, 1.0, 1.0});
    auto row1 = position_feature(14, 14);
    CHECK(row1 == std::array<double, 4>{0.0, 1.0 / 14, 1.0 / 14, 2.0 / 14});
    CHECK_THROWS_AS(position_feature(196, 14), std::invalid_argument);
}

TEST_CASE("canny of a constant patch is all zeros") {
    auto out = canny_contour(constant_patch(0.5, 0.5, 0.5));
    for (double v : out) CHECK(v == 0.0);
}

TEST_CASE("canny localizes a vertical step to columns 7-9") {
    auto out = canny_contour(vertical_step(0.0, 1.0, 8));
    bool any = false;
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x)
            if (out[y * 16 + x] != 0.0) {
                any = true;
                CHECK(x >= 7);
                CHECK(x <= 9);
            }
    CHECK(any);
}

TEST_CASE("canny is invariant to intensity shifts that keep the contrast") {
    // The gradient peak straddles the step, so the two center columns tie
    // analytically and the non-max winner between them is decided by
    // last-ulp rounding of the shifted intensities. The stable invariant is
    // the detected edge itself: a full-height line at the step.
    for (const auto& img : {vertical_step(0.0, 0.8), vertical_step(0.2, 1.0)}) {
        auto out = canny_contour(img);
        for (std::size_t y = 0; y < 16; ++y) {
            std::size_t in_band = 0, outside = 0;
            for (std::size_t x = 0; x < 16; ++x) {
                if (out[y * 16 + x] == 0.0) continue;
                (x >= 7 && x <= 9 ? in_band : outside) += 1;
            }
            CHECK(in_band >= 1);
            CHECK(outside == 0);
        }
    }
}

TEST_CASE("canny output is binary") {
    Rng rng(52);
    Image img(16, 16);
    for (double& v : img.px) v = rng.uniform();
    auto out = canny_contour(img);
    for (double v : out) CHECK((v == 0.0 || v == 1.0));
}

TEST_CASE("canny matches the independent reference on synthetic patches") {
    // structured content: real diagram patches from the corpus generator
    auto items = synth_generate(default_synth_spec(), 99, 4);
    std::size_t contour_pixels = 0;
    for (const auto& item : items) {
        PatchGrid grid = split_patches(item.image, 196);
        for (const auto& patch : grid.patches) {
            auto ours = canny_contour(patch);
            auto ref = reference::canny(patch);
            REQUIRE(ours.size() == ref.size());
            for (std::size_t i = 0; i < ours.size(); ++i) CHECK(ours[i] == ref[i]);
            for (double v : ours) contour_pixels += v != 0.0;
        }
    }
    CHECK(contour_pixels > 100);  // the corpus genuinely exercises the detector

    // smooth random fields
    Rng rng(53);
    for (int rep = 0; rep < 10; ++rep) {
        Image img(16, 16);
        const double fx = rng.uniform(0.1, 0.6), fy = rng.uniform(0.1, 0.6);
        const double phase = rng.uniform(0.0, 6.28);
        for (std::size_t y = 0; y < 16; ++y)
            for (std::size_t x = 0; x < 16; ++x)
                for (std::size_t c = 0; c < 3; ++c)
                    img.at(y, x, c) =
                        0.5 + 0.5 * std::sin(fx * static_cast<double>(x) +
                                             fy * static_cast<double>(y) + phase);
        auto ours = canny_contour(img);
        auto ref = reference::canny(img);
        for (std::size_t i = 0; i < ours.size(); ++i) CHECK(ours[i] == ref[i]);
    }
}

TEST_CASE("edge pixel features extract the four borders") {
    std::vector<double> contour(16 * 16, 0.0);
    contour[5] = 1.0;              // top row, column 5
    contour[15 * 16 + 2] = 1.0;    // bottom row, column 2
    contour[7 * 16] = 1.0;         // left column, row 7
    contour[3 * 16 + 15] = 1.0;    // right column, row 3
    auto edges = edge_pixel_features(contour, 16);
    for (const auto& e : edges) CHECK(e.size() == 16);
    CHECK(edges[0][5] == 1.0);
    CHECK(edges[1][2] == 1.0);
    CHECK(edges[2][7] == 1.0);
    CHECK(edges[3][3] == 1.0);
    double total = 0;
    for (const auto& e : edges)
        for (double v : e) total += v;
    CHECK(total == 4.0);

    auto zero = edge_pixel_features(std::vector<double>(256, 0.0), 16);
    for (const auto& e : zero)
        for (double v : e) CHECK(v == 0.0);

    CHECK_THROWS_AS(edge_pixel_features(std::vector<double>(10, 0.0), 16),
                    std::invalid_argument);
}

TEST_CASE("compute_patch_features assembles the documented shapes") {
    auto items = synth_generate(default_synth_spec(), 7, 1);
    PatchGrid grid = split_patches(items[0].image, 196);
    RawPatchFeatures raw = compute_patch_features(grid);
    CHECK(raw.n == 196);
    CHECK(raw.edge_len == 16);
    CHECK(raw.f_cb.shape() == Shape{196, 9});
    CHECK(raw.f_pb.shape() == Shape{196, 4});
    CHECK(raw.f_eb.shape() == Shape{196, 64});
    for (double v : raw.f_eb.data()) CHECK((v == 0.0 || v == 1.0));
    for (std::size_t i = 0; i < 196; ++i) {
        CHECK(raw.f_pb.at(i, 0) < raw.f_pb.at(i, 2));  // x0 < x1
        CHECK(raw.f_pb.at(i, 1) < raw.f_pb.at(i, 3));  // y0 < y1
        CHECK(raw.f_cb.at(i, 0) >= 0.0);
        CHECK(raw.f_cb.at(i, 0) <= 1.0);
        CHECK(raw.f_cb.at(i, 3) >= 0.0);
    }
}

TEST_CASE("project_branches produces model-width embeddings with gradients") {
    auto items = synth_generate(default_synth_spec(), 7, 1);
    RawPatchFeatures raw = compute_patch_features(split_patches(items[0].image, 196));
    ParameterStore store;
    Rng rng(54);
    declare_branch_params(store, "proj", 16, 32, 32, 32, rng);
    ProjectedFeatures proj = project_branches(store, "proj", raw);
    CHECK(proj.cb.shape() == Shape{196, 32});
    CHECK(proj.pb.shape() == Shape{196, 32});
    for (const auto& e : proj.eb) CHECK(e.shape() == Shape{196, 32});

    backward(mean_all(proj.cb));
    CHECK(store.get("proj.cb.l0.w").grad().size() == 9 * 32);

    ParameterStore wrong;
    Rng rng2(55);
    declare_branch_params(wrong, "proj", 8, 32, 32, 32, rng2);  // edge length 8, patches 16
    CHECK_THROWS_AS(project_branches(wrong, "proj", raw), ConfigError);
}

TEST_CASE("edge projections share one MLP across the four edges") {
    ParameterStore store;
    Rng rng(56);
    declare_branch_params(store, "p", 16, 8, 8, 8, rng);
    RawPatchFeatures raw;
    raw.n = 2;
    raw.edge_len = 16;
    raw.f_cb = Tensor::zeros({2, 9});
    raw.f_pb = Tensor::zeros({2, 4});
    std::vector<double> eb(2 * 64, 0.0);
    // patch 0: identical pattern on all four edges
    for (std::size_t k = 0; k < 4; ++k) eb[k * 16 + 3] = 1.0;
    raw.f_eb = Tensor::from_data({2, 64}, eb);
    ProjectedFeatures proj = project_branches(store, "p", raw);
    for (std::size_t k = 1; k < 4; ++k)
        for (std::size_t j = 0; j < 8; ++j)
            CHECK(proj.eb[k].at(0, j) == Catch::Approx(proj.eb[0].at(0, j)).margin(1e-15));
}
