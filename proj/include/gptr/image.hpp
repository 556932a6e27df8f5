#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <string>
#include <vector>

#include "gptr/errors.hpp"
#include "gptr/tensor.hpp"

namespace gptr {

/// RGB raster with values in [0,1], row-major (y, x, channel).
struct Image {
    std::size_t h = 0, w = 0;
    std::vector<double> px;

    Image() = default;
    Image(std::size_t h_, std::size_t w_, double fill = 0.0)
        : h(h_), w(w_), px(h_ * w_ * 3, fill) {}

    double& at(std::size_t y, std::size_t x, std::size_t c) { return px[(y * w + x) * 3 + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const {
        return px[(y * w + x) * 3 + c];
    }
};

namespace detail {

inline Image decode_png_bytes(const std::string& path) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str()))
        throw DataError("image load: cannot decode '" + path + "': " + img.message);
    img.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
    png_color white{255, 255, 255};
    if (!png_image_finish_read(&img, &white, buf.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw DataError("image load: cannot decode '" + path + "': " + msg);
    }
    Image out(img.height, img.width);
    for (std::size_t i = 0; i < out.px.size(); ++i)
        out.px[i] = static_cast<double>(buf[i]) / 255.0;
    return out;
}

inline int ppm_next_token(std::istream& in, std::string& tok) {
    tok.clear();
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    return tok.empty() ? EOF : 0;
}

inline Image decode_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("image load: cannot open '" + path + "'");
    std::string tok;
    if (ppm_next_token(in, tok) == EOF || (tok != "P6" && tok != "P5"))
        throw DataError("image load: '" + path + "' is not a binary PPM/PGM file");
    const bool gray = tok == "P5";
    auto read_num = [&](const char* what) -> long {
        if (ppm_next_token(in, tok) == EOF)
            throw DataError("image load: '" + path + "' truncated before " + what);
        try {
            return std::stol(tok);
        } catch (...) {
            throw DataError("image load: '" + path + "' has malformed " + std::string(what));
        }
    };
    const long w = read_num("width"), h = read_num("height"), maxval = read_num("maxval");
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535)
        throw DataError("image load: '" + path + "' has invalid header values");
    const std::size_t samples = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) *
                                (gray ? 1 : 3);
    const bool wide = maxval > 255;
    std::vector<std::uint8_t> raw(samples * (wide ? 2 : 1));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size())
        throw DataError("image load: '" + path + "' pixel data truncated");
    Image out(static_cast<std::size_t>(h), static_cast<std::size_t>(w));
    const double inv = 1.0 / static_cast<double>(maxval);
    for (std::size_t i = 0; i < samples; ++i) {
        const double v = wide ? (raw[2 * i] * 256.0 + raw[2 * i + 1]) * inv : raw[i] * inv;
        if (gray) {
            out.px[3 * i] = out.px[3 * i + 1] = out.px[3 * i + 2] = v;
        } else {
            out.px[i] = v;
        }
    }
    return out;
}

} // namespace detail

inline Image load_image(const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw DataError("image load: cannot open '" + path + "'");
    char magic[2] = {0, 0};
    probe.read(magic, 2);
    probe.close();
    if (magic[0] == '\x89' && magic[1] == 'P') return detail::decode_png_bytes(path);
    if (magic[0] == 'P' && (magic[1] == '6' || magic[1] == '5')) return detail::decode_ppm(path);
    throw DataError("image load: '" + path + "' is neither PNG nor binary PPM");
}

inline void save_png(const Image& img, const std::string& path) {
    png_image out;
    std::memset(&out, 0, sizeof(out));
    out.version = PNG_IMAGE_VERSION;
    out.width = static_cast<png_uint_32>(img.w);
    out.height = static_cast<png_uint_32>(img.h);
    out.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buf(img.px.size());
    for (std::size_t i = 0; i < img.px.size(); ++i) {
        const double v = std::min(1.0, std::max(0.0, img.px[i]));
        buf[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    if (!png_image_write_to_file(&out, path.c_str(), 0, buf.data(), 0, nullptr))
        throw DataError("image save: cannot write '" + path + "': " + out.message);
}

inline std::vector<std::uint8_t> encode_png(const Image& img) {
    png_image out;
    std::memset(&out, 0, sizeof(out));
    out.version = PNG_IMAGE_VERSION;
    out.width = static_cast<png_uint_32>(img.w);
    out.height = static_cast<png_uint_32>(img.h);
    out.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> rgb(img.px.size());
    for (std::size_t i = 0; i < img.px.size(); ++i) {
        const double v = std::min(1.0, std::max(0.0, img.px[i]));
        rgb[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&out, nullptr, &size, 0, rgb.data(), 0, nullptr))
        throw DataError(std::string("image encode: ") + out.message);
    std::vector<std::uint8_t> mem(size);
    if (!png_image_write_to_memory(&out, mem.data(), &size, 0, rgb.data(), 0, nullptr))
        throw DataError(std::string("image encode: ") + out.message);
    mem.resize(size);
    return mem;
}

/// Bilinear resampling with half-pixel centers and edge clamping.
inline Image bilinear_resize(const Image& src, std::size_t h, std::size_t w) {
    if (src.h == 0 || src.w == 0) throw DataError("bilinear_resize: empty source image");
    if (src.h == h && src.w == w) return src;
    Image dst(h, w);
    const double sy = static_cast<double>(src.h) / static_cast<double>(h);
    const double sx = static_cast<double>(src.w) / static_cast<double>(w);
    for (std::size_t y = 0; y < h; ++y) {
        const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
        const std::ptrdiff_t y0f = static_cast<std::ptrdiff_t>(std::floor(fy));
        const double wy = fy - static_cast<double>(y0f);
        const std::size_t y0 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(
            y0f, 0, static_cast<std::ptrdiff_t>(src.h) - 1));
        const std::size_t y1 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(
            y0f + 1, 0, static_cast<std::ptrdiff_t>(src.h) - 1));
        for (std::size_t x = 0; x < w; ++x) {
            const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
            const std::ptrdiff_t x0f = static_cast<std::ptrdiff_t>(std::floor(fx));
            const double wx = fx - static_cast<double>(x0f);
            const std::size_t x0 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(
                x0f, 0, static_cast<std::ptrdiff_t>(src.w) - 1));
            const std::size_t x1 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(
                x0f + 1, 0, static_cast<std::ptrdiff_t>(src.w) - 1));
            for (std::size_t c = 0; c < 3; ++c) {
                const double top = src.at(y0, x0, c) * (1.0 - wx) + src.at(y0, x1, c) * wx;
                const double bot = src.at(y1, x0, c) * (1.0 - wx) + src.at(y1, x1, c) * wx;
                dst.at(y, x, c) = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    return dst;
}

constexpr std::size_t kStandardSide = 224;

/// Decode, convert to RGB in [0,1], and resize to the standard 224x224.
inline Image load_and_standardize(const std::string& path) {
    return bilinear_resize(load_image(path), kStandardSide, kStandardSide);
}

/// Row-major partition of a diagram into n equal square patches.
struct PatchGrid {
    std::size_t grid_side = 0;
    std::size_t patch_h = 0, patch_w = 0;
    std::vector<Image> patches;
};

inline PatchGrid split_patches(const Image& img, std::size_t n) {
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (n == 0 || side * side != n)
        throw ConfigError("split_patches: patch count " + std::to_string(n) +
                          " is not a perfect square");
    if (img.h % side != 0 || img.w % side != 0)
        throw ConfigError("split_patches: grid " + std::to_string(side) + "x" +
                          std::to_string(side) + " does not divide " + std::to_string(img.h) +
                          "x" + std::to_string(img.w));
    PatchGrid grid;
    grid.grid_side = side;
    grid.patch_h = img.h / side;
    grid.patch_w = img.w / side;
    grid.patches.reserve(n);
    for (std::size_t gy = 0; gy < side; ++gy)
        for (std::size_t gx = 0; gx < side; ++gx) {
            Image p(grid.patch_h, grid.patch_w);
            for (std::size_t y = 0; y < grid.patch_h; ++y)
                for (std::size_t x = 0; x < grid.patch_w; ++x)
                    for (std::size_t c = 0; c < 3; ++c)
                        p.at(y, x, c) = img.at(gy * grid.patch_h + y, gx * grid.patch_w + x, c);
            grid.patches.push_back(std::move(p));
        }
    return grid;
}

inline Image reassemble(const PatchGrid& grid) {
    Image img(grid.grid_side * grid.patch_h, grid.grid_side * grid.patch_w);
    for (std::size_t i = 0; i < grid.patches.size(); ++i) {
        const std::size_t gy = i / grid.grid_side, gx = i % grid.grid_side;
        const Image& p = grid.patches[i];
        for (std::size_t y = 0; y < grid.patch_h; ++y)
            for (std::size_t x = 0; x < grid.patch_w; ++x)
                for (std::size_t c = 0; c < 3; ++c)
                    img.at(gy * grid.patch_h + y, gx * grid.patch_w + x, c) = p.at(y, x, c);
    }
    return img;
}

inline Tensor image_to_tensor(const Image& img) {
    return Tensor::from_data({img.h, img.w, 3}, img.px);
}

} // namespace gptr
