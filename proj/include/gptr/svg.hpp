#pragma once

// Detection overlays as standalone SVG: the raster rides along as a base64
// PNG layer, boxes and labels are vector elements on top.

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "gptr/eval.hpp"
#include "gptr/image.hpp"

namespace gptr {
namespace detail {

inline std::string base64(const std::vector<std::uint8_t>& in) {
    static const char tab[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 3 <= in.size(); i += 3) {
        const unsigned v = unsigned(in[i]) << 16 | unsigned(in[i + 1]) << 8 | in[i + 2];
        out += tab[v >> 18];
        out += tab[(v >> 12) & 63];
        out += tab[(v >> 6) & 63];
        out += tab[v & 63];
    }
    if (i + 1 == in.size()) {
        const unsigned v = unsigned(in[i]) << 16;
        out += tab[v >> 18];
        out += tab[(v >> 12) & 63];
        out += "==";
    } else if (i + 2 == in.size()) {
        const unsigned v = unsigned(in[i]) << 16 | unsigned(in[i + 1]) << 8;
        out += tab[v >> 18];
        out += tab[(v >> 12) & 63];
        out += tab[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

inline const char* overlay_color(int k) {
    static const char* palette[] = {"#e6194b", "#3cb44b", "#4363d8", "#f58231",
                                    "#911eb4", "#46f0f0", "#f032e6", "#9a6324"};
    return palette[((k % 8) + 8) % 8];
}

inline std::string fmt1(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '&') out += "&amp;";
        else if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else out += c;
    }
    return out;
}

} // namespace detail

/// Renders `img` with one labeled rectangle per detection. Boxes are in
/// normalized center/size form and map onto the raster's own pixel grid;
/// `labels` supplies the printed text per detection.
inline std::string svg_overlay(const Image& img, const std::vector<Detection>& dets,
                               const std::vector<std::string>& labels) {
    if (labels.size() != dets.size())
        throw std::invalid_argument("svg_overlay: " + std::to_string(dets.size()) +
                                    " detections but " + std::to_string(labels.size()) +
                                    " labels");
    const std::string w = std::to_string(img.w), h = std::to_string(img.h);
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" "
                    "xmlns:xlink=\"http://www.w3.org/1999/xlink\" width=\"" +
                    w + "\" height=\"" + h + "\" viewBox=\"0 0 " + w + " " + h + "\">\n";
    s += "<image width=\"" + w + "\" height=\"" + h + "\" xlink:href=\"data:image/png;base64," +
         detail::base64(encode_png(img)) + "\"/>\n";
    for (std::size_t i = 0; i < dets.size(); ++i) {
        const Detection& d = dets[i];
        const double bw = d.box[2] * double(img.w), bh = d.box[3] * double(img.h);
        const double bx = d.box[0] * double(img.w) - bw / 2.0;
        const double by = d.box[1] * double(img.h) - bh / 2.0;
        const char* color = detail::overlay_color(d.category);
        s += "<rect x=\"" + detail::fmt1(bx) + "\" y=\"" + detail::fmt1(by) + "\" width=\"" +
             detail::fmt1(bw) + "\" height=\"" + detail::fmt1(bh) + "\" fill=\"none\" stroke=\"" +
             color + "\" stroke-width=\"2\"/>\n";
        s += "<text x=\"" + detail::fmt1(bx + 2.0) + "\" y=\"" + detail::fmt1(by - 4.0) +
             "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" + color + "\">" +
             detail::xml_escape(labels[i]) + "</text>\n";
    }
    s += "</svg>\n";
    return s;
}

} // namespace gptr
