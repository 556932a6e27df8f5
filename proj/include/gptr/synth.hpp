#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "gptr/errors.hpp"
#include "gptr/image.hpp"
#include "gptr/rng.hpp"

namespace gptr {

// ---------------------------------------------------------------------------
// Dataset model (COCO-subset schema)
// ---------------------------------------------------------------------------

struct Category {
    int id = 0;
    std::string name;
};

/// One labeled box: center/size normalized to [0,1].
struct BoxAnn {
    std::array<double, 4> box{};  // cx, cy, w, h
    int category = 0;
};

struct DatasetItem {
    int image_id = 0;
    std::string file_name;
    std::size_t width = 0, height = 0;
    std::vector<BoxAnn> anns;
};

struct Dataset {
    std::vector<Category> categories;
    std::vector<DatasetItem> items;
    std::string root_dir;  // directory of the JSON file; image paths resolve against it

    std::size_t category_count() const { return categories.size(); }
};

inline std::string dir_of(const std::string& path) {
    const auto pos = path.find_last_of('/');
    return pos == std::string::npos ? std::string(".") : path.substr(0, pos);
}

inline void dataset_write(const Dataset& ds, const std::string& path) {
    nlohmann::json j;
    j["format"] = "gptr-dataset";
    j["version"] = 1;
    j["categories"] = nlohmann::json::array();
    for (const auto& c : ds.categories)
        j["categories"].push_back({{"id", c.id}, {"name", c.name}});
    j["images"] = nlohmann::json::array();
    j["annotations"] = nlohmann::json::array();
    int ann_id = 0;
    for (const auto& item : ds.items) {
        j["images"].push_back({{"id", item.image_id},
                               {"file_name", item.file_name},
                               {"width", item.width},
                               {"height", item.height}});
        for (const auto& a : item.anns) {
            const double w = a.box[2] * static_cast<double>(item.width);
            const double h = a.box[3] * static_cast<double>(item.height);
            const double x = a.box[0] * static_cast<double>(item.width) - w / 2.0;
            const double y = a.box[1] * static_cast<double>(item.height) - h / 2.0;
            j["annotations"].push_back({{"id", ann_id++},
                                        {"image_id", item.image_id},
                                        {"category_id", a.category},
                                        {"bbox", {x, y, w, h}}});
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("dataset write: cannot open '" + path + "'");
    out << j.dump(1) << "\n";
}

inline Dataset dataset_read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("dataset read: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("dataset read: '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object() || j.value("format", "") != "gptr-dataset")
        throw DataError("dataset read: '" + path + "' missing format tag \"gptr-dataset\"");
    if (!j.contains("categories") || !j["categories"].is_array() || j["categories"].empty())
        throw DataError("dataset read: categories must be a non-empty array");
    if (!j.contains("images") || !j["images"].is_array())
        throw DataError("dataset read: images must be an array");
    if (!j.contains("annotations") || !j["annotations"].is_array())
        throw DataError("dataset read: annotations must be an array");

    Dataset ds;
    ds.root_dir = dir_of(path);
    std::map<int, std::size_t> cat_ids;
    for (std::size_t i = 0; i < j["categories"].size(); ++i) {
        const auto& c = j["categories"][i];
        const std::string where = "categories[" + std::to_string(i) + "]";
        if (!c.is_object() || !c.contains("id") || !c.contains("name"))
            throw DataError("dataset read: " + where + " needs id and name");
        Category cat{c["id"].get<int>(), c["name"].get<std::string>()};
        if (cat_ids.count(cat.id))
            throw DataError("dataset read: " + where + " duplicates id " + std::to_string(cat.id));
        cat_ids[cat.id] = i;
        ds.categories.push_back(std::move(cat));
    }
    std::map<int, std::size_t> image_index;
    for (std::size_t i = 0; i < j["images"].size(); ++i) {
        const auto& im = j["images"][i];
        const std::string where = "images[" + std::to_string(i) + "]";
        if (!im.is_object() || !im.contains("id") || !im.contains("file_name") ||
            !im.contains("width") || !im.contains("height"))
            throw DataError("dataset read: " + where + " needs id, file_name, width, height");
        DatasetItem item;
        item.image_id = im["id"].get<int>();
        item.file_name = im["file_name"].get<std::string>();
        item.width = im["width"].get<std::size_t>();
        item.height = im["height"].get<std::size_t>();
        if (item.width == 0 || item.height == 0)
            throw DataError("dataset read: " + where + " has zero dimensions");
        if (image_index.count(item.image_id))
            throw DataError("dataset read: " + where + " duplicates image id " +
                            std::to_string(item.image_id));
        image_index[item.image_id] = ds.items.size();
        ds.items.push_back(std::move(item));
    }
    for (std::size_t i = 0; i < j["annotations"].size(); ++i) {
        const auto& a = j["annotations"][i];
        const std::string where = "annotations[" + std::to_string(i) + "]";
        if (!a.is_object() || !a.contains("image_id") || !a.contains("category_id") ||
            !a.contains("bbox"))
            throw DataError("dataset read: " + where + " needs image_id, category_id, bbox");
        const int image_id = a["image_id"].get<int>();
        auto img_it = image_index.find(image_id);
        if (img_it == image_index.end())
            throw DataError("dataset read: " + where + ".image_id references missing image " +
                            std::to_string(image_id));
        const int cat = a["category_id"].get<int>();
        if (!cat_ids.count(cat))
            throw DataError("dataset read: " + where + ".category_id references missing category " +
                            std::to_string(cat));
        if (!a["bbox"].is_array() || a["bbox"].size() != 4)
            throw DataError("dataset read: " + where + ".bbox must be [x, y, w, h]");
        DatasetItem& item = ds.items[img_it->second];
        const double W = static_cast<double>(item.width), H = static_cast<double>(item.height);
        const double x = a["bbox"][0].get<double>(), y = a["bbox"][1].get<double>();
        const double w = a["bbox"][2].get<double>(), h = a["bbox"][3].get<double>();
        if (w <= 0.0 || h <= 0.0)
            throw DataError("dataset read: " + where + ".bbox has non-positive size");
        if (x < -1e-6 || y < -1e-6 || x + w > W + 1e-6 || y + h > H + 1e-6)
            throw DataError("dataset read: " + where + ".bbox leaves the image bounds");
        BoxAnn ann;
        ann.box = {(x + w / 2.0) / W, (y + h / 2.0) / H, w / W, h / H};
        ann.category = cat;
        item.anns.push_back(ann);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation
// ---------------------------------------------------------------------------

enum class ShapeKind { Circle, Rect, Triangle, Arrow };

inline ShapeKind shape_from_name(const std::string& s) {
    if (s == "circle") return ShapeKind::Circle;
    if (s == "rect") return ShapeKind::Rect;
    if (s == "triangle") return ShapeKind::Triangle;
    if (s == "arrow") return ShapeKind::Arrow;
    throw ConfigError("corpus spec: unknown shape '" + s + "'");
}

inline std::array<double, 3> color_from_name(const std::string& s) {
    static const std::map<std::string, std::array<double, 3>> palette = {
        {"red", {0.85, 0.10, 0.10}},   {"green", {0.05, 0.60, 0.20}},
        {"blue", {0.10, 0.20, 0.85}},  {"orange", {0.95, 0.55, 0.05}},
        {"purple", {0.55, 0.10, 0.70}}, {"teal", {0.00, 0.60, 0.60}},
        {"black", {0.05, 0.05, 0.05}}, {"gray", {0.50, 0.50, 0.50}},
    };
    auto it = palette.find(s);
    if (it != palette.end()) return it->second;
    // fall back to "r,g,b" floats
    std::array<double, 3> c{};
    std::istringstream ss(s);
    std::string part;
    for (int i = 0; i < 3; ++i) {
        if (!std::getline(ss, part, ','))
            throw ConfigError("corpus spec: unknown color '" + s + "'");
        try {
            c[i] = std::stod(part);
        } catch (...) {
            throw ConfigError("corpus spec: unknown color '" + s + "'");
        }
        if (c[i] < 0.0 || c[i] > 1.0)
            throw ConfigError("corpus spec: color component out of [0,1] in '" + s + "'");
    }
    return c;
}

struct SynthCategory {
    std::string name;
    ShapeKind shape = ShapeKind::Circle;
    std::array<double, 3> color{};
    double weight = 1.0;
};

/// Plain-text corpus description: `key = value` lines, `#` comments, one
/// `category = name shape color weight` line per class.
struct SynthSpec {
    std::size_t objects_min = 1, objects_max = 3;
    double size_min = 0.08, size_max = 0.22;   // half-extent, normalized
    double max_overlap = 0.05;                 // IoU ceiling between boxes
    std::string placement = "random";          // or "center"
    std::vector<SynthCategory> categories;

    void validate() const {
        if (categories.empty()) throw ConfigError("corpus spec: no categories declared");
        if (objects_min > objects_max)
            throw ConfigError("corpus spec: objects_min exceeds objects_max");
        if (size_min <= 0.0 || size_max > 0.45 || size_min > size_max)
            throw ConfigError("corpus spec: sizes must satisfy 0 < size_min <= size_max <= 0.45");
        if (max_overlap < 0.0 || max_overlap > 1.0)
            throw ConfigError("corpus spec: max_overlap must lie in [0,1]");
        if (placement != "random" && placement != "center")
            throw ConfigError("corpus spec: placement must be 'random' or 'center'");
        for (const auto& c : categories)
            if (c.weight <= 0.0)
                throw ConfigError("corpus spec: category '" + c.name +
                                  "' needs a positive weight");
    }
};

inline SynthSpec parse_synth_spec(std::istream& in) {
    SynthSpec spec;
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("corpus spec line " + std::to_string(lineno) +
                              ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        try {
            if (key == "objects_min") {
                spec.objects_min = std::stoul(val);
            } else if (key == "objects_max") {
                spec.objects_max = std::stoul(val);
            } else if (key == "size_min") {
                spec.size_min = std::stod(val);
            } else if (key == "size_max") {
                spec.size_max = std::stod(val);
            } else if (key == "max_overlap") {
                spec.max_overlap = std::stod(val);
            } else if (key == "placement") {
                spec.placement = val;
            } else if (key == "category") {
                std::istringstream ss(val);
                SynthCategory cat;
                std::string shape, color;
                if (!(ss >> cat.name >> shape >> color >> cat.weight))
                    throw ConfigError("corpus spec line " + std::to_string(lineno) +
                                      ": category needs 'name shape color weight'");
                cat.shape = shape_from_name(shape);
                cat.color = color_from_name(color);
                spec.categories.push_back(std::move(cat));
            } else {
                throw ConfigError("corpus spec line " + std::to_string(lineno) +
                                  ": unknown key '" + key + "'");
            }
        } catch (const ConfigError&) {
            throw;
        } catch (...) {
            throw ConfigError("corpus spec line " + std::to_string(lineno) +
                              ": malformed value '" + val + "'");
        }
    }
    spec.validate();
    return spec;
}

inline SynthSpec load_synth_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("corpus spec: cannot open '" + path + "'");
    return parse_synth_spec(in);
}

inline SynthSpec default_synth_spec() {
    SynthSpec spec;
    spec.categories = {
        {"red-circle", ShapeKind::Circle, color_from_name("red"), 1.0},
        {"blue-rect", ShapeKind::Rect, color_from_name("blue"), 1.0},
        {"green-triangle", ShapeKind::Triangle, color_from_name("green"), 1.0},
    };
    return spec;
}

namespace detail {

struct ObjectGeom {
    ShapeKind shape;
    double cx, cy, hx, hy;  // pixel center and half-extents
    int orient = 0;         // arrows: 0 right, 1 left, 2 down, 3 up
};

inline bool inside_shape(const ObjectGeom& g, double px, double py) {
    const double dx = px - g.cx, dy = py - g.cy;
    switch (g.shape) {
        case ShapeKind::Circle: {
            const double nx = dx / g.hx, ny = dy / g.hy;
            return nx * nx + ny * ny <= 1.0;
        }
        case ShapeKind::Rect:
            return std::fabs(dx) <= g.hx && std::fabs(dy) <= g.hy;
        case ShapeKind::Triangle: {
            // apex up: vertices (0,-hy), (-hx,hy), (hx,hy)
            if (dy < -g.hy || dy > g.hy) return false;
            const double half_width = g.hx * (dy + g.hy) / (2.0 * g.hy);
            return std::fabs(dx) <= half_width;
        }
        case ShapeKind::Arrow: {
            // canonical arrow points right along x; rotate the query into it
            double ax = dx, ay = dy;
            if (g.orient == 1) ax = -dx;                 // left
            if (g.orient == 2) { ax = dy; ay = dx; }     // down
            if (g.orient == 3) { ax = -dy; ay = dx; }    // up
            const double head = std::min(0.6 * g.hx, 2.0 * g.hy);
            const double shaft = std::max(1.5, 0.35 * g.hy);
            if (ax >= g.hx - head) {
                // triangular head narrowing toward the tip
                const double t = (g.hx - ax) / head;  // 1 at base, 0 at tip
                return std::fabs(ay) <= g.hy * t;
            }
            return ax >= -g.hx && std::fabs(ay) <= shaft;
        }
    }
    return false;
}

// Rasterize by pixel-center test; returns the tight pixel box or false if empty.
inline bool rasterize(const ObjectGeom& g, std::size_t side, std::vector<std::uint8_t>& mask,
                      std::size_t& x0, std::size_t& y0, std::size_t& x1, std::size_t& y1) {
    mask.assign(side * side, 0);
    bool any = false;
    x0 = y0 = side;
    x1 = y1 = 0;
    const bool rot = g.shape == ShapeKind::Arrow && g.orient >= 2;
    const double ex = rot ? g.hy : g.hx, ey = rot ? g.hx : g.hy;
    const auto lo_x = static_cast<std::size_t>(std::max(0.0, std::floor(g.cx - ex - 2)));
    const auto lo_y = static_cast<std::size_t>(std::max(0.0, std::floor(g.cy - ey - 2)));
    const auto hi_x = std::min(side, static_cast<std::size_t>(std::max(0.0, g.cx + ex + 3)));
    const auto hi_y = std::min(side, static_cast<std::size_t>(std::max(0.0, g.cy + ey + 3)));
    for (std::size_t y = lo_y; y < hi_y; ++y)
        for (std::size_t x = lo_x; x < hi_x; ++x)
            if (inside_shape(g, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) {
                mask[y * side + x] = 1;
                any = true;
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    return any;
}

inline double box_iou_simple(const std::array<double, 4>& a, const std::array<double, 4>& b) {
    const double ax0 = a[0] - a[2] / 2, ax1 = a[0] + a[2] / 2;
    const double ay0 = a[1] - a[3] / 2, ay1 = a[1] + a[3] / 2;
    const double bx0 = b[0] - b[2] / 2, bx1 = b[0] + b[2] / 2;
    const double by0 = b[1] - b[3] / 2, by1 = b[1] + b[3] / 2;
    const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
    const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
    const double inter = iw * ih;
    const double uni = a[2] * a[3] + b[2] * b[3] - inter;
    return uni <= 0.0 ? 0.0 : inter / uni;
}

} // namespace detail

struct GeneratedItem {
    Image image;
    std::vector<BoxAnn> anns;
};

/// Renders one diagram. Ground-truth boxes are the tight boxes of each
/// object's own rasterized pixels, so re-deriving boxes from pixels is exact.
inline GeneratedItem synth_render_item(const SynthSpec& spec, std::uint64_t item_seed,
                                       std::size_t side = kStandardSide) {
    Rng rng(item_seed);
    GeneratedItem out;
    out.image = Image(side, side, 1.0);
    const std::size_t count =
        spec.objects_min +
        (spec.objects_max > spec.objects_min
             ? static_cast<std::size_t>(rng.uniform_int(
                   0, static_cast<std::int64_t>(spec.objects_max - spec.objects_min)))
             : 0);
    double total_weight = 0.0;
    for (const auto& c : spec.categories) total_weight += c.weight;

    std::vector<std::uint8_t> mask;
    for (std::size_t obj = 0; obj < count; ++obj) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            // category by cumulative weight
            double pick = rng.uniform(0.0, total_weight);
            std::size_t ci = 0;
            for (; ci + 1 < spec.categories.size(); ++ci) {
                if (pick < spec.categories[ci].weight) break;
                pick -= spec.categories[ci].weight;
            }
            const SynthCategory& cat = spec.categories[ci];

            detail::ObjectGeom g;
            g.shape = cat.shape;
            const double size = rng.uniform(spec.size_min, spec.size_max);
            g.hx = size * static_cast<double>(side);
            g.hy = g.hx;
            if (cat.shape == ShapeKind::Rect) g.hy = g.hx * rng.uniform(0.5, 1.0);
            if (cat.shape == ShapeKind::Arrow) {
                g.hy = g.hx * rng.uniform(0.35, 0.55);
                g.orient = static_cast<int>(rng.uniform_int(0, 3));
            }
            const double ex = (g.orient >= 2) ? g.hy : g.hx;  // rotated extents
            const double ey = (g.orient >= 2) ? g.hx : g.hy;
            if (spec.placement == "center") {
                g.cx = g.cy = static_cast<double>(side) / 2.0;
            } else {
                const double margin = 2.0;
                g.cx = rng.uniform(ex + margin, static_cast<double>(side) - ex - margin);
                g.cy = rng.uniform(ey + margin, static_cast<double>(side) - ey - margin);
            }

            std::size_t x0, y0, x1, y1;
            if (!detail::rasterize(g, side, mask, x0, y0, x1, y1)) continue;
            BoxAnn ann;
            const double s = static_cast<double>(side);
            ann.box = {(static_cast<double>(x0 + x1 + 1)) / 2.0 / s,
                       (static_cast<double>(y0 + y1 + 1)) / 2.0 / s,
                       static_cast<double>(x1 - x0 + 1) / s,
                       static_cast<double>(y1 - y0 + 1) / s};
            ann.category = static_cast<int>(ci);

            bool collides = false;
            for (const auto& prev : out.anns)
                if (detail::box_iou_simple(ann.box, prev.box) > spec.max_overlap) {
                    collides = true;
                    break;
                }
            if (collides) continue;

            for (std::size_t y = y0; y <= y1; ++y)
                for (std::size_t x = x0; x <= x1; ++x)
                    if (mask[y * side + x])
                        for (std::size_t c = 0; c < 3; ++c)
                            out.image.at(y, x, c) = cat.color[c];
            out.anns.push_back(ann);
            placed = true;
        }
        if (!placed)
            throw DataError("corpus generation: could not place object " + std::to_string(obj) +
                            " within 100 attempts; relax max_overlap or sizes");
    }
    return out;
}

/// Deterministic corpus: item i derives its own stream from (seed, start+i),
/// so disjoint index ranges extend the same corpus.
inline std::vector<GeneratedItem> synth_generate(const SynthSpec& spec, std::uint64_t seed,
                                                 std::size_t count, std::size_t start_index = 0) {
    spec.validate();
    std::vector<GeneratedItem> items;
    items.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        items.push_back(synth_render_item(
            spec, Rng::derive_seed(seed, static_cast<std::uint64_t>(start_index + i))));
    return items;
}

/// Renders a corpus slice and writes PNGs plus dataset.json under `dir`.
/// Image ids restart at zero within each written slice.
inline Dataset synth_write_corpus(const SynthSpec& spec, std::uint64_t seed, std::size_t count,
                                  std::size_t start_index, const std::string& dir) {
    const auto items = synth_generate(spec, seed, count, start_index);
    std::filesystem::create_directories(dir);
    Dataset ds;
    ds.root_dir = dir;
    for (std::size_t c = 0; c < spec.categories.size(); ++c)
        ds.categories.push_back({static_cast<int>(c), spec.categories[c].name});
    for (std::size_t i = 0; i < items.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "img_%05zu.png", i);
        save_png(items[i].image, dir + "/" + name);
        DatasetItem item;
        item.image_id = static_cast<int>(i);
        item.file_name = name;
        item.width = items[i].image.w;
        item.height = items[i].image.h;
        item.anns = items[i].anns;
        ds.items.push_back(std::move(item));
    }
    dataset_write(ds, dir + "/dataset.json");
    return ds;
}

} // namespace gptr
