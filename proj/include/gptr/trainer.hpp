#pragma once

// Training, evaluation and inference entry points shared by the CLI and the
// test harness. Every run is a deterministic function of the config: item
// order, dropout draws and optimizer state derive from cfg.seed alone, and
// artifacts are written with stable byte-level formatting.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "gptr/eval.hpp"
#include "gptr/matching.hpp"
#include "gptr/model.hpp"
#include "gptr/svg.hpp"
#include "gptr/synth.hpp"

namespace gptr {
namespace detail {

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw DataError("write to '" + path + "' failed");
}

} // namespace detail

// ---------------------------------------------------------------------------
// Dataset preparation
// ---------------------------------------------------------------------------

/// One training/eval item with everything precomputed: images are decoded and
/// patch descriptors extracted once, then reused every epoch. Categories are
/// carried as dense class indices (position in the dataset's category list).
struct PreparedItem {
    PreparedImage in;
    std::vector<std::array<double, 4>> gt_boxes;
    std::vector<std::size_t> gt_cats;
};

inline std::map<int, std::size_t> category_index(const Dataset& ds) {
    std::map<int, std::size_t> idx;
    for (std::size_t i = 0; i < ds.categories.size(); ++i) idx[ds.categories[i].id] = i;
    return idx;
}

inline std::vector<PreparedItem> prepare_dataset(const Dataset& ds) {
    const auto idx = category_index(ds);
    std::vector<PreparedItem> out;
    out.reserve(ds.items.size());
    for (const auto& item : ds.items) {
        PreparedItem p;
        p.in = prepare_image(load_and_standardize(ds.root_dir + "/" + item.file_name));
        for (const auto& a : item.anns) {
            const auto it = idx.find(a.category);
            if (it == idx.end())
                throw DataError("dataset: image '" + item.file_name +
                                "' references unknown category " + std::to_string(a.category));
            p.gt_boxes.push_back(a.box);
            p.gt_cats.push_back(it->second);
        }
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Predictions -> detections / loss
// ---------------------------------------------------------------------------

/// One detection per query: the most probable class wins (ties toward the
/// lower index). `category` holds the dense class index; callers translate
/// to dataset category ids when serializing. Sorted in canonical order.
inline std::vector<Detection> extract_detections(const Tensor& class_probs, const Tensor& boxes) {
    const std::size_t m = class_probs.rows(), c = class_probs.cols();
    std::vector<Detection> out;
    out.reserve(m);
    for (std::size_t q = 0; q < m; ++q) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < c; ++k)
            if (class_probs.at(q, k) > class_probs.at(q, best)) best = k;
        out.push_back({{boxes.at(q, 0), boxes.at(q, 1), boxes.at(q, 2), boxes.at(q, 3)},
                       static_cast<int>(best), class_probs.at(q, best)});
    }
    std::sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.category != b.category) return a.category < b.category;
        return a.box < b.box;
    });
    return out;
}

/// Set-prediction loss for one item, re-matching each decoder layer
/// independently. Images without objects fall back to the pure
/// classification term inside total_loss.
inline Tensor item_loss(const DecoderOutput& dec, const std::vector<std::array<double, 4>>& gt_boxes,
                        const std::vector<std::size_t>& gt_cats, bool aux,
                        const LossCoeffs& co = {}) {
    const std::size_t layers = dec.boxes.size();
    Tensor sum;
    for (std::size_t l = aux ? 0 : layers - 1; l < layers; ++l) {
        MatchResult m;
        if (!gt_boxes.empty())
            m = match_predictions(dec.class_probs[l], dec.boxes[l], gt_boxes, gt_cats, co);
        Tensor t = total_loss(dec.class_probs[l], dec.boxes[l], gt_boxes, gt_cats, m, co);
        sum = sum.defined() ? add(sum, t) : t;
    }
    return sum;
}

/// Inference-mode detections and metrics over prepared items, in class-index
/// space.
inline EvalReport evaluate_model(const ParameterStore& store, const RunConfig& cfg,
                                 const std::vector<PreparedItem>& items) {
    std::vector<std::vector<Detection>> dets(items.size());
    std::vector<std::vector<TruthBox>> gts(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        ModelOutput out = model_forward(store, cfg, items[i].in);
        dets[i] = extract_detections(out.dec.class_probs.back(), out.dec.boxes.back());
        for (std::size_t g = 0; g < items[i].gt_boxes.size(); ++g)
            gts[i].push_back({items[i].gt_boxes[g], static_cast<int>(items[i].gt_cats[g])});
    }
    return evaluate(dets, gts);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochStat {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double ap = 0.0;
    double ap50 = 0.0;
};

struct TrainResult {
    std::vector<EpochStat> log;
    std::string checkpoint_path, log_path, config_path;
};

inline std::string epoch_log_line(const EpochStat& st) {
    return nlohmann::json{{"epoch", st.epoch},
                          {"train_loss", st.train_loss},
                          {"ap", st.ap},
                          {"ap50", st.ap50}}
               .dump() +
           "\n";
}

using EpochCallback = std::function<void(const EpochStat&)>;

inline TrainResult run_train(const RunConfig& cfg, const EpochCallback& on_epoch = {}) {
    validate_config(cfg);
    if (cfg.dataset.empty()) throw ConfigError("train: config needs a dataset path");
    if (cfg.output.empty()) throw ConfigError("train: config needs an output directory");

    const Dataset ds = dataset_read(cfg.dataset);
    if (ds.items.empty()) throw DataError("train: dataset '" + cfg.dataset + "' has no items");
    const std::vector<PreparedItem> items = prepare_dataset(ds);

    std::filesystem::create_directories(cfg.output);
    TrainResult res;
    res.config_path = cfg.output + "/config.txt";
    res.log_path = cfg.output + "/train_log.jsonl";
    res.checkpoint_path = cfg.checkpoint.empty() ? cfg.output + "/checkpoint.json"
                                                 : cfg.checkpoint;
    detail::write_text_file(res.config_path, write_config_text(cfg));

    ParameterStore store;
    {
        Rng init_rng(cfg.seed);
        declare_model(store, cfg, ds.category_count(), init_rng);
    }
    if (cfg.epochs == 0) {
        // initialization checkpoint, empty log
        save_params(store, res.checkpoint_path);
        detail::write_text_file(res.log_path, "");
        return res;
    }

    Rng order_rng(cfg.seed + 1);
    Rng drop_rng(cfg.seed + 2);
    AdamW opt(cfg.lr, cfg.weight_decay);
    std::string log_text;
    double best_ap = -1.0, best_ap50 = -1.0;

    std::vector<std::size_t> perm(items.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::vector<std::vector<TruthBox>> gts(items.size());
    for (std::size_t i = 0; i < items.size(); ++i)
        for (std::size_t g = 0; g < items[i].gt_boxes.size(); ++g)
            gts[i].push_back({items[i].gt_boxes[g], static_cast<int>(items[i].gt_cats[g])});

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = perm.size(); i > 1; --i)
            std::swap(perm[i - 1],
                      perm[static_cast<std::size_t>(order_rng.uniform_int(0, int64_t(i) - 1))]);

        double loss_sum = 0.0;
        std::vector<std::vector<Detection>> dets(items.size());
        for (std::size_t b0 = 0; b0 < perm.size(); b0 += cfg.batch_size) {
            const std::size_t b1 = std::min(perm.size(), b0 + cfg.batch_size);
            store.zero_grads();  // unused parameters still need buffers for the step
            for (std::size_t k = b0; k < b1; ++k) {
                const PreparedItem& it = items[perm[k]];
                TrainContext tc{true, cfg.dropout, &drop_rng};
                ModelOutput out = model_forward(store, cfg, it.in, tc);
                Tensor loss = item_loss(out.dec, it.gt_boxes, it.gt_cats, cfg.aux_loss);
                loss_sum += loss.value();
                backward(mul_scalar(loss, 1.0 / static_cast<double>(b1 - b0)));
                // the epoch metrics reuse the training forwards
                dets[perm[k]] = extract_detections(out.dec.class_probs.back(),
                                                   out.dec.boxes.back());
            }
            opt.step(store);
        }

        const EvalReport rep = evaluate(dets, gts);
        EpochStat st{epoch, loss_sum / static_cast<double>(items.size()), rep.ap, rep.ap50};
        res.log.push_back(st);
        log_text += epoch_log_line(st);
        if (on_epoch) on_epoch(st);
        if (st.ap > best_ap || (st.ap == best_ap && st.ap50 > best_ap50)) {
            best_ap = st.ap;
            best_ap50 = st.ap50;
            save_params(store, res.checkpoint_path);
        }
    }
    detail::write_text_file(res.log_path, log_text);
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline nlohmann::json report_to_json(const EvalReport& rep) {
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [cat, ap] : rep.per_category) per[std::to_string(cat)] = ap;
    return {{"ap", rep.ap},          {"ap50", rep.ap50},
            {"ap75", rep.ap75},      {"ap_s", rep.ap_s},
            {"ap_m", rep.ap_m},      {"ap_l", rep.ap_l},
            {"per_category", per},   {"images", rep.images},
            {"gt_boxes", rep.gt_boxes}, {"detections", rep.detections}};
}

struct EvalResult {
    EvalReport report;
    nlohmann::json json;
};

/// Evaluates cfg.checkpoint on cfg.dataset. Reported categories use the
/// dataset's category ids.
inline EvalResult run_eval(const RunConfig& cfg) {
    validate_config(cfg);
    if (cfg.dataset.empty()) throw ConfigError("eval: config needs a dataset path");
    if (cfg.checkpoint.empty()) throw ConfigError("eval: config needs a checkpoint path");

    const Dataset ds = dataset_read(cfg.dataset);
    if (ds.items.empty()) throw DataError("eval: dataset '" + cfg.dataset + "' has no items");
    const std::vector<PreparedItem> items = prepare_dataset(ds);

    ParameterStore store;
    {
        Rng init_rng(cfg.seed);
        declare_model(store, cfg, ds.category_count(), init_rng);
    }
    load_params(store, cfg.checkpoint);

    std::vector<std::vector<Detection>> dets(items.size());
    std::vector<std::vector<TruthBox>> gts(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        ModelOutput out = model_forward(store, cfg, items[i].in);
        dets[i] = extract_detections(out.dec.class_probs.back(), out.dec.boxes.back());
        for (Detection& d : dets[i]) d.category = ds.categories[d.category].id;
        for (std::size_t g = 0; g < items[i].gt_boxes.size(); ++g)
            gts[i].push_back({items[i].gt_boxes[g],
                              ds.categories[items[i].gt_cats[g]].id});
    }

    EvalResult res;
    res.report = evaluate(dets, gts);
    res.json = report_to_json(res.report);
    if (!cfg.output.empty()) {
        std::filesystem::create_directories(cfg.output);
        detail::write_text_file(cfg.output + "/config.txt", write_config_text(cfg));
        detail::write_text_file(cfg.output + "/report.json", res.json.dump(1) + "\n");
    }
    return res;
}

// ---------------------------------------------------------------------------
// Detection on a single image
// ---------------------------------------------------------------------------

struct DetectResult {
    nlohmann::json json;
    std::string svg;  // empty unless requested
};

/// Runs the detector on one image file. Detections keep normalized boxes and
/// add pixel boxes in the source raster's coordinates; `threshold` keeps
/// detections with score >= threshold, so 0 emits every query.
inline DetectResult run_detect(const RunConfig& cfg, const std::string& image_path,
                               double threshold, bool want_svg = false) {
    validate_config(cfg);
    if (cfg.dataset.empty())
        throw ConfigError("detect: config needs a dataset path for the category set");
    if (cfg.checkpoint.empty()) throw ConfigError("detect: config needs a checkpoint path");

    const Dataset ds = dataset_read(cfg.dataset);
    const Image original = load_image(image_path);
    const Image standardized = bilinear_resize(original, kStandardSide, kStandardSide);

    ParameterStore store;
    {
        Rng init_rng(cfg.seed);
        declare_model(store, cfg, ds.category_count(), init_rng);
    }
    load_params(store, cfg.checkpoint);

    ModelOutput out = model_forward(store, cfg, prepare_image(standardized));
    std::vector<Detection> all = extract_detections(out.dec.class_probs.back(),
                                                    out.dec.boxes.back());
    std::vector<Detection> kept;
    for (const Detection& d : all)
        if (d.score >= threshold) kept.push_back(d);

    nlohmann::json list = nlohmann::json::array();
    std::vector<std::string> labels;
    for (const Detection& d : kept) {
        const Category& cat = ds.categories[d.category];
        const double pw = d.box[2] * double(original.w), ph = d.box[3] * double(original.h);
        const double px = d.box[0] * double(original.w) - pw / 2.0;
        const double py = d.box[1] * double(original.h) - ph / 2.0;
        list.push_back({{"box", d.box},
                        {"box_pixels", {px, py, pw, ph}},
                        {"category", cat.id},
                        {"category_name", cat.name},
                        {"score", d.score}});
        char buf[32];
        std::snprintf(buf, sizeof buf, " %.2f", d.score);
        labels.push_back(cat.name + buf);
    }

    DetectResult res;
    res.json = {{"image", image_path},
                {"width", original.w},
                {"height", original.h},
                {"detections", list}};
    if (want_svg) res.svg = svg_overlay(original, kept, labels);
    return res;
}

// ---------------------------------------------------------------------------
// Inspection dumps
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json matrix_json(const Tensor& t) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t r = 0; r < t.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t c = 0; c < t.cols(); ++c) row.push_back(t.at(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace detail

/// `what` == "features": raw per-patch descriptors of the image, shapes
/// (196,9), (196,4) and (196,4,E). `what` == "graph": per-level similarity
/// matrices and soft assignments from a forward pass (checkpoint parameters
/// when configured, otherwise the seeded initialization).
inline nlohmann::json run_inspect(const RunConfig& cfg, const std::string& image_path,
                                  const std::string& what) {
    validate_config(cfg);
    const Image standardized = bilinear_resize(load_image(image_path), kStandardSide,
                                               kStandardSide);
    const PreparedImage in = prepare_image(standardized);

    if (what == "features") {
        const std::size_t n = in.raw.n, E = in.raw.edge_len;
        nlohmann::json eb = nlohmann::json::array();
        for (std::size_t i = 0; i < n; ++i) {
            nlohmann::json sides = nlohmann::json::array();
            for (std::size_t s = 0; s < 4; ++s) {
                nlohmann::json vals = nlohmann::json::array();
                for (std::size_t k = 0; k < E; ++k) vals.push_back(in.raw.f_eb.at(i, s * E + k));
                sides.push_back(std::move(vals));
            }
            eb.push_back(std::move(sides));
        }
        return {{"f_cb", detail::matrix_json(in.raw.f_cb)},
                {"f_pb", detail::matrix_json(in.raw.f_pb)},
                {"f_eb", eb}};
    }
    if (what == "graph") {
        std::size_t classes = 1;  // the decoder is declared but unused here
        if (!cfg.dataset.empty()) classes = dataset_read(cfg.dataset).category_count();
        ParameterStore store;
        {
            Rng init_rng(cfg.seed);
            declare_model(store, cfg, classes, init_rng);
        }
        if (!cfg.checkpoint.empty()) load_params(store, cfg.checkpoint);

        ModelOutput out = model_forward(store, cfg, in);
        nlohmann::json levels = nlohmann::json::array();
        for (const LevelTrace& t : out.levels) {
            nlohmann::json weights = nlohmann::json::object();
            std::size_t nodes = 0;
            for (const auto& [name, w] : t.weights) {
                nodes = w.rows();
                weights[name] = detail::matrix_json(w);
            }
            nlohmann::json level = {{"nodes", nodes}, {"weights", std::move(weights)}};
            level["assignment"] =
                t.assignment.defined() ? detail::matrix_json(t.assignment) : nlohmann::json();
            levels.push_back(std::move(level));
        }
        return {{"levels", levels}};
    }
    throw ConfigError("inspect: unknown dump '" + what + "' (expected features or graph)");
}

} // namespace gptr
