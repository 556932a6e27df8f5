#pragma once

// Full detector: backbone tokens + per-patch gestalt branches, coarsened over
// a fixed pooling schedule, fused into per-level visual features that guide
// the encoder, then decoded into a fixed-size box/class set. Ablation toggles
// drop branches, fusion coefficients, the multiscale selector, or the visual
// queries entirely; disabled parts declare no parameters, so a checkpoint
// always matches exactly one configuration.

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "gptr/config.hpp"
#include "gptr/decoder.hpp"
#include "gptr/gestalt.hpp"
#include "gptr/graph.hpp"

namespace gptr {

/// Everything the forward pass needs from one standardized image.
struct PreparedImage {
    Tensor diagram;        // (S, S, 3) in [0,1]
    RawPatchFeatures raw;  // per-patch color / position / edge descriptors
};

inline PreparedImage prepare_image(const Image& img) {
    if (img.h != kStandardSide || img.w != kStandardSide)
        throw DataError("prepare_image: expected a " + std::to_string(kStandardSide) +
                        "-pixel standardized image, got " + std::to_string(img.h) + "x" +
                        std::to_string(img.w));
    return {image_to_tensor(img), compute_patch_features(split_patches(img, kGridTokens))};
}

namespace detail {

inline std::string level_name(const char* base, std::size_t l) {
    return std::string(base) + ".l" + std::to_string(l);
}

} // namespace detail

inline void declare_model(ParameterStore& store, const RunConfig& cfg, std::size_t classes,
                          Rng& rng) {
    validate_config(cfg);
    if (classes == 0) throw ConfigError("declare_model: need at least one category");

    const std::size_t d = cfg.d;
    const std::size_t ffn = 2 * d;
    const auto schedule = config_schedule(cfg);
    const std::size_t branches = static_cast<std::size_t>(cfg.branch_cb) +
                                 static_cast<std::size_t>(cfg.branch_pb) +
                                 static_cast<std::size_t>(cfg.branch_eb);

    declare_backbone(store, "backbone", d, kGridTokens, rng);

    if (cfg.branch_cb) declare_mlp(store, "branch.cb", {9, d, d}, rng);
    if (cfg.branch_pb) declare_mlp(store, "branch.pb", {4, d, d}, rng);
    if (cfg.branch_eb) declare_mlp(store, "branch.eb", {kPatchSide, d, d}, rng);

    // fusion coefficients start neutral; with adaptive fusion off the
    // branches stay unscaled and nothing is declared
    if (cfg.adaptive_fusion) {
        if (cfg.branch_cb) store.declare("fusion.alpha", {1}).data()[0] = 1.0;
        if (cfg.branch_pb) store.declare("fusion.beta", {1}).data()[0] = 1.0;
        if (cfg.branch_eb) store.declare("fusion.gamma", {1}).data()[0] = 1.0;
    }

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        declare_fusion_blocks(store, detail::level_name("fusion", l), branches * d, d,
                              cfg.heads, rng);
        declare_encoder_layer(store, detail::level_name("enc", l), d, cfg.heads, ffn, rng);
        if (l + 1 < cfg.layers)
            declare_assignment(store, detail::level_name("assign", l), branches * d,
                               schedule[l + 1], rng);
    }

    if (cfg.vq) {
        if (cfg.msa) {
            if (cfg.branch_cb) declare_score_mlp(store, "score.cb", d, rng);
            if (cfg.branch_pb) declare_score_mlp(store, "score.pb", d, rng);
            if (cfg.branch_eb) declare_score_mlp(store, "score.eb", d, rng);
        } else {
            Tensor seed = store.declare("query.seed", {cfg.queries, d});
            fill_normal(seed, 0.0, 0.02, rng);
        }
        declare_query_init(store, "query", d, cfg.heads, rng);
    }

    declare_decoder(store, "dec", d, cfg.heads, ffn, cfg.layers, cfg.queries, classes, rng);
}

/// Introspection handles for one pooling level. Tensors are shared views of
/// the forward graph, so keeping them costs nothing extra.
struct LevelTrace {
    std::vector<std::pair<std::string, Tensor>> weights;  // branch name -> N_l x N_l
    Tensor assignment;  // N_l x N_{l+1}; empty on the deepest level
};

struct ModelOutput {
    DecoderOutput dec;              // per decoder layer; back() is the prediction
    std::vector<LevelTrace> levels; // per pooling level
};

inline ModelOutput model_forward(const ParameterStore& store, const RunConfig& cfg,
                                 const PreparedImage& in, const TrainContext& tc = {}) {
    const std::size_t heads = cfg.heads;
    const std::size_t E = in.raw.edge_len;
    if (cfg.branch_eb && E != kPatchSide)
        throw ConfigError("model_forward: edge feature length " + std::to_string(E) +
                          " does not match the patch side " + std::to_string(kPatchSide));

    // finest-level branch embeddings
    Tensor cb, pb;
    std::array<Tensor, 4> eb;
    if (cfg.branch_cb) cb = apply_mlp(store, "branch.cb", in.raw.f_cb, 2, tc);
    if (cfg.branch_pb) pb = apply_mlp(store, "branch.pb", in.raw.f_pb, 2, tc);
    if (cfg.branch_eb)
        for (std::size_t s = 0; s < 4; ++s)
            eb[s] = apply_mlp(store, "branch.eb", slice_cols(in.raw.f_eb, s * E, (s + 1) * E), 2,
                              tc);

    Tensor tokens = backbone_features(store, "backbone", in.diagram);

    // per-branch feature stacks across levels, for the multiscale selector
    std::vector<Tensor> ms_cb, ms_pb, ms_eb;

    ModelOutput out;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        LevelTrace trace;
        Tensor w_cb, w_pb, w_eb, ebm;
        if (cfg.branch_cb) {
            w_cb = weight_color(cb);
            trace.weights.emplace_back("cb", w_cb);
            ms_cb.push_back(cb);
        }
        if (cfg.branch_pb) {
            w_pb = weight_position(pb, cfg.delta);
            trace.weights.emplace_back("pb", w_pb);
            ms_pb.push_back(pb);
        }
        if (cfg.branch_eb) {
            w_eb = weight_edge(eb);
            trace.weights.emplace_back("eb", w_eb);
            ebm = edge_mean(eb);
            ms_eb.push_back(ebm);
        }

        std::vector<Tensor> blocks;
        if (cfg.branch_cb)
            blocks.push_back(cfg.adaptive_fusion ? scale_by(cb, store.get("fusion.alpha")) : cb);
        if (cfg.branch_pb)
            blocks.push_back(cfg.adaptive_fusion ? scale_by(pb, store.get("fusion.beta")) : pb);
        if (cfg.branch_eb)
            blocks.push_back(cfg.adaptive_fusion ? scale_by(ebm, store.get("fusion.gamma")) : ebm);
        Tensor visual = fuse_blocks(store, detail::level_name("fusion", l), blocks, heads, tc);

        tokens = encoder_layer(store, detail::level_name("enc", l), tokens, visual, heads, tc);

        if (l + 1 < cfg.layers) {
            // the soft assignment reads the unscaled branch concatenation
            std::vector<Tensor> cat;
            if (cfg.branch_cb) cat.push_back(cb);
            if (cfg.branch_pb) cat.push_back(pb);
            if (cfg.branch_eb) cat.push_back(ebm);
            Tensor s = assignment_matrix(store, detail::level_name("assign", l),
                                         cat.size() == 1 ? cat[0] : concat_cols(cat));
            trace.assignment = s;
            if (cfg.branch_cb) cb = group_nodes(w_cb, cb, s, cfg.normalize_w);
            if (cfg.branch_pb) pb = group_nodes(w_pb, pb, s, cfg.normalize_w);
            if (cfg.branch_eb)
                for (std::size_t k = 0; k < 4; ++k)
                    eb[k] = group_nodes(w_eb, eb[k], s, cfg.normalize_w);
        }
        out.levels.push_back(std::move(trace));
    }

    Tensor queries;
    if (!cfg.vq) {
        queries = Tensor::zeros({cfg.queries, cfg.d});
    } else if (cfg.msa) {
        std::vector<BranchPool> pools;
        if (cfg.branch_cb) pools.push_back(multiscale_scores(store, "score.cb", ms_cb));
        if (cfg.branch_pb) pools.push_back(multiscale_scores(store, "score.pb", ms_pb));
        if (cfg.branch_eb) pools.push_back(multiscale_scores(store, "score.eb", ms_eb));
        Tensor selected = sum_selected(pools, cfg.queries);
        queries = init_queries(store, "query", selected, tokens, heads, tc);
    } else {
        queries = init_queries(store, "query", store.get("query.seed"), tokens, heads, tc);
    }

    out.dec = decode(store, "dec", queries, tokens, cfg.layers, heads, tc);
    return out;
}

} // namespace gptr
