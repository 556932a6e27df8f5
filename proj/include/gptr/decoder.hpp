#pragma once

// Multi-scale query initialization and the set-prediction decoder with its
// box and class heads.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "gptr/errors.hpp"
#include "gptr/nn.hpp"
#include "gptr/tensor.hpp"

namespace gptr {

// ---------------------------------------------------------------------------
// Multi-scale node pool and scoring
// ---------------------------------------------------------------------------

/// One branch's nodes stacked across all grouping layers, plus a softmax
/// score per node (the selection signal for query initialization).
struct BranchPool {
    Tensor features;  // (sum_l N_l) x d
    Tensor scores;    // (sum_l N_l), sums to 1
};

inline void declare_score_mlp(ParameterStore& store, const std::string& prefix, std::size_t d,
                              Rng& rng) {
    declare_linear(store, prefix, d, 1, rng);
}

/// Stack one branch's per-layer features along the node axis and score
/// every node with a single linear map + softmax over the whole stack.
inline BranchPool multiscale_scores(const ParameterStore& store, const std::string& prefix,
                                    const std::vector<Tensor>& layers) {
    if (layers.empty()) throw ConfigError("multiscale_scores: no layer features given");
    Tensor pool = layers.size() == 1 ? layers[0] : concat_rows(layers);
    Tensor logits = apply_linear(store, prefix, pool);
    return {pool, softmax(reshape(logits, {pool.rows()}))};
}

/// Indices of the m highest scores, highest first; ties broken toward the
/// lower index. The returned order is the rank order, which also fixes how
/// selected rows line up across branches.
inline std::vector<std::size_t> select_topM(const Tensor& scores, std::size_t m) {
    const std::size_t n = scores.numel();
    if (m > n)
        throw ConfigError("select_topM: requested " + std::to_string(m) + " nodes from a pool of " +
                          std::to_string(n));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return scores.data()[a] > scores.data()[b]; });
    idx.resize(m);
    return idx;
}

/// Elementwise sum of each branch's top-m rows (selected independently per
/// branch, aligned by score rank).
inline Tensor sum_selected(const std::vector<BranchPool>& branches, std::size_t m) {
    if (branches.empty()) throw ConfigError("sum_selected: no branch pools given");
    Tensor acc;
    for (std::size_t b = 0; b < branches.size(); ++b) {
        Tensor sel = gather_rows(branches[b].features, select_topM(branches[b].scores, m));
        acc = b == 0 ? sel : add(acc, sel);
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Query initialization
// ---------------------------------------------------------------------------

inline void declare_query_init(ParameterStore& store, const std::string& prefix, std::size_t d,
                               std::size_t heads, Rng& rng) {
    declare_mha(store, prefix + ".sa", d, heads, rng);
}

/// Self-attend over the selected multi-scale rows followed by the encoder
/// tokens, and keep the first block with a residual: each initial query stays
/// anchored to its own selected row (attention alone would average the rows
/// together and the queries would start interchangeable), contextualized by
/// the whole diagram.
inline Tensor init_queries(const ParameterStore& store, const std::string& prefix,
                           const Tensor& selected, const Tensor& encoded, std::size_t heads,
                           const TrainContext& tc = {}) {
    if (selected.cols() != encoded.cols())
        throw std::invalid_argument("init_queries: width mismatch " +
                                    shape_str(selected.shape()) + " vs " +
                                    shape_str(encoded.shape()));
    Tensor x = concat_rows({selected, encoded});
    Tensor sa = apply_mha(store, prefix + ".sa", x, x, heads, tc);
    return add(selected, slice_rows(sa, 0, selected.rows()));
}

// ---------------------------------------------------------------------------
// Set-prediction decoder
// ---------------------------------------------------------------------------

struct DecoderOutput {
    // one entry per decoder layer (the last is the final prediction);
    // earlier entries feed auxiliary losses
    std::vector<Tensor> boxes;        // M x 4, sigmoid-bounded (cx, cy, w, h)
    std::vector<Tensor> class_probs;  // M x C, independent per-class sigmoid
};

inline void declare_decoder(ParameterStore& store, const std::string& prefix, std::size_t d,
                            std::size_t heads, std::size_t ffn_width, std::size_t layers,
                            std::size_t queries, std::size_t classes, Rng& rng) {
    if (layers == 0) throw ConfigError("declare_decoder: need at least one layer");
    // unit-scale positional embeddings: each query needs an identity strong
    // enough to attend differently from its neighbors before training starts,
    // otherwise every query follows the same trajectory and predictions collapse
    Tensor pos = store.declare(prefix + ".pos", {queries, d});
    fill_normal(pos, 0.0, 1.0, rng);
    for (std::size_t l = 0; l < layers; ++l) {
        const std::string lp = prefix + ".l" + std::to_string(l);
        declare_mha(store, lp + ".sa", d, heads, rng);
        declare_layer_norm(store, lp + ".n1", d);
        declare_mha(store, lp + ".ca", d, heads, rng);
        declare_layer_norm(store, lp + ".n2", d);
        declare_mlp(store, lp + ".ffn", {d, ffn_width, d}, rng);
        declare_layer_norm(store, lp + ".n3", d);
    }
    declare_mlp(store, prefix + ".box", {d, d, d, 4}, rng);
    declare_linear(store, prefix + ".cls", d, classes, rng);
    // class prior bias: scores start near zero so early gradients come from
    // matched positives instead of a wall of easy negatives
    Tensor cls_b = store.get(prefix + ".cls.b");
    std::fill(cls_b.data().begin(), cls_b.data().end(), -std::log(99.0));  // sigmoid ~= 0.01
    // learned per-query anchors, added to the box logits: queries start out
    // owning distinct grid cells, so the bipartite matching is geometry-stable
    // from the first step instead of churning between interchangeable queries
    // (churn makes "every query predicts the mean box" a local optimum)
    Tensor anchors = store.declare(prefix + ".anchor", {queries, 4});
    const auto logit = [](double p) { return std::log(p / (1.0 - p)); };
    const std::size_t gx = static_cast<std::size_t>(std::ceil(std::sqrt(double(queries))));
    const std::size_t gy = (queries + gx - 1) / gx;
    for (std::size_t q = 0; q < queries; ++q) {
        anchors.data()[q * 4 + 0] = logit((double(q % gx) + 0.5) / double(gx));
        anchors.data()[q * 4 + 1] = logit((double(q / gx) + 0.5) / double(gy));
        anchors.data()[q * 4 + 2] = logit(0.15);  // typical object size
        anchors.data()[q * 4 + 3] = logit(0.15);
    }
}

/// Standard set-prediction decoding: per layer, self-attention over the
/// queries (with their learned positional embeddings), cross-attention into
/// the encoder memory, and a feed-forward block, each wrapped
/// residual-then-norm. Shared heads map every layer's queries to
/// sigmoid-bounded boxes and per-class probabilities.
inline DecoderOutput decode(const ParameterStore& store, const std::string& prefix,
                            const Tensor& queries, const Tensor& memory, std::size_t layers,
                            std::size_t heads, const TrainContext& tc = {}) {
    const Tensor pos = store.get(prefix + ".pos");
    if (pos.rows() != queries.rows() || pos.cols() != queries.cols())
        throw std::invalid_argument("decode: query shape " + shape_str(queries.shape()) +
                                    " does not match positional table " +
                                    shape_str(pos.shape()));
    DecoderOutput out;
    Tensor x = queries;
    for (std::size_t l = 0; l < layers; ++l) {
        const std::string lp = prefix + ".l" + std::to_string(l);
        Tensor xp = add(x, pos);
        Tensor sa = apply_mha(store, lp + ".sa", xp, xp, heads, tc);
        x = apply_layer_norm(store, lp + ".n1", add(x, maybe_dropout(sa, tc)));
        Tensor ca = apply_mha(store, lp + ".ca", add(x, pos), memory, heads, tc);
        x = apply_layer_norm(store, lp + ".n2", add(x, maybe_dropout(ca, tc)));
        Tensor ffn = apply_mlp(store, lp + ".ffn", x, 2, tc);
        x = apply_layer_norm(store, lp + ".n3", add(x, maybe_dropout(ffn, tc)));
        // heads stay dropout-free: box regression noise hurts matching
        out.boxes.push_back(
            sigmoid(add(apply_mlp(store, prefix + ".box", x, 3), store.get(prefix + ".anchor"))));
        out.class_probs.push_back(sigmoid(apply_linear(store, prefix + ".cls", x)));
    }
    return out;
}

} // namespace gptr
