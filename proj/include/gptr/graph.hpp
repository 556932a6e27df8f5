#pragma once

// Similarity graphs over patch embeddings, soft-assignment pooling,
// adaptive branch fusion, the cross-attention encoder stack, and the small
// convolutional token backbone.

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "gptr/errors.hpp"
#include "gptr/nn.hpp"
#include "gptr/tensor.hpp"

namespace gptr {

namespace detail {

/// Rows scaled to unit length. The 1e-24 floor under the squared norm keeps
/// zero rows at zero (their cosine against anything is then 0) instead of
/// producing NaN.
inline Tensor unit_rows(const Tensor& x) {
    Tensor norms = sqrt_t(add_scalar(sum_rows(mul(x, x)), 1e-24));
    return scale_rows(x, reciprocal(norms));
}

/// W with its diagonal replaced by exact ones: W*(1-I) + I. Self-similarity
/// must be 1 by definition; computing it through the guarded norms gives
/// 1 - O(eps) instead, and the mask also keeps gradients off the
/// ill-conditioned zero-distance diagonal.
inline Tensor pin_unit_diagonal(const Tensor& w) {
    detail::require_2d(w, "pin_unit_diagonal");
    if (w.rows() != w.cols())
        throw std::invalid_argument("pin_unit_diagonal: matrix not square: " +
                                    shape_str(w.shape()));
    Tensor eye = Tensor::identity(w.rows());
    Tensor hole = sub(Tensor::full({w.rows(), w.cols()}, 1.0), eye);
    return add(mul(w, hole), eye);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Pairwise edge weights, one matrix per branch
// ---------------------------------------------------------------------------

/// Cosine similarity between all row pairs; unit diagonal. Exactly
/// symmetric: entry (i,j) and entry (j,i) accumulate the same products in
/// the same order.
inline Tensor weight_color(const Tensor& f) {
    Tensor u = detail::unit_rows(f);
    return detail::pin_unit_diagonal(matmul(u, transpose(u)));
}

/// exp(-||f_i - f_j||_2 / delta); unit diagonal, entries in (0, 1].
/// Squared distances come from the Gram expansion; the symmetric-sum term
/// is built before subtracting the Gram part so the matrix stays exactly
/// symmetric, and the 1e-14 floor keeps sqrt differentiable at coincident
/// points (the diagonal itself is masked to 1).
inline Tensor weight_position(const Tensor& f, double delta = 0.1) {
    if (!(delta > 0.0))
        throw std::invalid_argument("weight_position: delta must be positive, got " +
                                    std::to_string(delta));
    const std::size_t n = f.rows();
    Tensor sq = sum_rows(mul(f, f));
    Tensor pair = add_rowvec(add_colvec(Tensor::zeros({n, n}), sq), sq);
    Tensor d2 = sub(pair, mul_scalar(matmul(f, transpose(f)), 2.0));
    Tensor dist = sqrt_t(add_scalar(clamp_min(d2, 0.0), 1e-14));
    return detail::pin_unit_diagonal(exp_t(mul_scalar(dist, -1.0 / delta)));
}

/// Splice affinity from the four per-edge embeddings, ordered
/// (top, bottom, left, right): the best of the four facing-edge cosines
///   bottom_i~top_j, top_i~bottom_j, left_i~right_j, right_i~left_j.
/// Swapping i and j swaps the pairs, so the max is exactly symmetric.
inline Tensor weight_edge(const std::array<Tensor, 4>& eb) {
    for (const Tensor& e : eb)
        if (e.shape() != eb[0].shape())
            throw std::invalid_argument("weight_edge: edge embeddings disagree in shape: " +
                                        shape_str(e.shape()) + " vs " +
                                        shape_str(eb[0].shape()));
    Tensor t = detail::unit_rows(eb[0]);
    Tensor b = detail::unit_rows(eb[1]);
    Tensor l = detail::unit_rows(eb[2]);
    Tensor r = detail::unit_rows(eb[3]);
    Tensor vertical = elem_max(matmul(b, transpose(t)), matmul(t, transpose(b)));
    Tensor horizontal = elem_max(matmul(l, transpose(r)), matmul(r, transpose(l)));
    return detail::pin_unit_diagonal(elem_max(vertical, horizontal));
}

// ---------------------------------------------------------------------------
// Soft assignment and grouping
// ---------------------------------------------------------------------------

inline void declare_assignment(ParameterStore& store, const std::string& prefix,
                               std::size_t in_width, std::size_t out_nodes, Rng& rng) {
    if (out_nodes == 0)
        throw std::invalid_argument("declare_assignment: need at least one output node");
    declare_linear(store, prefix, in_width, out_nodes, rng);
}

/// Soft membership of each node over the next layer's nodes; rows are
/// softmax-normalized, so each row sums to 1.
inline Tensor assignment_matrix(const ParameterStore& store, const std::string& prefix,
                                const Tensor& nodes) {
    return softmax(apply_linear(store, prefix, nodes), 1);
}

/// One grouping step: propagate features over the weighted graph, then pool
/// with the assignment. With `normalize` set (the default), propagation uses
/// the degree-normalized D^-1 W (D = row sums of |W|, floored at 1e-12) and
/// pooling divides by the assignment mass of each output node, making every
/// output row a convex combination of propagated rows. With it off, both
/// products are applied raw.
inline Tensor group_nodes(const Tensor& w, const Tensor& f, const Tensor& s,
                          bool normalize = true) {
    Tensor prop;
    if (normalize) {
        Tensor degree = elem_max(sum_rows(abs_t(w)), Tensor::full({w.rows()}, 1e-12));
        prop = matmul(scale_rows(w, reciprocal(degree)), f);
    } else {
        prop = matmul(w, f);
    }
    Tensor pooled = matmul(transpose(s), prop);
    if (normalize) {
        Tensor mass = elem_max(sum_cols(s), Tensor::full({s.cols()}, 1e-12));
        pooled = scale_rows(pooled, reciprocal(mass));
    }
    return pooled;
}

/// Node counts per grouping layer: n1, then ceil(n*ratio) repeatedly,
/// strictly decreasing until the floor of one node.
inline std::vector<std::size_t> pool_schedule(std::size_t n1, std::size_t layers,
                                              double ratio = 0.5) {
    if (layers == 0) throw ConfigError("pool_schedule: need at least one layer");
    if (!(ratio > 0.0 && ratio < 1.0))
        throw ConfigError("pool_schedule: ratio must lie in (0, 1), got " +
                          std::to_string(ratio));
    std::vector<std::size_t> out{n1};
    while (out.size() < layers) {
        const std::size_t prev = out.back();
        std::size_t next =
            static_cast<std::size_t>(std::ceil(static_cast<double>(prev) * ratio));
        if (next >= prev) next = prev > 1 ? prev - 1 : 1;
        if (next == 0) next = 1;
        out.push_back(next);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adaptive branch fusion
// ---------------------------------------------------------------------------

/// Mean of the four per-edge embeddings: the single d_e-wide edge feature
/// used wherever branches must share one width.
inline Tensor edge_mean(const std::array<Tensor, 4>& eb) {
    return mul_scalar(add(add(eb[0], eb[1]), add(eb[2], eb[3])), 0.25);
}

/// Fusion over an arbitrary list of equally-sized branch blocks (ablations
/// drop branches, which shrinks the concatenation width).
inline void declare_fusion_blocks(ParameterStore& store, const std::string& prefix,
                                  std::size_t in_width, std::size_t d_out, std::size_t heads,
                                  Rng& rng) {
    declare_mha(store, prefix + ".sa", in_width, heads, rng);
    declare_linear(store, prefix + ".out", in_width, d_out, rng);
}

inline Tensor fuse_blocks(const ParameterStore& store, const std::string& prefix,
                          const std::vector<Tensor>& blocks, std::size_t heads,
                          const TrainContext& tc = {}) {
    if (blocks.empty()) throw std::invalid_argument("fuse_blocks: no branch blocks");
    Tensor mix = blocks.size() == 1 ? blocks[0] : concat_cols(blocks);
    Tensor sa = apply_mha(store, prefix + ".sa", mix, mix, heads, tc);
    return apply_linear(store, prefix + ".out", sa);
}

/// The three coefficient scalars are declared once by the caller and shared
/// across layers; the attention weights here are per call site.
inline void declare_fusion(ParameterStore& store, const std::string& prefix, std::size_t d_c,
                           std::size_t d_p, std::size_t d_e, std::size_t d_out,
                           std::size_t heads, Rng& rng) {
    declare_fusion_blocks(store, prefix, d_c + d_p + d_e, d_out, heads, rng);
}

/// Fused per-node visual feature: scale each branch by its learned
/// coefficient, mean-reduce the four edge embeddings to one, concatenate to
/// width d_c+d_p+d_e, self-attend over the nodes, and project to the model
/// width.
inline Tensor fuse_branches(const ParameterStore& store, const std::string& prefix,
                            const Tensor& cb, const Tensor& pb, const std::array<Tensor, 4>& eb,
                            const Tensor& alpha, const Tensor& beta, const Tensor& gamma,
                            std::size_t heads, const TrainContext& tc = {}) {
    return fuse_blocks(store, prefix,
                       {scale_by(cb, alpha), scale_by(pb, beta), scale_by(edge_mean(eb), gamma)},
                       heads, tc);
}

// ---------------------------------------------------------------------------
// Cross-attention encoder layer
// ---------------------------------------------------------------------------

inline void declare_encoder_layer(ParameterStore& store, const std::string& prefix,
                                  std::size_t d, std::size_t heads, std::size_t ffn_width,
                                  Rng& rng) {
    declare_mha(store, prefix + ".ca", d, heads, rng);
    declare_layer_norm(store, prefix + ".n1", d);
    declare_mha(store, prefix + ".sa", d, heads, rng);
    declare_layer_norm(store, prefix + ".n2", d);
    declare_mlp(store, prefix + ".ffn", {d, ffn_width, d}, rng);
    declare_layer_norm(store, prefix + ".n3", d);
}

/// One encoder layer: the running diagram tokens cross-attend into the
/// fused graph nodes, then self-attention and a feed-forward block, each
/// sublayer wrapped residual-then-norm. Token count is preserved; the
/// node count of `visual` is free to differ per layer.
inline Tensor encoder_layer(const ParameterStore& store, const std::string& prefix,
                            const Tensor& tokens, const Tensor& visual, std::size_t heads,
                            const TrainContext& tc = {}) {
    Tensor ca = apply_mha(store, prefix + ".ca", tokens, visual, heads, tc);
    Tensor x = apply_layer_norm(store, prefix + ".n1", add(tokens, maybe_dropout(ca, tc)));
    Tensor sa = apply_mha(store, prefix + ".sa", x, x, heads, tc);
    x = apply_layer_norm(store, prefix + ".n2", add(x, maybe_dropout(sa, tc)));
    Tensor ffn = apply_mlp(store, prefix + ".ffn", x, 2, tc);
    return apply_layer_norm(store, prefix + ".n3", add(x, maybe_dropout(ffn, tc)));
}

// ---------------------------------------------------------------------------
// Convolutional token backbone
// ---------------------------------------------------------------------------

namespace detail {

/// (H, W, C) -> (H+2, W+2, C) with replicated borders. Replication (rather
/// than zeros) keeps a constant input constant through the convolutions, so
/// border tokens match interior ones.
inline Tensor pad_replicate1(const Tensor& x) {
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    Tensor rows = reshape(x, {h, w * c});
    rows = concat_rows({slice_rows(rows, 0, 1), rows, slice_rows(rows, h - 1, h)});
    Tensor left = slice_cols(rows, 0, c);
    Tensor right = slice_cols(rows, (w - 1) * c, w * c);
    rows = concat_cols({left, rows, right});
    return reshape(rows, {h + 2, w + 2, c});
}

/// 3x3 stride-2 convolution with replicate padding, followed by ReLU.
inline Tensor conv3x3_s2(const ParameterStore& store, const std::string& prefix,
                         const Tensor& x) {
    const std::size_t h = x.dim(0), w = x.dim(1);
    Tensor cols = im2col(pad_replicate1(x), 3, 2, 0);
    Tensor y = relu(apply_linear(store, prefix, cols));
    return reshape(y, {(h + 1) / 2, (w + 1) / 2, y.cols()});
}

} // namespace detail

constexpr std::size_t kBackboneStages = 4;

inline void declare_backbone(ParameterStore& store, const std::string& prefix, std::size_t d,
                             std::size_t tokens, Rng& rng) {
    const std::size_t widths[kBackboneStages + 1] = {3, 16, 32, 64, d};
    for (std::size_t i = 0; i < kBackboneStages; ++i)
        declare_linear(store, prefix + ".conv" + std::to_string(i), 9 * widths[i],
                       widths[i + 1], rng);
    declare_linear(store, prefix + ".proj", d, d, rng);
    // positional embeddings at half the feature scale: uniform regions give
    // identical conv features, so position is the only key cross-attention
    // can use to tell background tokens apart and localize
    Tensor pos = store.declare(prefix + ".pos", {tokens, d});
    fill_normal(pos, 0.0, 0.5, rng);
}

/// Semantic tokens for a standardized diagram: four stride-2 3x3
/// convolutions (3->16->32->64->d) shrink (S, S, 3) to an (S/16)^2 token
/// map, followed by a linear projection and a learned additive positional
/// embedding. 224 -> 196 tokens.
inline Tensor backbone_features(const ParameterStore& store, const std::string& prefix,
                                const Tensor& diagram) {
    if (diagram.ndim() != 3 || diagram.dim(2) != 3)
        throw std::invalid_argument("backbone_features: expected an (H, W, 3) tensor, got " +
                                    shape_str(diagram.shape()));
    Tensor x = diagram;
    for (std::size_t i = 0; i < kBackboneStages; ++i)
        x = detail::conv3x3_s2(store, prefix + ".conv" + std::to_string(i), x);
    const std::size_t tokens = x.dim(0) * x.dim(1);
    Tensor proj = apply_linear(store, prefix + ".proj", reshape(x, {tokens, x.dim(2)}));
    Tensor pos = store.get(prefix + ".pos");
    if (pos.rows() != tokens)
        throw ConfigError("backbone_features: diagram yields " + std::to_string(tokens) +
                          " tokens but the positional table is " + shape_str(pos.shape()));
    return add(proj, pos);
}

} // namespace gptr
