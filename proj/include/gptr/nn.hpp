#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "gptr/errors.hpp"
#include "gptr/rng.hpp"
#include "gptr/tensor.hpp"

namespace gptr {

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

inline void fill_uniform(Tensor& t, double lo, double hi, Rng& rng) {
    for (double& v : t.data()) v = rng.uniform(lo, hi);
}

inline void fill_normal(Tensor& t, double mean, double stddev, Rng& rng) {
    for (double& v : t.data()) v = mean + stddev * rng.normal();
}

/// Uniform Glorot initialization for a (fan_in, fan_out) weight matrix.
inline void xavier_uniform(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    fill_uniform(t, -limit, limit, rng);
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

/// Named collection of trainable tensors. Declaration order is preserved so
/// that initialization consumes the RNG stream identically across runs.
class ParameterStore {
public:
    Tensor declare(const std::string& name, const Shape& shape) {
        if (params_.count(name))
            throw std::invalid_argument("ParameterStore: duplicate parameter '" + name + "'");
        Tensor t = Tensor::zeros(shape, true);
        params_.emplace(name, t);
        order_.push_back(name);
        return t;
    }

    Tensor get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end())
            throw std::invalid_argument("ParameterStore: unknown parameter '" + name + "'");
        return it->second;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }
    const std::vector<std::string>& names() const { return order_; }
    std::size_t size() const { return order_.size(); }

    std::size_t numel() const {
        std::size_t n = 0;
        for (const auto& name : order_) n += params_.at(name).numel();
        return n;
    }

    void zero_grads() {
        for (const auto& name : order_) {
            Tensor t = params_.at(name);
            t.mutable_grad().assign(t.numel(), 0.0);
        }
    }

    void free_grads() {
        for (const auto& name : order_) params_.at(name).mutable_grad().clear();
    }

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> params_;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline nlohmann::json params_to_json(const ParameterStore& store) {
    nlohmann::json params = nlohmann::json::object();
    for (const auto& name : store.names()) {
        const Tensor t = store.get(name);
        for (double v : t.data())
            if (!std::isfinite(v))
                throw CheckpointError("checkpoint save: parameter '" + name +
                                      "' contains a non-finite value");
        params[name] = {{"shape", t.shape()}, {"data", t.data()}};
    }
    return {{"format", "gptr-params"}, {"version", 1}, {"params", params}};
}

inline void save_params(const ParameterStore& store, const std::string& path) {
    nlohmann::json j = params_to_json(store);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("checkpoint save: cannot open '" + path + "' for writing");
    out << j.dump() << "\n";
    if (!out) throw CheckpointError("checkpoint save: write to '" + path + "' failed");
}

/// Loads values into an already-declared store. The checkpoint must carry
/// exactly the declared parameter set with matching shapes.
inline void load_params(ParameterStore& store, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint load: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("checkpoint load: '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object() || j.value("format", "") != "gptr-params")
        throw CheckpointError("checkpoint load: '" + path + "' is not a parameter checkpoint");
    if (j.value("version", 0) != 1)
        throw CheckpointError("checkpoint load: unsupported checkpoint version in '" + path + "'");
    if (!j.contains("params") || !j["params"].is_object())
        throw CheckpointError("checkpoint load: '" + path + "' has no params object");

    const auto& params = j["params"];
    for (const auto& name : store.names())
        if (!params.contains(name))
            throw CheckpointError("checkpoint load: missing parameter '" + name + "'");
    for (auto it = params.begin(); it != params.end(); ++it)
        if (!store.has(it.key()))
            throw CheckpointError("checkpoint load: unknown parameter '" + it.key() + "'");

    for (const auto& name : store.names()) {
        Tensor t = store.get(name);
        const auto& entry = params[name];
        Shape shape = entry.value("shape", Shape{});
        if (shape != t.shape())
            throw CheckpointError("checkpoint load: parameter '" + name + "' has shape " +
                                  shape_str(shape) + ", expected " + shape_str(t.shape()));
        std::vector<double> data = entry.value("data", std::vector<double>{});
        if (data.size() != t.numel())
            throw CheckpointError("checkpoint load: parameter '" + name + "' has " +
                                  std::to_string(data.size()) + " values, expected " +
                                  std::to_string(t.numel()));
        t.data() = std::move(data);
    }
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// Decoupled weight decay Adam. Moments are keyed by parameter name so the
/// optimizer state survives checkpoint reloads of the same store.
class AdamW {
public:
    AdamW(double lr = 1e-4, double weight_decay = 1e-4, double beta1 = 0.9,
          double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    std::size_t step_count() const { return t_; }
    double lr() const { return lr_; }

    /// One update over every parameter; gradients are consumed (cleared).
    /// A parameter without an allocated gradient buffer indicates a wiring
    /// bug and is an error.
    void step(ParameterStore& store) {
        for (const auto& name : store.names())
            if (store.get(name).grad().size() != store.get(name).numel())
                throw std::invalid_argument("AdamW::step: parameter '" + name +
                                            "' has no gradient");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (const auto& name : store.names()) {
            Tensor p = store.get(name);
            auto& st = moments_[name];
            if (st.m.size() != p.numel()) {
                st.m.assign(p.numel(), 0.0);
                st.v.assign(p.numel(), 0.0);
            }
            double* x = p.data().data();
            const double* g = p.grad().data();
            for (std::size_t i = 0; i < p.numel(); ++i) {
                st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g[i];
                st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g[i] * g[i];
                const double mhat = st.m[i] / bc1;
                const double vhat = st.v[i] / bc2;
                x[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * x[i]);
            }
        }
        store.free_grads();
    }

private:
    struct Moments {
        std::vector<double> m, v;
    };
    double lr_, wd_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::unordered_map<std::string, Moments> moments_;
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Threads the training flag, dropout rate and RNG stream through forward
/// passes. Default-constructed context means pure inference.
struct TrainContext {
    bool training = false;
    double dropout = 0.0;
    Rng* rng = nullptr;
};

inline Tensor maybe_dropout(const Tensor& x, const TrainContext& tc) {
    if (!tc.training || tc.dropout <= 0.0 || tc.rng == nullptr) return x;
    return dropout(x, tc.dropout, *tc.rng, true);
}

inline void declare_linear(ParameterStore& store, const std::string& prefix, std::size_t in,
                           std::size_t out, Rng& rng) {
    Tensor w = store.declare(prefix + ".w", {in, out});
    xavier_uniform(w, in, out, rng);
    store.declare(prefix + ".b", {out});
}

inline Tensor apply_linear(const ParameterStore& store, const std::string& prefix,
                           const Tensor& x) {
    return add_rowvec(matmul(x, store.get(prefix + ".w")), store.get(prefix + ".b"));
}

/// Fully-connected stack with ReLU between layers (none after the last).
inline void declare_mlp(ParameterStore& store, const std::string& prefix,
                        const std::vector<std::size_t>& dims, Rng& rng) {
    if (dims.size() < 2)
        throw std::invalid_argument("declare_mlp: need at least input and output dims");
    for (std::size_t l = 0; l + 1 < dims.size(); ++l)
        declare_linear(store, prefix + ".l" + std::to_string(l), dims[l], dims[l + 1], rng);
}

inline Tensor apply_mlp(const ParameterStore& store, const std::string& prefix, const Tensor& x,
                        std::size_t n_layers, const TrainContext& tc = {}) {
    Tensor h = x;
    for (std::size_t l = 0; l < n_layers; ++l) {
        h = apply_linear(store, prefix + ".l" + std::to_string(l), h);
        if (l + 1 < n_layers) h = maybe_dropout(relu(h), tc);
    }
    return h;
}

inline void declare_layer_norm(ParameterStore& store, const std::string& prefix, std::size_t d) {
    Tensor g = store.declare(prefix + ".g", {d});
    g.data().assign(d, 1.0);
    store.declare(prefix + ".b", {d});
}

inline Tensor apply_layer_norm(const ParameterStore& store, const std::string& prefix,
                               const Tensor& x) {
    return layer_norm(x, store.get(prefix + ".g"), store.get(prefix + ".b"));
}

/// Per-head softmax(q kT / sqrt(d/heads)) v on already-projected inputs,
/// heads concatenated back to full width. Learned projections live in the
/// multi-head wrapper below.
inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   std::size_t heads = 1) {
    if (q.cols() != k.cols() || k.cols() != v.cols())
        throw std::invalid_argument("scaled_dot_attention: width mismatch " +
                                    shape_str(q.shape()) + " vs " + shape_str(k.shape()) +
                                    " vs " + shape_str(v.shape()));
    if (k.rows() != v.rows())
        throw std::invalid_argument("scaled_dot_attention: key/value count mismatch " +
                                    shape_str(k.shape()) + " vs " + shape_str(v.shape()));
    if (heads == 0 || q.cols() % heads != 0)
        throw ConfigError("scaled_dot_attention: width " + std::to_string(q.cols()) +
                          " not divisible by " + std::to_string(heads) + " heads");
    const std::size_t dh = q.cols() / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    if (heads == 1) {
        Tensor scores = mul_scalar(matmul(q, transpose(k)), scale);
        return matmul(softmax(scores, 1), v);
    }
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        outs.push_back(matmul(softmax(mul_scalar(matmul(qh, transpose(kh)), scale), 1), vh));
    }
    return concat_cols(outs);
}

inline void declare_mha(ParameterStore& store, const std::string& prefix, std::size_t d,
                        std::size_t heads, Rng& rng) {
    if (heads == 0 || d % heads != 0)
        throw ConfigError("declare_mha: model width " + std::to_string(d) +
                          " not divisible by " + std::to_string(heads) + " heads");
    declare_linear(store, prefix + ".q", d, d, rng);
    declare_linear(store, prefix + ".k", d, d, rng);
    declare_linear(store, prefix + ".v", d, d, rng);
    declare_linear(store, prefix + ".o", d, d, rng);
}

/// Multi-head attention. `q_in` supplies queries, `kv_in` keys and values;
/// pass the same tensor for self-attention. Attention probabilities get
/// dropout under a training context.
inline Tensor apply_mha(const ParameterStore& store, const std::string& prefix,
                        const Tensor& q_in, const Tensor& kv_in, std::size_t heads,
                        const TrainContext& tc = {}) {
    const std::size_t d = q_in.cols();
    if (kv_in.cols() != d)
        throw std::invalid_argument("apply_mha: query/key width mismatch " +
                                    shape_str(q_in.shape()) + " vs " + shape_str(kv_in.shape()));
    const std::size_t dh = d / heads;
    Tensor q = apply_linear(store, prefix + ".q", q_in);
    Tensor k = apply_linear(store, prefix + ".k", kv_in);
    Tensor v = apply_linear(store, prefix + ".v", kv_in);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor probs = softmax(mul_scalar(matmul(qh, transpose(kh)), scale), 1);
        outs.push_back(matmul(maybe_dropout(probs, tc), vh));
    }
    return apply_linear(store, prefix + ".o", concat_cols(outs));
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    std::string worst;
};

/// Compares reverse-mode gradients against central finite differences for
/// every element of every tensor in `inputs`. The loss closure must be a
/// pure function of those tensors' current values.
inline GradCheckResult grad_check(const std::function<Tensor()>& loss_fn,
                                  const std::vector<std::pair<std::string, Tensor>>& inputs,
                                  double h = 1e-5) {
    for (const auto& [name, t] : inputs) {
        if (!t.requires_grad())
            throw std::invalid_argument("grad_check: input '" + name + "' does not require grad");
        Tensor mut = t;
        mut.mutable_grad().clear();
    }
    Tensor loss = loss_fn();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    for (const auto& [name, t] : inputs) {
        if (t.grad().size() != t.numel())
            throw std::invalid_argument("grad_check: input '" + name +
                                        "' received no gradient from the loss");
        analytic.push_back(t.grad());
    }

    GradCheckResult res;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor t = inputs[k].second;
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double saved = t.data()[i];
            t.data()[i] = saved + h;
            const double up = loss_fn().value();
            t.data()[i] = saved - h;
            const double dn = loss_fn().value();
            t.data()[i] = saved;
            const double numeric = (up - dn) / (2.0 * h);
            const double a = analytic[k][i];
            const double rel =
                std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-4});
            ++res.checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = inputs[k].first + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

} // namespace gptr
