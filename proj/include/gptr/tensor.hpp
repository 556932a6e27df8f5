#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "gptr/rng.hpp"

namespace gptr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << " x ";
        os << s[i];
    }
    os << ")";
    return os.str();
}

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;
    bool backward_done = false;
};

// Accumulating matmul kernels on raw buffers. C is never zeroed here.
// mm_nn:  C[m x n] += A[m x k] * B[k x n]
inline void mm_nn(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// mm_nt:  C[m x k] += A[m x n] * B[k x n]^T
inline void mm_nt(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * n;
        double* ci = c + i * k;
        for (std::size_t j = 0; j < k; ++j) {
            const double* bj = b + j * n;
            double acc = 0.0;
            for (std::size_t p = 0; p < n; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// mm_tn:  C[k x n] += A[m x k]^T * B[m x n]
inline void mm_tn(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            double* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
        }
    }
}

} // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        return make(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
    }

    static Tensor full(const Shape& shape, double value, bool requires_grad = false) {
        return make(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
    }

    static Tensor from_data(const Shape& shape, std::vector<double> data,
                            bool requires_grad = false) {
        if (data.size() != shape_numel(shape))
            throw std::invalid_argument("Tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        return make(shape, std::move(data), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return make({1}, {v}, requires_grad);
    }

    static Tensor identity(std::size_t n) {
        std::vector<double> d(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
        return make({n, n}, std::move(d), false);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.at(1); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }
    const std::vector<double>& grad() const { return node_->grad; }
    std::vector<double>& mutable_grad() { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    double value() const {
        if (numel() != 1)
            throw std::invalid_argument("Tensor::value: tensor is not scalar, shape " +
                                        shape_str(shape()));
        return node_->data[0];
    }

    double at(std::size_t i) const { return node_->data.at(i); }
    double at(std::size_t r, std::size_t c) const {
        return node_->data.at(r * cols() + c);
    }

    std::shared_ptr<detail::TensorNode> handle() const { return node_; }
    detail::TensorNode* node() const { return node_.get(); }

    /// Detached copy of the values (no tape participation).
    Tensor detach() const { return make(shape(), data(), false); }

    static Tensor wrap(std::shared_ptr<detail::TensorNode> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    static Tensor make(const Shape& shape, std::vector<double> data, bool requires_grad) {
        auto n = std::make_shared<detail::TensorNode>();
        n->shape = shape;
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return wrap(std::move(n));
    }

    std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {

inline Tensor op_result(Shape shape, std::vector<std::shared_ptr<TensorNode>> parents,
                        std::function<void(TensorNode&)> backward_fn) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data.assign(shape_numel(n->shape), 0.0);
    for (const auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor::wrap(std::move(n));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_2d(const Tensor& x, const char* op) {
    if (x.ndim() != 2)
        throw std::invalid_argument(std::string(op) + ": expected 2-d tensor, got " +
                                    shape_str(x.shape()));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (identical shapes)
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out = detail::op_result(a.shape(), {a.handle(), b.handle()}, [](detail::TensorNode& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        const std::size_t n = o.data.size();
        if (pa.requires_grad)
            for (std::size_t i = 0; i < n; ++i) pa.grad[i] += o.grad[i];
        if (pb.requires_grad)
            for (std::size_t i = 0; i < n; ++i) pb.grad[i] += o.grad[i];
    });
    const std::size_t n = out.numel();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out = detail::op_result(a.shape(), {a.handle(), b.handle()}, [](detail::TensorNode& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        const std::size_t n = o.data.size();
        if (pa.requires_grad)
            for (std::size_t i = 0; i < n; ++i) pa.grad[i] += o.grad[i];
        if (pb.requires_grad)
            for (std::size_t i = 0; i < n; ++i) pb.grad[i] -= o.grad[i];
    });
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out = detail::op_result(a.shape(), {a.handle(), b.handle()}, [](detail::TensorNode& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        const std::size_t n = o.data.size();
        if (pa.requires_grad)
            for (std::size_t i = 0; i < n; ++i) pa.grad[i] += o.grad[i] * pb.data[i];
        if (pb.requires_grad)
            for (std::size_t i = 0; i < n; ++i) pb.grad[i] += o.grad[i] * pa.data[i];
    });
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "div");
    Tensor out = detail::op_result(a.shape(), {a.handle(), b.handle()}, [](detail::TensorNode& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        const std::size_t n = o.data.size();
        if (pa.requires_grad)
            for (std::size_t i = 0; i < n; ++i) pa.grad[i] += o.grad[i] / pb.data[i];
        if (pb.requires_grad)
            for (std::size_t i = 0; i < n; ++i)
                pb.grad[i] -= o.grad[i] * pa.data[i] / (pb.data[i] * pb.data[i]);
    });
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] / b.data()[i];
    return out;
}

/// Elementwise max; ties route the gradient to the first argument.
inline Tensor elem_max(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "elem_max");
    Tensor out = detail::op_result(a.shape(), {a.handle(), b.handle()}, [](detail::TensorNode& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        const std::size_t n = o.data.size();
        for (std::size_t i = 0; i < n; ++i) {
            if (pa.data[i] >= pb.data[i]) {
                if (pa.requires_grad) pa.grad[i] += o.grad[i];
            } else if (pb.requires_grad) {
                pb.grad[i] += o.grad[i];
            }
        }
    });
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::max(a.data()[i], b.data()[i]);
    return out;
}

inline Tensor elem_min(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "elem_min");
    Tensor out = detail::op_result(a.shape(), {a.handle(), b.handle()}, [](detail::TensorNode& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        const std::size_t n = o.data.size();
        for (std::size_t i = 0; i < n; ++i) {
            if (pa.data[i] <= pb.data[i]) {
                if (pa.requires_grad) pa.grad[i] += o.grad[i];
            } else if (pb.requires_grad) {
                pb.grad[i] += o.grad[i];
            }
        }
    });
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::min(a.data()[i], b.data()[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Broadcast ops over 2-d tensors
// ---------------------------------------------------------------------------

namespace detail {
inline void require_rowvec(const Tensor& x, const Tensor& v, const char* op) {
    require_2d(x, op);
    if (v.numel() != x.cols())
        throw std::invalid_argument(std::string(op) + ": vector length " +
                                    std::to_string(v.numel()) + " does not match columns of " +
                                    shape_str(x.shape()));
}
inline void require_colvec(const Tensor& x, const Tensor& v, const char* op) {
    require_2d(x, op);
    if (v.numel() != x.rows())
        throw std::invalid_argument(std::string(op) + ": vector length " +
                                    std::to_string(v.numel()) + " does not match rows of " +
                                    shape_str(x.shape()));
}
} // namespace detail

/// y[i][j] = x[i][j] + v[j]
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    detail::require_rowvec(x, v, "add_rowvec");
    const std::size_t n = x.rows(), m = x.cols();
    Tensor out = detail::op_result(x.shape(), {x.handle(), v.handle()},
                                   [n, m](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        auto& pv = *o.parents[1];
        if (px.requires_grad)
            for (std::size_t i = 0; i < n * m; ++i) px.grad[i] += o.grad[i];
        if (pv.requires_grad)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) pv.grad[j] += o.grad[i * m + j];
    });
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.data()[i * m + j] = x.data()[i * m + j] + v.data()[j];
    return out;
}

/// y[i][j] = x[i][j] + v[i]
inline Tensor add_colvec(const Tensor& x, const Tensor& v) {
    detail::require_colvec(x, v, "add_colvec");
    const std::size_t n = x.rows(), m = x.cols();
    Tensor out = detail::op_result(x.shape(), {x.handle(), v.handle()},
                                   [n, m](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        auto& pv = *o.parents[1];
        if (px.requires_grad)
            for (std::size_t i = 0; i < n * m; ++i) px.grad[i] += o.grad[i];
        if (pv.requires_grad)
            for (std::size_t i = 0; i < n; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < m; ++j) acc += o.grad[i * m + j];
                pv.grad[i] += acc;
            }
    });
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.data()[i * m + j] = x.data()[i * m + j] + v.data()[i];
    return out;
}

/// y[i][j] = x[i][j] * v[i]
inline Tensor scale_rows(const Tensor& x, const Tensor& v) {
    detail::require_colvec(x, v, "scale_rows");
    const std::size_t n = x.rows(), m = x.cols();
    Tensor out = detail::op_result(x.shape(), {x.handle(), v.handle()},
                                   [n, m](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        auto& pv = *o.parents[1];
        if (px.requires_grad)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j)
                    px.grad[i * m + j] += o.grad[i * m + j] * pv.data[i];
        if (pv.requires_grad)
            for (std::size_t i = 0; i < n; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < m; ++j) acc += o.grad[i * m + j] * px.data[i * m + j];
                pv.grad[i] += acc;
            }
    });
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.data()[i * m + j] = x.data()[i * m + j] * v.data()[i];
    return out;
}

/// y[i][j] = x[i][j] * v[j]
inline Tensor scale_cols(const Tensor& x, const Tensor& v) {
    detail::require_rowvec(x, v, "scale_cols");
    const std::size_t n = x.rows(), m = x.cols();
    Tensor out = detail::op_result(x.shape(), {x.handle(), v.handle()},
                                   [n, m](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        auto& pv = *o.parents[1];
        if (px.requires_grad)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j)
                    px.grad[i * m + j] += o.grad[i * m + j] * pv.data[j];
        if (pv.requires_grad)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j)
                    pv.grad[j] += o.grad[i * m + j] * px.data[i * m + j];
    });
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.data()[i * m + j] = x.data()[i * m + j] * v.data()[j];
    return out;
}

// ---------------------------------------------------------------------------
// Scalar ops
// ---------------------------------------------------------------------------

inline Tensor add_scalar(const Tensor& x, double c) {
    Tensor out = detail::op_result(x.shape(), {x.handle()}, [](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < o.data.size(); ++i) px.grad[i] += o.grad[i];
    });
    for (std::size_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] + c;
    return out;
}

inline Tensor mul_scalar(const Tensor& x, double c) {
    Tensor out = detail::op_result(x.shape(), {x.handle()}, [c](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < o.data.size(); ++i) px.grad[i] += o.grad[i] * c;
    });
    for (std::size_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * c;
    return out;
}

/// Multiply a tensor by a learned scalar (1-element tensor).
inline Tensor scale_by(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1)
        throw std::invalid_argument("scale_by: scale must be scalar, got " + shape_str(s.shape()));
    Tensor out = detail::op_result(x.shape(), {x.handle(), s.handle()}, [](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        auto& ps = *o.parents[1];
        const double sv = ps.data[0];
        if (px.requires_grad)
            for (std::size_t i = 0; i < o.data.size(); ++i) px.grad[i] += o.grad[i] * sv;
        if (ps.requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < o.data.size(); ++i) acc += o.grad[i] * px.data[i];
            ps.grad[0] += acc;
        }
    });
    const double sv = s.data()[0];
    for (std::size_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * sv;
    return out;
}

/// Clamp into [lo, hi]; the gradient passes only strictly inside the interval.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
    Tensor out = detail::op_result(x.shape(), {x.handle()}, [lo, hi](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < o.data.size(); ++i)
            if (px.data[i] > lo && px.data[i] < hi) px.grad[i] += o.grad[i];
    });
    for (std::size_t i = 0; i < x.numel(); ++i)
        out.data()[i] = std::min(hi, std::max(lo, x.data()[i]));
    return out;
}

inline Tensor clamp_min(const Tensor& x, double lo) {
    return clamp(x, lo, std::numeric_limits<double>::infinity());
}

// ---------------------------------------------------------------------------
// Unary ops
// ---------------------------------------------------------------------------

namespace detail {
template <typename Fwd, typename Bwd>
inline Tensor unary_op(const Tensor& x, Fwd fwd, Bwd dydx) {
    Tensor out = op_result(x.shape(), {x.handle()}, [dydx](TensorNode& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < o.data.size(); ++i)
            px.grad[i] += o.grad[i] * dydx(px.data[i], o.data[i]);
    });
    for (std::size_t i = 0; i < x.numel(); ++i) out.data()[i] = fwd(x.data()[i]);
    return out;
}
} // namespace detail

inline Tensor neg(const Tensor& x) {
    return detail::unary_op(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

inline Tensor relu(const Tensor& x) {
    return detail::unary_op(x, [](double v) { return v > 0.0 ? v : 0.0; },
                            [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary_op(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                            [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp_t(const Tensor& x) {
    return detail::unary_op(x, [](double v) { return std::exp(v); },
                            [](double, double y) { return y; });
}

inline Tensor log_t(const Tensor& x) {
    return detail::unary_op(x, [](double v) { return std::log(v); },
                            [](double v, double) { return 1.0 / v; });
}

inline Tensor sqrt_t(const Tensor& x) {
    return detail::unary_op(x, [](double v) { return std::sqrt(v); },
                            [](double, double y) { return 0.5 / y; });
}

inline Tensor abs_t(const Tensor& x) {
    return detail::unary_op(x, [](double v) { return std::fabs(v); },
                            [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Tensor reciprocal(const Tensor& x) {
    return detail::unary_op(x, [](double v) { return 1.0 / v; },
                            [](double, double y) { return -y * y; });
}

inline Tensor pow_const(const Tensor& x, double e) {
    return detail::unary_op(x, [e](double v) { return std::pow(v, e); },
                            [e](double v, double) { return e * std::pow(v, e - 1.0); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
    Tensor out = detail::op_result({1}, {x.handle()}, [](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        const double g = o.grad[0];
        for (std::size_t i = 0; i < px.data.size(); ++i) px.grad[i] += g;
    });
    out.data()[0] = std::accumulate(x.data().begin(), x.data().end(), 0.0);
    return out;
}

inline Tensor mean_all(const Tensor& x) {
    const double inv = 1.0 / static_cast<double>(x.numel());
    Tensor out = detail::op_result({1}, {x.handle()}, [inv](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        const double g = o.grad[0] * inv;
        for (std::size_t i = 0; i < px.data.size(); ++i) px.grad[i] += g;
    });
    out.data()[0] = std::accumulate(x.data().begin(), x.data().end(), 0.0) * inv;
    return out;
}

/// n x m -> n (sum over columns of each row)
inline Tensor sum_rows(const Tensor& x) {
    detail::require_2d(x, "sum_rows");
    const std::size_t n = x.rows(), m = x.cols();
    Tensor out = detail::op_result({n}, {x.handle()}, [n, m](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < n; ++i) {
            const double g = o.grad[i];
            for (std::size_t j = 0; j < m; ++j) px.grad[i * m + j] += g;
        }
    });
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < m; ++j) acc += x.data()[i * m + j];
        out.data()[i] = acc;
    }
    return out;
}

/// n x m -> m (sum over rows of each column)
inline Tensor sum_cols(const Tensor& x) {
    detail::require_2d(x, "sum_cols");
    const std::size_t n = x.rows(), m = x.cols();
    Tensor out = detail::op_result({m}, {x.handle()}, [n, m](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) px.grad[i * m + j] += o.grad[j];
    });
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.data()[j] += x.data()[i * m + j];
    return out;
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, const Shape& shape) {
    if (shape_numel(shape) != x.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                    shape_str(shape));
    Tensor out = detail::op_result(shape, {x.handle()}, [](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < o.data.size(); ++i) px.grad[i] += o.grad[i];
    });
    out.data() = x.data();
    return out;
}

inline Tensor transpose(const Tensor& x) {
    detail::require_2d(x, "transpose");
    const std::size_t n = x.rows(), m = x.cols();
    Tensor out = detail::op_result({m, n}, {x.handle()}, [n, m](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) px.grad[i * m + j] += o.grad[j * n + i];
    });
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.data()[j * n + i] = x.data()[i * m + j];
    return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
    detail::require_2d(x, "slice_rows");
    if (r0 > r1 || r1 > x.rows())
        throw std::invalid_argument("slice_rows: range [" + std::to_string(r0) + ", " +
                                    std::to_string(r1) + ") invalid for " + shape_str(x.shape()));
    const std::size_t m = x.cols();
    Tensor out = detail::op_result({r1 - r0, m}, {x.handle()}, [r0, m](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < o.data.size(); ++i) px.grad[r0 * m + i] += o.grad[i];
    });
    std::copy(x.data().begin() + static_cast<std::ptrdiff_t>(r0 * m),
              x.data().begin() + static_cast<std::ptrdiff_t>(r1 * m), out.data().begin());
    return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    detail::require_2d(x, "slice_cols");
    if (c0 > c1 || c1 > x.cols())
        throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + ", " +
                                    std::to_string(c1) + ") invalid for " + shape_str(x.shape()));
    const std::size_t n = x.rows(), m = x.cols(), w = c1 - c0;
    Tensor out = detail::op_result({n, w}, {x.handle()}, [n, m, c0, w](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j) px.grad[i * m + c0 + j] += o.grad[i * w + j];
    });
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) out.data()[i * w + j] = x.data()[i * m + c0 + j];
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    const std::size_t m = parts[0].cols();
    std::size_t n = 0;
    std::vector<std::shared_ptr<detail::TensorNode>> parents;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_rows");
        if (p.cols() != m)
            throw std::invalid_argument("concat_rows: column mismatch " + shape_str(p.shape()));
        n += p.rows();
        parents.push_back(p.handle());
    }
    Tensor out = detail::op_result({n, m}, std::move(parents), [](detail::TensorNode& o) {
        std::size_t off = 0;
        for (auto& pp : o.parents) {
            auto& p = *pp;
            if (p.requires_grad)
                for (std::size_t i = 0; i < p.data.size(); ++i) p.grad[i] += o.grad[off + i];
            off += p.data.size();
        }
    });
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(),
                  out.data().begin() + static_cast<std::ptrdiff_t>(off));
        off += p.numel();
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
    const std::size_t n = parts[0].rows();
    std::size_t m = 0;
    std::vector<std::shared_ptr<detail::TensorNode>> parents;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p.rows() != n)
            throw std::invalid_argument("concat_cols: row mismatch " + shape_str(p.shape()));
        m += p.cols();
        widths.push_back(p.cols());
        parents.push_back(p.handle());
    }
    Tensor out = detail::op_result({n, m}, std::move(parents),
                                   [n, m, widths](detail::TensorNode& o) {
        std::size_t coff = 0;
        for (std::size_t k = 0; k < o.parents.size(); ++k) {
            auto& p = *o.parents[k];
            const std::size_t w = widths[k];
            if (p.requires_grad)
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < w; ++j)
                        p.grad[i * w + j] += o.grad[i * m + coff + j];
            coff += w;
        }
    });
    std::size_t coff = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.cols();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j)
                out.data()[i * m + coff + j] = p.data()[i * w + j];
        coff += w;
    }
    return out;
}

inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
    detail::require_2d(x, "gather_rows");
    const std::size_t m = x.cols();
    for (std::size_t i : idx)
        if (i >= x.rows())
            throw std::invalid_argument("gather_rows: index " + std::to_string(i) +
                                        " out of range for " + shape_str(x.shape()));
    Tensor out = detail::op_result({idx.size(), m}, {x.handle()}, [idx, m](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < m; ++j) px.grad[idx[r] * m + j] += o.grad[r * m + j];
    });
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy(x.data().begin() + static_cast<std::ptrdiff_t>(idx[r] * m),
                  x.data().begin() + static_cast<std::ptrdiff_t>((idx[r] + 1) * m),
                  out.data().begin() + static_cast<std::ptrdiff_t>(r * m));
    return out;
}

// ---------------------------------------------------------------------------
// Fused numerical ops
// ---------------------------------------------------------------------------

/// Numerically-stabilized softmax. 1-d tensors ignore `axis`; on 2-d
/// tensors axis=1 normalizes rows, axis=0 normalizes columns.
inline Tensor softmax(const Tensor& x, int axis = -1) {
    if (x.ndim() == 1) {
        Tensor row = reshape(x, {1, x.numel()});
        return reshape(softmax(row, 1), x.shape());
    }
    detail::require_2d(x, "softmax");
    if (axis == -1) axis = 1;
    if (axis != 0 && axis != 1)
        throw std::invalid_argument("softmax: axis must be 0 or 1, got " + std::to_string(axis));
    if (axis == 0) return transpose(softmax(transpose(x), 1));

    const std::size_t n = x.rows(), m = x.cols();
    Tensor out = detail::op_result(x.shape(), {x.handle()}, [n, m](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < n; ++i) {
            const double* s = o.data.data() + i * m;
            const double* g = o.grad.data() + i * m;
            double dot = 0.0;
            for (std::size_t j = 0; j < m; ++j) dot += s[j] * g[j];
            double* gx = px.grad.data() + i * m;
            for (std::size_t j = 0; j < m; ++j) gx[j] += s[j] * (g[j] - dot);
        }
    });
    for (std::size_t i = 0; i < n; ++i) {
        const double* xi = x.data().data() + i * m;
        double* oi = out.data().data() + i * m;
        double mx = xi[0];
        for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, xi[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            oi[j] = std::exp(xi[j] - mx);
            z += oi[j];
        }
        const double inv = 1.0 / z;
        for (std::size_t j = 0; j < m; ++j) oi[j] *= inv;
    }
    return out;
}

/// Layer normalization over the last axis of a 2-d tensor, with affine
/// gain/bias of length cols. Variance is the population variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    detail::require_2d(x, "layer_norm");
    if (gain.numel() != x.cols() || bias.numel() != x.cols())
        throw std::invalid_argument("layer_norm: gain/bias length must match columns of " +
                                    shape_str(x.shape()));
    if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be > 0");
    const std::size_t n = x.rows(), m = x.cols();
    std::vector<double> mu(n), inv(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* xi = x.data().data() + i * m;
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += xi[j];
        mu[i] = s / static_cast<double>(m);
        double v = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            const double c = xi[j] - mu[i];
            v += c * c;
        }
        inv[i] = 1.0 / std::sqrt(v / static_cast<double>(m) + eps);
    }
    Tensor out = detail::op_result(x.shape(), {x.handle(), gain.handle(), bias.handle()},
                                   [n, m, mu, inv](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        auto& pg = *o.parents[1];
        auto& pb = *o.parents[2];
        std::vector<double> xhat(m), dxhat(m);
        for (std::size_t i = 0; i < n; ++i) {
            const double* xi = px.data.data() + i * m;
            const double* gi = o.grad.data() + i * m;
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                xhat[j] = (xi[j] - mu[i]) * inv[i];
                dxhat[j] = gi[j] * pg.data[j];
                m1 += dxhat[j];
                m2 += dxhat[j] * xhat[j];
            }
            m1 /= static_cast<double>(m);
            m2 /= static_cast<double>(m);
            if (px.requires_grad) {
                double* gx = px.grad.data() + i * m;
                for (std::size_t j = 0; j < m; ++j)
                    gx[j] += inv[i] * (dxhat[j] - m1 - xhat[j] * m2);
            }
            if (pg.requires_grad)
                for (std::size_t j = 0; j < m; ++j) pg.grad[j] += gi[j] * xhat[j];
            if (pb.requires_grad)
                for (std::size_t j = 0; j < m; ++j) pb.grad[j] += gi[j];
        }
    });
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            out.data()[i * m + j] =
                (x.data()[i * m + j] - mu[i]) * inv[i] * gain.data()[j] + bias.data()[j];
    return out;
}

/// Inverted dropout with a caller-supplied RNG stream; identity when not
/// training or rate == 0.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0)
        throw std::invalid_argument("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return x;
    const double keep = 1.0 - rate;
    const double scale = 1.0 / keep;
    std::vector<double> mask(x.numel());
    for (std::size_t i = 0; i < mask.size(); ++i)
        mask[i] = rng.uniform() < keep ? scale : 0.0;
    Tensor out = detail::op_result(x.shape(), {x.handle()}, [mask](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < o.data.size(); ++i) px.grad[i] += o.grad[i] * mask[i];
    });
    for (std::size_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * mask[i];
    return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = detail::op_result({m, n}, {a.handle(), b.handle()},
                                   [m, k, n](detail::TensorNode& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        if (pa.requires_grad)
            detail::mm_nt(o.grad.data(), pb.data.data(), pa.grad.data(), m, n, k);
        if (pb.requires_grad)
            detail::mm_tn(pa.data.data(), o.grad.data(), pb.grad.data(), m, k, n);
    });
    detail::mm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    return out;
}

/// Unfold a (H, W, C) tensor into convolution patches: the output has
/// one row per output pixel (row-major) and k*k*C columns ordered (ky, kx, c).
inline Tensor im2col(const Tensor& x, std::size_t k, std::size_t stride, std::size_t pad) {
    if (x.ndim() != 3)
        throw std::invalid_argument("im2col: expected (H, W, C) tensor, got " +
                                    shape_str(x.shape()));
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (h + 2 * pad < k || w + 2 * pad < k)
        throw std::invalid_argument("im2col: kernel larger than padded input");
    const std::size_t ho = (h + 2 * pad - k) / stride + 1;
    const std::size_t wo = (w + 2 * pad - k) / stride + 1;
    const std::size_t cols = k * k * c;
    Tensor out = detail::op_result({ho * wo, cols}, {x.handle()},
                                   [h, w, c, k, stride, pad, ho, wo, cols](detail::TensorNode& o) {
        auto& px = *o.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                const double* row = o.grad.data() + (oy * wo + ox) * cols;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        double* dst = px.grad.data() + (static_cast<std::size_t>(iy) * w +
                                                        static_cast<std::size_t>(ix)) * c;
                        const double* src = row + (ky * k + kx) * c;
                        for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                    }
                }
            }
    });
    for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
            double* row = out.data().data() + (oy * wo + ox) * cols;
            for (std::size_t ky = 0; ky < k; ++ky) {
                const std::ptrdiff_t iy =
                    static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const std::ptrdiff_t ix =
                        static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                    double* dst = row + (ky * k + kx) * c;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix < 0 ||
                        ix >= static_cast<std::ptrdiff_t>(w)) {
                        for (std::size_t ch = 0; ch < c; ++ch) dst[ch] = 0.0;
                    } else {
                        const double* src = x.data().data() + (static_cast<std::size_t>(iy) * w +
                                                               static_cast<std::size_t>(ix)) * c;
                        for (std::size_t ch = 0; ch < c; ++ch) dst[ch] = src[ch];
                    }
                }
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

namespace detail {
inline void topo_collect(TensorNode* root, std::vector<TensorNode*>& order) {
    // Iterative post-order DFS over requires_grad nodes.
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        TensorNode* node = stack.back().first;
        std::size_t i = stack.back().second;
        TensorNode* child = nullptr;
        while (i < node->parents.size()) {
            TensorNode* p = node->parents[i++].get();
            if (p->requires_grad && !visited.count(p)) {
                child = p;
                break;
            }
        }
        stack.back().second = i;
        if (child) {
            visited.insert(child);
            stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}
} // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// requires_grad tensor reachable from the loss. A second sweep from the
/// same loss tensor is rejected until reset_backward is called.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be a scalar tensor");
    detail::TensorNode* root = loss.node();
    if (!root->requires_grad)
        throw std::invalid_argument("backward: loss does not require grad (nothing on the tape)");
    if (root->backward_done)
        throw std::logic_error("backward: already run for this loss; call reset_backward first");

    std::vector<detail::TensorNode*> order;
    detail::topo_collect(root, order);
    // Leaf tensors accumulate across sweeps; interior nodes start fresh so a
    // reset + rerun of the same tape reproduces the same contributions.
    for (detail::TensorNode* n : order) {
        if (n->grad.size() != n->data.size())
            n->grad.assign(n->data.size(), 0.0);
        else if (n->backward_fn)
            std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    root->backward_done = true;
}

inline void reset_backward(const Tensor& loss) {
    if (loss.defined()) loss.node()->backward_done = false;
}

} // namespace gptr
