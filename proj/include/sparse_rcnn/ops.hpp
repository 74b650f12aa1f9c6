#pragma once

// Differentiable tensor operations. Each op computes its forward value
// eagerly and registers an exact backward rule on the tape.

#include <sparse_rcnn/kernels.hpp>
#include <sparse_rcnn/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace sparse_rcnn {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

inline void require_rank(const Tensor& a, std::size_t rank, const char* op) {
    if (a.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                             shape_str(a.shape()));
    }
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
    return make_op(a.shape(), std::move(out), "add", {a, b}, [](detail::Node& n) {
        for (std::size_t k = 0; k < 2; ++k)
            if (n.input_needs_grad(k)) n.accumulate_grad(k, n.grad.data());
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return make_op(a.shape(), std::move(out), "sub", {a, b}, [](detail::Node& n) {
        if (n.input_needs_grad(0)) {
            auto& g = n.input_grad(0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (n.input_needs_grad(1)) {
            auto& g = n.input_grad(1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return make_op(a.shape(), std::move(out), "mul", {a, b}, [](detail::Node& n) {
        const auto& av = n.input_data(0);
        const auto& bv = n.input_data(1);
        if (n.input_needs_grad(0)) {
            auto& g = n.input_grad(0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
        }
        if (n.input_needs_grad(1)) {
            auto& g = n.input_grad(1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    const double* pa = a.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * s;
    return make_op(a.shape(), std::move(out), "scale", {a}, [s](detail::Node& n) {
        double* g = n.input_grad(0).data();
        const double* dy = n.grad.data();
        for (std::size_t i = 0, m = n.grad.size(); i < m; ++i) g[i] += dy[i] * s;
    });
}

// x[..., n] + bias[n], broadcast over all leading dimensions.
inline Tensor add_row(const Tensor& x, const Tensor& bias) {
    const std::size_t n = bias.numel();
    if (x.rank() == 0 || x.shape().back() != n) {
        throw DimensionError("add_row: bias of " + shape_str(bias.shape()) + " does not match trailing dim of " +
                             shape_str(x.shape()));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    const std::size_t rows = out.size() / n;
    const double* pb = bias.data().data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] += pb[j];
    return make_op(x.shape(), std::move(out), "add_row", {x, bias}, [n](detail::Node& nd) {
        if (nd.input_needs_grad(0)) nd.accumulate_grad(0, nd.grad.data());
        if (nd.input_needs_grad(1)) {
            double* g = nd.input_grad(1).data();
            const std::size_t rows = nd.grad.size() / n;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* dy = nd.grad.data() + r * n;
                for (std::size_t j = 0; j < n; ++j) g[j] += dy[j];
            }
        }
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    const double* pa = a.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] > 0.0 ? pa[i] : 0.0;
    return make_op(a.shape(), std::move(out), "relu", {a}, [](detail::Node& n) {
        double* g = n.input_grad(0).data();
        const double* x = n.input_data(0).data();
        const double* dy = n.grad.data();
        for (std::size_t i = 0, m = n.grad.size(); i < m; ++i) g[i] += x[i] > 0.0 ? dy[i] : 0.0;
    });
}

inline double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(a[i]);
    return make_op(a.shape(), std::move(out), "sigmoid", {a}, [](detail::Node& n) {
        auto& g = n.input_grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * n.data[i] * (1.0 - n.data[i]);
    });
}

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_op(Shape{1}, {s}, "sum", {a}, [](detail::Node& n) {
        auto& g = n.input_grad(0);
        for (double& v : g) v += n.grad[0];
    });
}

// Value-identical copy that stops gradient propagation.
inline Tensor detach(const Tensor& a) { return a.clone(); }

// ---------------------------------------------------------------- structural

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_op(std::move(shape), std::move(out), "reshape", {a},
                   [](detail::Node& n) { n.accumulate_grad(0, n.grad.data()); });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank(a, 2, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(a.numel());
    kernels::transpose(r, c, a.data().data(), out.data());
    return make_op(Shape{c, r}, std::move(out), "transpose", {a}, [r, c](detail::Node& n) {
        auto& g = n.input_grad(0);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j * r + i];
    });
}

// [B x P x Q] -> [B x Q x P]
inline Tensor transpose_last2(const Tensor& a) {
    detail::require_rank(a, 3, "transpose_last2");
    const std::size_t b = a.dim(0), p = a.dim(1), q = a.dim(2);
    std::vector<double> out(a.numel());
    for (std::size_t s = 0; s < b; ++s) kernels::transpose(p, q, a.data().data() + s * p * q, out.data() + s * p * q);
    return make_op(Shape{b, q, p}, std::move(out), "transpose_last2", {a}, [b, p, q](detail::Node& n) {
        auto& g = n.input_grad(0);
        for (std::size_t s = 0; s < b; ++s) {
            const double* src = n.grad.data() + s * p * q;
            double* dst = g.data() + s * p * q;
            for (std::size_t i = 0; i < q; ++i)
                for (std::size_t j = 0; j < p; ++j) dst[j * q + i] += src[i * p + j];
        }
    });
}

// Columns [begin, end) of a 2-D tensor.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    detail::require_rank(a, 2, "slice_cols");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (begin > end || end > cols) {
        throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") out of " + shape_str(a.shape()));
    }
    const std::size_t w = end - begin;
    std::vector<double> out(rows * w);
    const double* pa = a.data().data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(pa + r * cols + begin, w, out.data() + r * w);
    return make_op(Shape{rows, w}, std::move(out), "slice_cols", {a}, [rows, cols, begin, w](detail::Node& n) {
        double* g = n.input_grad(0).data();
        for (std::size_t r = 0; r < rows; ++r) {
            double* dst = g + r * cols + begin;
            const double* src = n.grad.data() + r * w;
            for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
        }
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t rows = parts[0].dim(0);
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        detail::require_rank(p, 2, "concat_cols");
        if (p.dim(0) != rows) {
            throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        widths.push_back(p.dim(1));
        total += p.dim(1);
    }
    std::vector<double> out(rows * total);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < widths[k]; ++j) out[r * total + off + j] = parts[k][r * widths[k] + j];
        off += widths[k];
    }
    return make_op(Shape{rows, total}, std::move(out), "concat_cols", parts, [rows, total, widths](detail::Node& n) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            if (n.input_needs_grad(k)) {
                auto& g = n.input_grad(k);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < widths[k]; ++j) g[r * widths[k] + j] += n.grad[r * total + off + j];
            }
            off += widths[k];
        }
    });
}

// Rows [begin, end) along the leading dimension.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    if (a.rank() == 0 || begin > end || end > a.dim(0)) {
        throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                             shape_str(a.shape()));
    }
    const std::size_t stride = a.numel() / a.dim(0);
    Shape shape = a.shape();
    shape[0] = end - begin;
    std::vector<double> out(a.data().begin() + begin * stride, a.data().begin() + end * stride);
    return make_op(std::move(shape), std::move(out), "slice_rows", {a}, [off = begin * stride](detail::Node& n) {
        auto& g = n.input_grad(0);
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[off + i] += n.grad[i];
    });
}

// Stacks `times` copies of a along the leading dimension.
inline Tensor repeat_rows(const Tensor& a, std::size_t times) {
    if (a.rank() == 0) throw DimensionError("repeat_rows: rank-0 tensor");
    Shape shape = a.shape();
    shape[0] *= times;
    std::vector<double> out;
    out.reserve(a.numel() * times);
    for (std::size_t t = 0; t < times; ++t) out.insert(out.end(), a.data().begin(), a.data().end());
    return make_op(std::move(shape), std::move(out), "repeat_rows", {a}, [times](detail::Node& n) {
        auto& g = n.input_grad(0);
        const std::size_t len = g.size();
        for (std::size_t t = 0; t < times; ++t)
            for (std::size_t i = 0; i < len; ++i) g[i] += n.grad[t * len + i];
    });
}

// [B x L x (H*d)] -> [(B*H) x L x d]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
    detail::require_rank(x, 3, "split_heads");
    const std::size_t b = x.dim(0), l = x.dim(1), c = x.dim(2);
    if (heads == 0 || c % heads != 0) {
        throw DimensionError("split_heads: " + std::to_string(c) + " channels not divisible by " +
                             std::to_string(heads) + " heads");
    }
    const std::size_t d = c / heads;
    std::vector<double> out(x.numel());
    for (std::size_t s = 0; s < b; ++s)
        for (std::size_t i = 0; i < l; ++i)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t k = 0; k < d; ++k)
                    out[((s * heads + h) * l + i) * d + k] = x[(s * l + i) * c + h * d + k];
    return make_op(Shape{b * heads, l, d}, std::move(out), "split_heads", {x}, [b, l, c, d, heads](detail::Node& n) {
        auto& g = n.input_grad(0);
        for (std::size_t s = 0; s < b; ++s)
            for (std::size_t i = 0; i < l; ++i)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t k = 0; k < d; ++k)
                        g[(s * l + i) * c + h * d + k] += n.grad[((s * heads + h) * l + i) * d + k];
    });
}

// [(B*H) x L x d] -> [B x L x (H*d)]
inline Tensor merge_heads(const Tensor& x, std::size_t heads) {
    detail::require_rank(x, 3, "merge_heads");
    if (heads == 0 || x.dim(0) % heads != 0) {
        throw DimensionError("merge_heads: leading dim of " + shape_str(x.shape()) + " not divisible by heads");
    }
    const std::size_t b = x.dim(0) / heads, l = x.dim(1), d = x.dim(2), c = heads * d;
    std::vector<double> out(x.numel());
    for (std::size_t s = 0; s < b; ++s)
        for (std::size_t i = 0; i < l; ++i)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t k = 0; k < d; ++k)
                    out[(s * l + i) * c + h * d + k] = x[((s * heads + h) * l + i) * d + k];
    return make_op(Shape{b, l, c}, std::move(out), "merge_heads", {x}, [b, l, c, d, heads](detail::Node& n) {
        auto& g = n.input_grad(0);
        for (std::size_t s = 0; s < b; ++s)
            for (std::size_t i = 0; i < l; ++i)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t k = 0; k < d; ++k)
                        g[((s * heads + h) * l + i) * d + k] += n.grad[(s * l + i) * c + h * d + k];
    });
}

// ---------------------------------------------------------------- products

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
    return make_op(Shape{m, n}, std::move(out), "matmul", {a, b}, [m, k, n](detail::Node& nd) {
        if (nd.input_needs_grad(0)) kernels::gemm_nt(m, k, n, nd.grad.data(), nd.input_data(1).data(), nd.input_grad(0).data());
        if (nd.input_needs_grad(1)) kernels::gemm_tn(k, n, m, nd.input_data(0).data(), nd.grad.data(), nd.input_grad(1).data());
    });
}

inline Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t bs = a.dim(0), p = a.dim(1), q = a.dim(2), r = b.dim(2);
    std::vector<double> out(bs * p * r, 0.0);
    for (std::size_t s = 0; s < bs; ++s)
        kernels::gemm_nn(p, r, q, a.data().data() + s * p * q, b.data().data() + s * q * r, out.data() + s * p * r);
    return make_op(Shape{bs, p, r}, std::move(out), "bmm", {a, b}, [bs, p, q, r](detail::Node& nd) {
        const bool ga = nd.input_needs_grad(0), gb = nd.input_needs_grad(1);
        double* da = ga ? nd.input_grad(0).data() : nullptr;
        double* db = gb ? nd.input_grad(1).data() : nullptr;
        for (std::size_t s = 0; s < bs; ++s) {
            const double* dc = nd.grad.data() + s * p * r;
            if (ga) kernels::gemm_nt(p, q, r, dc, nd.input_data(1).data() + s * q * r, da + s * p * q);
            if (gb) kernels::gemm_tn(q, r, p, nd.input_data(0).data() + s * p * q, dc, db + s * q * r);
        }
    });
}

// x[m x in] * weight[in x out] + bias[out]; bias may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0)) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    const std::size_t m = x.dim(0), k = x.dim(1), n = weight.dim(1);
    const bool has_bias = bias.defined();
    if (has_bias && bias.numel() != n) {
        throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    if (has_bias)
        for (std::size_t i = 0; i < m; ++i) std::copy_n(bias.data().data(), n, out.data() + i * n);
    kernels::gemm_nn(m, n, k, x.data().data(), weight.data().data(), out.data());
    auto rule = [m, k, n, has_bias](detail::Node& nd) {
        if (nd.input_needs_grad(0)) kernels::gemm_nt(m, k, n, nd.grad.data(), nd.input_data(1).data(), nd.input_grad(0).data());
        if (nd.input_needs_grad(1)) kernels::gemm_tn(k, n, m, nd.input_data(0).data(), nd.grad.data(), nd.input_grad(1).data());
        if (has_bias && nd.input_needs_grad(2)) {
            double* g = nd.input_grad(2).data();
            for (std::size_t i = 0; i < m; ++i) {
                const double* dy = nd.grad.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) g[j] += dy[j];
            }
        }
    };
    if (has_bias) return make_op(Shape{m, n}, std::move(out), "linear", {x, weight, bias}, rule);
    return make_op(Shape{m, n}, std::move(out), "linear", {x, weight}, rule);
}

// ---------------------------------------------------------------- normalization

// Softmax over the last dimension (row max subtracted).
inline Tensor softmax(const Tensor& a) {
    if (a.rank() == 0) throw DimensionError("softmax: rank-0 tensor");
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.numel() / n;
    std::vector<double> out(a.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.data().data() + r * n;
        double* y = out.data() + r * n;
        double mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            s += y[j];
        }
        for (std::size_t j = 0; j < n; ++j) y[j] /= s;
    }
    return make_op(a.shape(), std::move(out), "softmax", {a}, [n, rows](detail::Node& nd) {
        auto& g = nd.input_grad(0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = nd.data.data() + r * n;
            const double* dy = nd.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
        }
    });
}

// Normalizes over the last dimension, then applies gamma * xhat + beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    if (x.rank() == 0) throw DimensionError("layer_norm: rank-0 tensor");
    const std::size_t n = x.shape().back();
    if (gamma.numel() != n || beta.numel() != n) {
        throw DimensionError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                             shape_str(beta.shape()) + " vs input " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / n;
    std::vector<double> xhat(x.numel()), inv_std(rows), out(x.numel());
    const double* px = x.data().data();
    const double* pg = gamma.data().data();
    const double* pb = beta.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = px + r * n;
        double* hr = xhat.data() + r * n;
        double* yr = out.data() + r * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += xr[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < n; ++j) {
            hr[j] = (xr[j] - mean) * is;
            yr[j] = hr[j] * pg[j] + pb[j];
        }
    }
    return make_op(x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
                   [n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& nd) {
                       const double* gam = nd.input_data(1).data();
                       if (nd.input_needs_grad(0)) {
                           double* g = nd.input_grad(0).data();
                           std::vector<double> dxhat(n);
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* dy = nd.grad.data() + r * n;
                               const double* hr = xhat.data() + r * n;
                               double mean_d = 0.0, mean_dx = 0.0;
                               for (std::size_t j = 0; j < n; ++j) {
                                   dxhat[j] = dy[j] * gam[j];
                                   mean_d += dxhat[j];
                                   mean_dx += dxhat[j] * hr[j];
                               }
                               mean_d /= static_cast<double>(n);
                               mean_dx /= static_cast<double>(n);
                               double* gr = g + r * n;
                               for (std::size_t j = 0; j < n; ++j) gr[j] += inv_std[r] * (dxhat[j] - mean_d - hr[j] * mean_dx);
                           }
                       }
                       for (std::size_t k = 1; k < 3; ++k) {
                           if (!nd.input_needs_grad(k)) continue;
                           double* g = nd.input_grad(k).data();
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* dy = nd.grad.data() + r * n;
                               const double* hr = xhat.data() + r * n;
                               if (k == 1)
                                   for (std::size_t j = 0; j < n; ++j) g[j] += dy[j] * hr[j];
                               else
                                   for (std::size_t j = 0; j < n; ++j) g[j] += dy[j];
                           }
                       }
                   });
}

// ---------------------------------------------------------------- convolution

// NCHW convolution with square kernels, zero padding and stride 1 or 2.
// weight: [out_ch x in_ch x k x k], bias: [out_ch] (may be undefined).
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
    detail::require_rank(x, 4, "conv2d input");
    detail::require_rank(weight, 4, "conv2d weight");
    const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t cout = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != cin || weight.dim(3) != k) {
        throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                             shape_str(x.shape()));
    }
    if (stride != 1 && stride != 2) throw ContractError("conv2d: stride must be 1 or 2");
    if (k == 0 || k > 7) throw ContractError("conv2d: kernel size must be in [1, 7]");
    if (k > h + 2 * padding || k > w + 2 * padding) {
        throw DimensionError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                             shape_str(x.shape()));
    }
    const bool has_bias = bias.defined();
    if (has_bias && bias.numel() != cout) throw DimensionError("conv2d: bias size mismatch");

    const std::size_t ho = (h + 2 * padding - k) / stride + 1;
    const std::size_t wo = (w + 2 * padding - k) / stride + 1;
    const std::size_t patch = cin * k * k, pix = ho * wo;

    // im2col for every image: cols[b] is [patch x pix].
    std::vector<double> cols(batch * patch * pix, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        const double* xb = x.data().data() + b * cin * h * w;
        double* cb = cols.data() + b * patch * pix;
        for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                    double* row = cb + ((c * k + ky) * k + kx) * pix;
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                        if (iy < 0 || iy >= static_cast<long>(h)) continue;
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                            if (ix < 0 || ix >= static_cast<long>(w)) continue;
                            row[oy * wo + ox] = xb[(c * h + iy) * w + ix];
                        }
                    }
                }
    }

    std::vector<double> out(batch * cout * pix, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        double* ob = out.data() + b * cout * pix;
        if (has_bias)
            for (std::size_t o = 0; o < cout; ++o)
                for (std::size_t p = 0; p < pix; ++p) ob[o * pix + p] = bias[o];
        kernels::gemm_nn(cout, pix, patch, weight.data().data(), cols.data() + b * patch * pix, ob);
    }

    auto rule = [=, cols = std::move(cols)](detail::Node& nd) {
        const double* wdata = nd.input_data(1).data();
        if (nd.input_needs_grad(1)) {
            double* gw = nd.input_grad(1).data();
            for (std::size_t b = 0; b < batch; ++b)
                kernels::gemm_nt(cout, patch, pix, nd.grad.data() + b * cout * pix, cols.data() + b * patch * pix, gw);
        }
        if (has_bias && nd.input_needs_grad(2)) {
            auto& gb = nd.input_grad(2);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t o = 0; o < cout; ++o)
                    for (std::size_t p = 0; p < pix; ++p) gb[o] += nd.grad[(b * cout + o) * pix + p];
        }
        if (nd.input_needs_grad(0)) {
            double* gx = nd.input_grad(0).data();
            std::vector<double> dcols(patch * pix);
            for (std::size_t b = 0; b < batch; ++b) {
                std::fill(dcols.begin(), dcols.end(), 0.0);
                kernels::gemm_tn(patch, pix, cout, wdata, nd.grad.data() + b * cout * pix, dcols.data());
                double* gxb = gx + b * cin * h * w;
                for (std::size_t c = 0; c < cin; ++c)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const double* row = dcols.data() + ((c * k + ky) * k + kx) * pix;
                            for (std::size_t oy = 0; oy < ho; ++oy) {
                                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                                for (std::size_t ox = 0; ox < wo; ++ox) {
                                    const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                                    if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                    gxb[(c * h + iy) * w + ix] += row[oy * wo + ox];
                                }
                            }
                        }
            }
        }
    };
    Shape shape{batch, cout, ho, wo};
    if (has_bias) return make_op(std::move(shape), std::move(out), "conv2d", {x, weight, bias}, rule);
    return make_op(std::move(shape), std::move(out), "conv2d", {x, weight}, rule);
}

}  // namespace sparse_rcnn
