#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "loopmem/graph.hpp"
#include "loopmem/tensor.hpp"
#include "loopmem/tokens.hpp"

// Differentiable ops over Tensor. Every reduction runs in a fixed index order so
// repeated evaluation is bit-identical.

namespace loopmem {

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

using StoragePtr = std::shared_ptr<TensorStorage>;

inline Tensor make_result(Graph& g, Shape shape, std::vector<double> data,
                          std::initializer_list<const Tensor*> inputs) {
    return Tensor(std::move(shape), std::move(data), g.needs_grad(inputs));
}

inline bool wants(const StoragePtr& s) { return s && s->requires_grad; }

enum class Broadcast { same, scalar, suffix };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) {
        return Broadcast::same;
    }
    if (b.numel() == 1) {
        return Broadcast::scalar;
    }
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (bs.size() < as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
        return Broadcast::suffix;
    }
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(bs) + " onto " + shape_str(as));
}

inline double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

inline double gelu_grad(double x) {
    const double th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

template <class Fwd, class Grad>
Tensor unary(Graph& g, const Tensor& x, const char* name, Fwd fwd, Grad grad) {
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = fwd(xd[i]);
    }
    Tensor y = make_result(g, x.shape(), std::move(out), {&x});
    if (y.requires_grad()) {
        StoragePtr xs = x.storage_ptr();
        StoragePtr ys = y.storage_ptr();
        g.record(name, {&x}, y, [xs, ys, grad] {
            auto& gx = xs->grad_buffer();
            for (std::size_t i = 0; i < gx.size(); ++i) {
                gx[i] += ys->grad[i] * grad(xs->data[i], ys->data[i]);
            }
        });
    }
    return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. `b` may equal a's shape, be a single element, or match
// a trailing suffix of a's shape (bias-style broadcast).

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
    detail::broadcast_kind(a, b, "add");
    const std::size_t nb = b.numel();
    std::vector<double> out(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ad[i] + bd[i % nb];
    }
    Tensor y = detail::make_result(g, a.shape(), std::move(out), {&a, &b});
    if (y.requires_grad()) {
        auto as = a.storage_ptr();
        auto bs = b.storage_ptr();
        auto ys = y.storage_ptr();
        g.record("add", {&a, &b}, y, [as, bs, ys, nb] {
            const auto& gy = ys->grad;
            if (as->requires_grad) {
                auto& ga = as->grad_buffer();
                for (std::size_t i = 0; i < gy.size(); ++i) {
                    ga[i] += gy[i];
                }
            }
            if (bs->requires_grad) {
                auto& gb = bs->grad_buffer();
                for (std::size_t i = 0; i < gy.size(); ++i) {
                    gb[i % nb] += gy[i];
                }
            }
        });
    }
    return y;
}

inline Tensor sub(Graph& g, const Tensor& a, const Tensor& b) {
    detail::broadcast_kind(a, b, "sub");
    const std::size_t nb = b.numel();
    std::vector<double> out(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ad[i] - bd[i % nb];
    }
    Tensor y = detail::make_result(g, a.shape(), std::move(out), {&a, &b});
    if (y.requires_grad()) {
        auto as = a.storage_ptr();
        auto bs = b.storage_ptr();
        auto ys = y.storage_ptr();
        g.record("sub", {&a, &b}, y, [as, bs, ys, nb] {
            const auto& gy = ys->grad;
            if (as->requires_grad) {
                auto& ga = as->grad_buffer();
                for (std::size_t i = 0; i < gy.size(); ++i) {
                    ga[i] += gy[i];
                }
            }
            if (bs->requires_grad) {
                auto& gb = bs->grad_buffer();
                for (std::size_t i = 0; i < gy.size(); ++i) {
                    gb[i % nb] -= gy[i];
                }
            }
        });
    }
    return y;
}

inline Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
    detail::broadcast_kind(a, b, "mul");
    const std::size_t nb = b.numel();
    std::vector<double> out(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ad[i] * bd[i % nb];
    }
    Tensor y = detail::make_result(g, a.shape(), std::move(out), {&a, &b});
    if (y.requires_grad()) {
        auto as = a.storage_ptr();
        auto bs = b.storage_ptr();
        auto ys = y.storage_ptr();
        g.record("mul", {&a, &b}, y, [as, bs, ys, nb] {
            const auto& gy = ys->grad;
            if (as->requires_grad) {
                auto& ga = as->grad_buffer();
                for (std::size_t i = 0; i < gy.size(); ++i) {
                    ga[i] += gy[i] * bs->data[i % nb];
                }
            }
            if (bs->requires_grad) {
                auto& gb = bs->grad_buffer();
                for (std::size_t i = 0; i < gy.size(); ++i) {
                    gb[i % nb] += gy[i] * as->data[i];
                }
            }
        });
    }
    return y;
}

/// y = scale * x + shift
inline Tensor affine(Graph& g, const Tensor& x, double scale, double shift) {
    return detail::unary(
        g, x, "affine", [scale, shift](double v) { return scale * v + shift; },
        [scale](double, double) { return scale; });
}

inline Tensor scale(Graph& g, const Tensor& x, double s) { return affine(g, x, s, 0.0); }

/// x[..., D] scaled row-wise by s[...]. s.shape must equal x.shape without its last axis.
inline Tensor scale_rows(Graph& g, const Tensor& x, const Tensor& s) {
    Shape lead(x.shape().begin(), x.shape().end() - 1);
    if (s.shape() != lead) {
        throw ShapeError("scale_rows: row scales " + shape_str(s.shape()) + " do not match " +
                         shape_str(x.shape()));
    }
    const std::size_t d = x.shape().back();
    const std::size_t rows = s.numel();
    std::vector<double> out(x.numel());
    auto xd = x.data();
    auto sd = s.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            out[r * d + j] = xd[r * d + j] * sd[r];
        }
    }
    Tensor y = detail::make_result(g, x.shape(), std::move(out), {&x, &s});
    if (y.requires_grad()) {
        auto xs = x.storage_ptr();
        auto ss = s.storage_ptr();
        auto ys = y.storage_ptr();
        g.record("scale_rows", {&x, &s}, y, [xs, ss, ys, rows, d] {
            const auto& gy = ys->grad;
            if (xs->requires_grad) {
                auto& gx = xs->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) {
                        gx[r * d + j] += gy[r * d + j] * ss->data[r];
                    }
                }
            }
            if (ss->requires_grad) {
                auto& gs = ss->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        acc += gy[r * d + j] * xs->data[r * d + j];
                    }
                    gs[r] += acc;
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

// C[m x n] += A[m x k] * B[k x n]; each C[i,j] accumulates over k in increasing order.
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// dA[m x k] += dC[m x n] * B^T
inline void gemm_nt(const double* dc, const double* b, double* da, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* brow = b + p * n;
            const double* dcrow = dc + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                acc += dcrow[j] * brow[j];
            }
            da[i * k + p] += acc;
        }
    }
}

// dB[k x n] += A^T * dC
inline void gemm_tn(const double* a, const double* dc, double* db, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            double* dbrow = db + p * n;
            const double* dcrow = dc + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                dbrow[j] += av * dcrow[j];
            }
        }
    }
}

}  // namespace detail

/// A[..., m, k] x B[k, n] -> [..., m, n], or batched A[..., m, k] x B[..., k, n] with
/// identical leading dimensions.
inline Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    auto mismatch = [&] {
        return ShapeError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
    };
    if (as.size() < 2 || bs.size() < 2) {
        throw mismatch();
    }
    const std::size_t k = as.back();
    const std::size_t m = as[as.size() - 2];
    const std::size_t n = bs.back();
    if (bs[bs.size() - 2] != k) {
        throw mismatch();
    }
    std::size_t batches = 1;
    bool shared_b = bs.size() == 2;
    if (!shared_b) {
        if (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
            throw mismatch();
        }
        batches = shape_numel(Shape(as.begin(), as.end() - 2));
    }
    const std::size_t rows = shared_b ? a.numel() / k : m;
    Shape out_shape(as.begin(), as.end() - 1);
    out_shape.push_back(n);
    std::vector<double> out(shape_numel(out_shape), 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::size_t bi = 0; bi < batches; ++bi) {
        detail::gemm_nn(ad + bi * rows * k, shared_b ? bd : bd + bi * k * n, out.data() + bi * rows * n, rows, k, n);
    }
    Tensor y = detail::make_result(g, std::move(out_shape), std::move(out), {&a, &b});
    if (y.requires_grad()) {
        auto asp = a.storage_ptr();
        auto bsp = b.storage_ptr();
        auto ysp = y.storage_ptr();
        g.record("matmul", {&a, &b}, y, [asp, bsp, ysp, batches, rows, k, n, shared_b] {
            const double* gy = ysp->grad.data();
            for (std::size_t bi = 0; bi < batches; ++bi) {
                const std::size_t boff = shared_b ? 0 : bi * k * n;
                if (asp->requires_grad) {
                    detail::gemm_nt(gy + bi * rows * n, bsp->data.data() + boff,
                                    asp->grad_buffer().data() + bi * rows * k, rows, k, n);
                }
                if (bsp->requires_grad) {
                    detail::gemm_tn(asp->data.data() + bi * rows * k, gy + bi * rows * n,
                                    bsp->grad_buffer().data() + boff, rows, k, n);
                }
            }
        });
    }
    return y;
}

inline Tensor transpose(Graph& g, const Tensor& x) {
    if (x.rank() != 2) {
        throw ShapeError("transpose expects a matrix, got " + shape_str(x.shape()));
    }
    const std::size_t r = x.dim(0);
    const std::size_t c = x.dim(1);
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[j * r + i] = xd[i * c + j];
        }
    }
    Tensor y = detail::make_result(g, {c, r}, std::move(out), {&x});
    if (y.requires_grad()) {
        auto xs = x.storage_ptr();
        auto ys = y.storage_ptr();
        g.record("transpose", {&x}, y, [xs, ys, r, c] {
            auto& gx = xs->grad_buffer();
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    gx[i * c + j] += ys->grad[j * r + i];
                }
            }
        });
    }
    return y;
}

inline Tensor reshape(Graph& g, const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    Tensor y = detail::make_result(g, std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), {&x});
    if (y.requires_grad()) {
        auto xs = x.storage_ptr();
        auto ys = y.storage_ptr();
        g.record("reshape", {&x}, y, [xs, ys] {
            auto& gx = xs->grad_buffer();
            for (std::size_t i = 0; i < gx.size(); ++i) {
                gx[i] += ys->grad[i];
            }
        });
    }
    return y;
}

/// Rows [begin, begin + count) of a matrix.
inline Tensor slice_rows(Graph& g, const Tensor& x, std::size_t begin, std::size_t count) {
    if (x.rank() != 2 || count == 0 || begin + count > x.dim(0)) {
        throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of " + shape_str(x.shape()));
    }
    const std::size_t c = x.dim(1);
    auto xd = x.data();
    Tensor y = detail::make_result(g, {count, c},
                                   std::vector<double>(xd.begin() + static_cast<std::ptrdiff_t>(begin * c),
                                                       xd.begin() + static_cast<std::ptrdiff_t>((begin + count) * c)),
                                   {&x});
    if (y.requires_grad()) {
        auto xs = x.storage_ptr();
        auto ys = y.storage_ptr();
        g.record("slice_rows", {&x}, y, [xs, ys, begin, c] {
            auto& gx = xs->grad_buffer();
            for (std::size_t i = 0; i < ys->grad.size(); ++i) {
                gx[begin * c + i] += ys->grad[i];
            }
        });
    }
    return y;
}

/// Gathers rows of `table` [V x D]; result shape is `index_shape` + [D].
inline Tensor embedding(Graph& g, const Tensor& table, std::span<const TokenId> ids, Shape index_shape) {
    if (table.rank() != 2) {
        throw ShapeError("embedding table must be a matrix, got " + shape_str(table.shape()));
    }
    if (shape_numel(index_shape) != ids.size()) {
        throw ShapeError("embedding: " + std::to_string(ids.size()) + " ids do not fill " + shape_str(index_shape));
    }
    const std::size_t vocab = table.dim(0);
    const std::size_t d = table.dim(1);
    std::vector<double> out(ids.size() * d);
    auto td = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw IndexError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                             " outside vocabulary of " + std::to_string(vocab));
        }
        std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[i]) * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    index_shape.push_back(d);
    Tensor y = detail::make_result(g, std::move(index_shape), std::move(out), {&table});
    if (y.requires_grad()) {
        auto ts = table.storage_ptr();
        auto ys = y.storage_ptr();
        std::vector<TokenId> idx(ids.begin(), ids.end());
        g.record("embedding", {&table}, y, [ts, ys, idx = std::move(idx), d] {
            auto& gt = ts->grad_buffer();
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const std::size_t row = static_cast<std::size_t>(idx[i]) * d;
                for (std::size_t j = 0; j < d; ++j) {
                    gt[row + j] += ys->grad[i * d + j];
                }
            }
        });
    }
    return y;
}

/// Appends a constant feature to the last axis: [..., D] -> [..., D+1].
inline Tensor append_feature(Graph& g, const Tensor& x, double value) {
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    Shape shape = x.shape();
    shape.back() = d + 1;
    std::vector<double> out(rows * (d + 1));
    auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(r * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(r * (d + 1)));
        out[r * (d + 1) + d] = value;
    }
    Tensor y = detail::make_result(g, std::move(shape), std::move(out), {&x});
    if (y.requires_grad()) {
        auto xs = x.storage_ptr();
        auto ys = y.storage_ptr();
        g.record("append_feature", {&x}, y, [xs, ys, rows, d] {
            auto& gx = xs->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < d; ++j) {
                    gx[r * d + j] += ys->grad[r * (d + 1) + j];
                }
            }
        });
    }
    return y;
}

/// Single element of x as a [1] tensor.
inline Tensor element(Graph& g, const Tensor& x, std::size_t index) {
    if (index >= x.numel()) {
        throw IndexError("element " + std::to_string(index) + " outside tensor of " + std::to_string(x.numel()));
    }
    Tensor y = detail::make_result(g, {1}, {x.data()[index]}, {&x});
    if (y.requires_grad()) {
        auto xs = x.storage_ptr();
        auto ys = y.storage_ptr();
        g.record("element", {&x}, y, [xs, ys, index] { xs->grad_buffer()[index] += ys->grad[0]; });
    }
    return y;
}

inline Tensor sum(Graph& g, const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) {
        acc += v;
    }
    Tensor y = detail::make_result(g, {1}, {acc}, {&x});
    if (y.requires_grad()) {
        auto xs = x.storage_ptr();
        auto ys = y.storage_ptr();
        g.record("sum", {&x}, y, [xs, ys] {
            auto& gx = xs->grad_buffer();
            for (double& v : gx) {
                v += ys->grad[0];
            }
        });
    }
    return y;
}

inline Tensor mean(Graph& g, const Tensor& x) { return scale(g, sum(g, x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// Normalization, activations, losses

namespace detail {

inline Tensor layer_norm_impl(Graph& g, const Tensor& x, const Tensor& gain, const Tensor* bias, double eps) {
    if (x.rank() == 0 || x.shape().back() == 0) {
        throw ShapeError("layer_norm: empty feature axis");
    }
    const std::size_t d = x.shape().back();
    if (gain.numel() != d || (bias != nullptr && bias->numel() != d)) {
        throw ShapeError("layer_norm: affine parameters do not match feature size " + std::to_string(d));
    }
    if (!(eps > 0.0)) {
        throw ShapeError("layer_norm: eps must be positive");
    }
    const std::size_t rows = x.numel() / d;
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv(rows);
    auto xd = x.data();
    auto gd = gain.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            mu += row[j];
        }
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            var += (row[j] - mu) * (row[j] - mu);
        }
        var /= static_cast<double>(d);
        inv[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (row[j] - mu) * inv[r];
            xhat[r * d + j] = xh;
            out[r * d + j] = gd[j] * xh + (bias != nullptr ? bias->data()[j] : 0.0);
        }
    }
    Tensor y = make_result(g, x.shape(), std::move(out), {&x, &gain, bias});
    if (y.requires_grad()) {
        auto xs = x.storage_ptr();
        auto gs = gain.storage_ptr();
        StoragePtr bs = bias != nullptr ? bias->storage_ptr() : nullptr;
        auto ys = y.storage_ptr();
        g.record("layer_norm", {&x, &gain, bias}, y,
                 [xs, gs, bs, ys, xhat = std::move(xhat), inv = std::move(inv), rows, d] {
                     const auto& gy = ys->grad;
                     if (gs->requires_grad) {
                         auto& gg = gs->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < d; ++j) {
                                 gg[j] += gy[r * d + j] * xhat[r * d + j];
                             }
                         }
                     }
                     if (wants(bs)) {
                         auto& gb = bs->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < d; ++j) {
                                 gb[j] += gy[r * d + j];
                             }
                         }
                     }
                     if (xs->requires_grad) {
                         auto& gx = xs->grad_buffer();
                         const double inv_d = 1.0 / static_cast<double>(d);
                         for (std::size_t r = 0; r < rows; ++r) {
                             double mean_g = 0.0;
                             double mean_gx = 0.0;
                             for (std::size_t j = 0; j < d; ++j) {
                                 const double dxh = gy[r * d + j] * gs->data[j];
                                 mean_g += dxh;
                                 mean_gx += dxh * xhat[r * d + j];
                             }
                             mean_g *= inv_d;
                             mean_gx *= inv_d;
                             for (std::size_t j = 0; j < d; ++j) {
                                 const double dxh = gy[r * d + j] * gs->data[j];
                                 gx[r * d + j] += inv[r] * (dxh - mean_g - xhat[r * d + j] * mean_gx);
                             }
                         }
                     }
                 });
    }
    return y;
}

}  // namespace detail

/// Normalizes over the last axis with biased variance, then applies gain and bias.
inline Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = kLayerNormEps) {
    return detail::layer_norm_impl(g, x, gain, &bias, eps);
}

/// Gain-only layer norm (zero bias), as used for query/key normalization.
inline Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& gain, double eps = kLayerNormEps) {
    return detail::layer_norm_impl(g, x, gain, nullptr, eps);
}

inline Tensor softmax_rows(Graph& g, const Tensor& x) {
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd.data() + r * n;
        const double mx = *std::max_element(row, row + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[r * n + j] = std::exp(row[j] - mx);
            z += out[r * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            out[r * n + j] /= z;
        }
    }
    Tensor y = detail::make_result(g, x.shape(), std::move(out), {&x});
    if (y.requires_grad()) {
        auto xs = x.storage_ptr();
        auto ys = y.storage_ptr();
        g.record("softmax_rows", {&x}, y, [xs, ys, rows, n] {
            auto& gx = xs->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    dot += ys->grad[r * n + j] * ys->data[r * n + j];
                }
                for (std::size_t j = 0; j < n; ++j) {
                    gx[r * n + j] += ys->data[r * n + j] * (ys->grad[r * n + j] - dot);
                }
            }
        });
    }
    return y;
}

enum class Activation { sigmoid, softplus, gelu };

inline Tensor sigmoid(Graph& g, const Tensor& x) {
    return detail::unary(g, x, "sigmoid", detail::sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor softplus(Graph& g, const Tensor& x) {
    return detail::unary(g, x, "softplus", detail::softplus, [](double v, double) { return detail::sigmoid(v); });
}

/// Tanh-approximated GELU.
inline Tensor gelu(Graph& g, const Tensor& x) {
    return detail::unary(g, x, "gelu", detail::gelu, [](double v, double) { return detail::gelu_grad(v); });
}

inline Tensor activation(Graph& g, Activation kind, const Tensor& x) {
    switch (kind) {
        case Activation::sigmoid:
            return sigmoid(g, x);
        case Activation::softplus:
            return softplus(g, x);
        case Activation::gelu:
            return gelu(g, x);
    }
    throw Error("unknown activation");
}

/// log-sum-exp of a row minus the entry at `target`, i.e. -log softmax(row)[target].
inline double row_nll(std::span<const double> row, std::size_t target) {
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) {
        z += std::exp(v - mx);
    }
    return mx + std::log(z) - row[target];
}

/// Mean over non-ignored positions of -log softmax(logits)[target].
inline Tensor cross_entropy(Graph& g, const Tensor& logits, std::span<const TokenId> targets, TokenId ignore_index = -100) {
    const std::size_t v = logits.shape().back();
    const std::size_t rows = logits.numel() / v;
    if (targets.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
    }
    std::size_t count = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] == ignore_index) {
            continue;
        }
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
            throw IndexError("cross_entropy: target " + std::to_string(targets[r]) + " at position " +
                             std::to_string(r) + " outside [0, " + std::to_string(v) + ")");
        }
        ++count;
    }
    if (count == 0) {
        throw Error("cross_entropy: empty loss support (every position ignored)");
    }
    auto ld = logits.data();
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] != ignore_index) {
            total += row_nll(ld.subspan(r * v, v), static_cast<std::size_t>(targets[r]));
        }
    }
    const double inv_count = 1.0 / static_cast<double>(count);
    Tensor y = detail::make_result(g, {1}, {total * inv_count}, {&logits});
    if (y.requires_grad()) {
        auto ls = logits.storage_ptr();
        auto ys = y.storage_ptr();
        std::vector<TokenId> tgt(targets.begin(), targets.end());
        g.record("cross_entropy", {&logits}, y, [ls, ys, tgt = std::move(tgt), rows, v, inv_count, ignore_index] {
            auto& gl = ls->grad_buffer();
            const double scale = ys->grad[0] * inv_count;
            for (std::size_t r = 0; r < rows; ++r) {
                if (tgt[r] == ignore_index) {
                    continue;
                }
                const double* row = ls->data.data() + r * v;
                const double mx = *std::max_element(row, row + v);
                double z = 0.0;
                for (std::size_t j = 0; j < v; ++j) {
                    z += std::exp(row[j] - mx);
                }
                for (std::size_t j = 0; j < v; ++j) {
                    const double p = std::exp(row[j] - mx) / z;
                    gl[r * v + j] += scale * (p - (j == static_cast<std::size_t>(tgt[r]) ? 1.0 : 0.0));
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head causal self-attention core: softmax(q k^T / sqrt(D/H)) v per head.
/// q, k, v are [B, T, D]; heads split D into contiguous chunks.
inline Tensor causal_attention(Graph& g, const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
    if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
        throw ShapeError("causal_attention: q/k/v shapes " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()));
    }
    const std::size_t bsz = q.dim(0);
    const std::size_t t = q.dim(1);
    const std::size_t d = q.dim(2);
    if (heads == 0 || d % heads != 0) {
        throw ShapeError("causal_attention: " + std::to_string(d) + " features do not split into " +
                         std::to_string(heads) + " heads");
    }
    const std::size_t hd = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> out(q.numel(), 0.0);
    std::vector<double> probs(bsz * heads * t * t, 0.0);
    const double* qd = q.data().data();
    const double* kd = k.data().data();
    const double* vd = v.data().data();
    for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < t; ++i) {
                double* p = probs.data() + ((b * heads + h) * t + i) * t;
                const double* qi = qd + (b * t + i) * d + h * hd;
                double mx = -INFINITY;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double* kj = kd + (b * t + j) * d + h * hd;
                    double s = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) {
                        s += qi[c] * kj[c];
                    }
                    p[j] = s * sc;
                    mx = std::max(mx, p[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    p[j] = std::exp(p[j] - mx);
                    z += p[j];
                }
                double* oi = out.data() + (b * t + i) * d + h * hd;
                for (std::size_t j = 0; j <= i; ++j) {
                    p[j] /= z;
                    const double* vj = vd + (b * t + j) * d + h * hd;
                    for (std::size_t c = 0; c < hd; ++c) {
                        oi[c] += p[j] * vj[c];
                    }
                }
            }
        }
    }
    Tensor y = detail::make_result(g, q.shape(), std::move(out), {&q, &k, &v});
    if (y.requires_grad()) {
        auto qs = q.storage_ptr();
        auto ks = k.storage_ptr();
        auto vs = v.storage_ptr();
        auto ys = y.storage_ptr();
        g.record("causal_attention", {&q, &k, &v}, y,
                 [qs, ks, vs, ys, probs = std::move(probs), bsz, t, d, heads, hd, sc] {
                     std::vector<double>* gq = qs->requires_grad ? &qs->grad_buffer() : nullptr;
                     std::vector<double>* gk = ks->requires_grad ? &ks->grad_buffer() : nullptr;
                     std::vector<double>* gv = vs->requires_grad ? &vs->grad_buffer() : nullptr;
                     std::vector<double> dp(t);
                     for (std::size_t b = 0; b < bsz; ++b) {
                         for (std::size_t h = 0; h < heads; ++h) {
                             for (std::size_t i = 0; i < t; ++i) {
                                 const double* p = probs.data() + ((b * heads + h) * t + i) * t;
                                 const double* go = ys->grad.data() + (b * t + i) * d + h * hd;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j <= i; ++j) {
                                     const double* vj = vs->data.data() + (b * t + j) * d + h * hd;
                                     double acc = 0.0;
                                     for (std::size_t c = 0; c < hd; ++c) {
                                         acc += go[c] * vj[c];
                                     }
                                     dp[j] = acc;
                                     dot += p[j] * acc;
                                     if (gv != nullptr) {
                                         double* gvj = gv->data() + (b * t + j) * d + h * hd;
                                         for (std::size_t c = 0; c < hd; ++c) {
                                             gvj[c] += p[j] * go[c];
                                         }
                                     }
                                 }
                                 const double* qi = qs->data.data() + (b * t + i) * d + h * hd;
                                 for (std::size_t j = 0; j <= i; ++j) {
                                     const double ds = p[j] * (dp[j] - dot) * sc;
                                     const double* kj = ks->data.data() + (b * t + j) * d + h * hd;
                                     if (gq != nullptr) {
                                         double* gqi = gq->data() + (b * t + i) * d + h * hd;
                                         for (std::size_t c = 0; c < hd; ++c) {
                                             gqi[c] += ds * kj[c];
                                         }
                                     }
                                     if (gk != nullptr) {
                                         double* gkj = gk->data() + (b * t + j) * d + h * hd;
                                         for (std::size_t c = 0; c < hd; ++c) {
                                             gkj[c] += ds * qi[c];
                                         }
                                     }
                                 }
                             }
                         }
                     }
                 });
    }
    return y;
}

}  // namespace loopmem
