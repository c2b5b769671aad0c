#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "loopmem/config.hpp"
#include "loopmem/model.hpp"
#include "loopmem/tokens.hpp"

// Straight-loop forward passes written without the tape or the op library.
// They serve as oracles for the differentiable implementation.

namespace loopmem::reference {

using Matrix = std::vector<double>;  // row-major

inline Matrix norm_rows(const Matrix& x, std::size_t d, std::span<const double> gain, std::span<const double> bias,
                        double eps = 1e-5) {
    Matrix y(x.size());
    for (std::size_t r = 0; r < x.size() / d; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            s += x[r * d + j];
        }
        const double mu = s / static_cast<double>(d);
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            ss += (x[r * d + j] - mu) * (x[r * d + j] - mu);
        }
        const double sd = std::sqrt(ss / static_cast<double>(d) + eps);
        for (std::size_t j = 0; j < d; ++j) {
            y[r * d + j] = gain[j] * ((x[r * d + j] - mu) / sd) + (bias.empty() ? 0.0 : bias[j]);
        }
    }
    return y;
}

/// y[i][j] = sum_k x[i][k] w[k][j], k ascending
inline Matrix project(const Matrix& x, std::size_t in, std::span<const double> w, std::size_t out) {
    const std::size_t rows = x.size() / in;
    Matrix y(rows * out, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < out; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < in; ++k) {
                acc += x[i * in + k] * w[k * out + j];
            }
            y[i * out + j] = acc;
        }
    }
    return y;
}

/// Causal multi-head attention by direct summation over positions, per head.
inline Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t batch, std::size_t seq,
                        std::size_t d, std::size_t heads) {
    const std::size_t hd = d / heads;
    Matrix out(q.size(), 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < seq; ++i) {
                std::vector<double> w(i + 1);
                double top = -1e300;
                for (std::size_t j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) {
                        s += q[(b * seq + i) * d + h * hd + c] * k[(b * seq + j) * d + h * hd + c];
                    }
                    w[j] = s / std::sqrt(static_cast<double>(hd));
                    top = std::max(top, w[j]);
                }
                double z = 0.0;
                for (double& x : w) {
                    x = std::exp(x - top);
                    z += x;
                }
                for (std::size_t c = 0; c < hd; ++c) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        acc += (w[j] / z) * v[(b * seq + j) * d + h * hd + c];
                    }
                    out[(b * seq + i) * d + h * hd + c] = acc;
                }
            }
        }
    }
    return out;
}

inline double gelu_tanh(double x) {
    const double inner = std::sqrt(2.0 / 3.14159265358979323846) * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(inner));
}

/// One pre-norm block over h [batch x seq x d].
inline Matrix block(const Matrix& h, const BlockParams& p, std::size_t batch, std::size_t seq, std::size_t d,
                    std::size_t heads) {
    const std::size_t ff = p.b1.numel();
    Matrix x = norm_rows(h, d, p.ln1_gain.data(), p.ln1_bias.data());
    Matrix ctx = attention(project(x, d, p.wq.data(), d), project(x, d, p.wk.data(), d), project(x, d, p.wv.data(), d),
                           batch, seq, d, heads);
    Matrix a = project(ctx, d, p.wo.data(), d);
    Matrix mid(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) {
        mid[i] = h[i] + a[i];
    }
    Matrix y = norm_rows(mid, d, p.ln2_gain.data(), p.ln2_bias.data());
    Matrix hidden = project(y, d, p.w1.data(), ff);
    for (std::size_t i = 0; i < hidden.size(); ++i) {
        hidden[i] = gelu_tanh(hidden[i] + p.b1.data()[i % ff]);
    }
    Matrix f = project(hidden, ff, p.w2.data(), d);
    Matrix out(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) {
        out[i] = mid[i] + (f[i] + p.b2.data()[i % d]);
    }
    return out;
}

inline Matrix embed(const ModelParams& p, const TokenGrid& tokens, std::size_t d) {
    Matrix h(tokens.size() * d);
    for (std::size_t r = 0; r < tokens.rows; ++r) {
        for (std::size_t c = 0; c < tokens.cols; ++c) {
            const std::size_t row = r * tokens.cols + c;
            const auto id = static_cast<std::size_t>(tokens.ids[row]);
            for (std::size_t j = 0; j < d; ++j) {
                h[row * d + j] = p.tok_emb.data()[id * d + j] + p.pos_emb.data()[c * d + j];
            }
        }
    }
    return h;
}

inline Matrix unembed(const ModelParams& p, const Matrix& h, std::size_t d, std::size_t vocab) {
    return project(norm_rows(h, d, p.final_gain.data(), p.final_bias.data()), d, p.unembed.data(), vocab);
}

/// Plain L-layer pre-norm transformer using the block weights of `p`; loop,
/// router and memory parameters are ignored.
inline Matrix plain_transformer_logits(const ModelParams& p, const ModelConfig& cfg, const TokenGrid& tokens) {
    Matrix h = embed(p, tokens, cfg.dim);
    for (const auto& layer : p.layers) {
        h = block(h, layer.block, tokens.rows, tokens.cols, cfg.dim, cfg.heads);
    }
    return unembed(p, h, cfg.dim, cfg.vocab);
}

/// Embedding -> final norm -> unembedding, skipping every layer.
inline Matrix stripped_logits(const ModelParams& p, const ModelConfig& cfg, const TokenGrid& tokens) {
    return unembed(p, embed(p, tokens, cfg.dim), cfg.dim, cfg.vocab);
}

/// Triple-loop product with k ascending, the summation order matmul uses.
inline Matrix matmul(std::span<const double> a, std::span<const double> b, std::size_t m, std::size_t k,
                     std::size_t n) {
    Matrix c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    return c;
}

}  // namespace loopmem::reference
