#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "loopmem/config.hpp"
#include "loopmem/grad_check.hpp"
#include "loopmem/ops.hpp"
#include "loopmem/rng.hpp"
#include "loopmem/tokens.hpp"

namespace loopmem {

/// A trainable tensor with its stable name and weight-decay class.
struct Parameter {
    std::string name;
    Tensor tensor;
    bool decay = false;
};

struct BlockParams {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;  // D x D
    Tensor ln2_gain, ln2_bias;
    Tensor w1, b1;  // D x d_ff, d_ff
    Tensor w2, b2;  // d_ff x D, D
};

/// p_t = sigmoid([h; t / N_max] . weight + bias), weight is (D+1) x 1.
struct HaltingRouter {
    Tensor weight;
    Tensor bias;  // [1]
};

/// One learnable alpha per iteration; each update is scaled by softplus(alpha_t).
struct LoopScales {
    Tensor alpha;  // [N_max]
};

struct MemoryBank {
    Tensor keys;      // M x D
    Tensor values;    // M x D
    Tensor key_gain;  // D, gain of the key layer norm
};

/// Query norm plus per-bank output projections and gates. Members for an
/// absent bank stay undefined.
struct MemoryInterface {
    Tensor query_gain;
    Tensor local_proj, local_gate_w, local_gate_b;
    Tensor global_proj, global_gate_w, global_gate_b;
};

struct LayerParams {
    BlockParams block;
    std::optional<HaltingRouter> router;
    std::optional<LoopScales> scales;
    std::optional<MemoryBank> local_memory;
    std::optional<MemoryInterface> memory;
};

struct ModelParams {
    Tensor tok_emb;  // V x D
    Tensor pos_emb;  // T_max x D
    std::vector<LayerParams> layers;
    std::optional<MemoryBank> global_memory;
    Tensor final_gain, final_bias;
    Tensor unembed;  // D x V

    /// Every parameter in a fixed order with names like "layer.3.loop_scales.alpha".
    std::vector<Parameter> parameters() const {
        std::vector<Parameter> out;
        auto add = [&out](std::string name, const Tensor& t, bool decay) { out.push_back({std::move(name), t, decay}); };
        add("tok_emb", tok_emb, true);
        add("pos_emb", pos_emb, true);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const LayerParams& lp = layers[l];
            const std::string p = "layer." + std::to_string(l) + ".";
            add(p + "ln1.gain", lp.block.ln1_gain, false);
            add(p + "ln1.bias", lp.block.ln1_bias, false);
            add(p + "attn.wq", lp.block.wq, true);
            add(p + "attn.wk", lp.block.wk, true);
            add(p + "attn.wv", lp.block.wv, true);
            add(p + "attn.wo", lp.block.wo, true);
            add(p + "ln2.gain", lp.block.ln2_gain, false);
            add(p + "ln2.bias", lp.block.ln2_bias, false);
            add(p + "ffn.w1", lp.block.w1, true);
            add(p + "ffn.b1", lp.block.b1, false);
            add(p + "ffn.w2", lp.block.w2, true);
            add(p + "ffn.b2", lp.block.b2, false);
            if (lp.router) {
                add(p + "router.weight", lp.router->weight, true);
                add(p + "router.bias", lp.router->bias, false);
            }
            if (lp.scales) {
                add(p + "loop_scales.alpha", lp.scales->alpha, false);
            }
            if (lp.local_memory) {
                add(p + "local_memory.K", lp.local_memory->keys, false);
                add(p + "local_memory.V", lp.local_memory->values, false);
                add(p + "local_memory.key_gain", lp.local_memory->key_gain, false);
            }
            if (lp.memory) {
                const MemoryInterface& m = *lp.memory;
                add(p + "memory.query_gain", m.query_gain, false);
                if (m.local_proj.defined()) {
                    add(p + "memory.local_proj", m.local_proj, true);
                    add(p + "memory.local_gate.weight", m.local_gate_w, true);
                    add(p + "memory.local_gate.bias", m.local_gate_b, false);
                }
                if (m.global_proj.defined()) {
                    add(p + "memory.global_proj", m.global_proj, true);
                    add(p + "memory.global_gate.weight", m.global_gate_w, true);
                    add(p + "memory.global_gate.bias", m.global_gate_b, false);
                }
            }
        }
        if (global_memory) {
            add("global_memory.K", global_memory->keys, false);
            add("global_memory.V", global_memory->values, false);
            add("global_memory.key_gain", global_memory->key_gain, false);
        }
        add("final_ln.gain", final_gain, false);
        add("final_ln.bias", final_bias, false);
        add("unembed", unembed, true);
        return out;
    }

    std::vector<NamedTensor> named_tensors() const {
        std::vector<NamedTensor> out;
        for (auto& p : parameters()) {
            out.push_back({std::move(p.name), p.tensor});
        }
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) {
            n += p.tensor.numel();
        }
        return n;
    }

    /// Deep copy; the result shares no storage with this.
    ModelParams clone() const;

    /// Truncated-normal init (std 0.02, residual output projections scaled by
    /// 1/sqrt(2L)), unit gains, zero biases, zero router, alpha = alpha_init and
    /// gate biases = gate_bias_init.
    static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);
};

namespace detail {

inline Tensor normal_param(Rng& rng, Shape shape, double stddev) {
    const std::size_t n = shape_numel(shape);
    std::vector<double> v(n);
    for (double& x : v) {
        x = rng.truncated_normal(stddev);
    }
    return Tensor(std::move(shape), std::move(v), true);
}

inline Tensor const_param(Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

inline MemoryBank make_bank(Rng& rng, std::size_t slots, std::size_t d) {
    return {normal_param(rng, {slots, d}, 0.02), normal_param(rng, {slots, d}, 0.02), const_param({d}, 1.0)};
}

template <class Fn>
void for_each_tensor(ModelParams& p, Fn&& fn) {
    auto each = [&](Tensor& t) {
        if (t.defined()) {
            fn(t);
        }
    };
    each(p.tok_emb);
    each(p.pos_emb);
    for (auto& l : p.layers) {
        for (Tensor* t : {&l.block.ln1_gain, &l.block.ln1_bias, &l.block.wq, &l.block.wk, &l.block.wv, &l.block.wo,
                          &l.block.ln2_gain, &l.block.ln2_bias, &l.block.w1, &l.block.b1, &l.block.w2, &l.block.b2}) {
            each(*t);
        }
        if (l.router) {
            each(l.router->weight);
            each(l.router->bias);
        }
        if (l.scales) {
            each(l.scales->alpha);
        }
        if (l.local_memory) {
            each(l.local_memory->keys);
            each(l.local_memory->values);
            each(l.local_memory->key_gain);
        }
        if (l.memory) {
            auto& m = *l.memory;
            for (Tensor* t : {&m.query_gain, &m.local_proj, &m.local_gate_w, &m.local_gate_b, &m.global_proj,
                              &m.global_gate_w, &m.global_gate_b}) {
                each(*t);
            }
        }
    }
    if (p.global_memory) {
        each(p.global_memory->keys);
        each(p.global_memory->values);
        each(p.global_memory->key_gain);
    }
    each(p.final_gain);
    each(p.final_bias);
    each(p.unembed);
}

}  // namespace detail

inline ModelParams ModelParams::clone() const {
    ModelParams copy = *this;
    detail::for_each_tensor(copy, [](Tensor& t) { t = t.clone(); });
    return copy;
}

inline ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const std::size_t d = cfg.dim;
    const double std0 = 0.02;
    const double std_out = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    ModelParams p;
    p.tok_emb = detail::normal_param(rng, {cfg.vocab, d}, std0);
    p.pos_emb = detail::normal_param(rng, {cfg.max_seq_len, d}, std0);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        LayerParams lp;
        BlockParams& b = lp.block;
        b.ln1_gain = detail::const_param({d}, 1.0);
        b.ln1_bias = detail::const_param({d}, 0.0);
        b.wq = detail::normal_param(rng, {d, d}, std0);
        b.wk = detail::normal_param(rng, {d, d}, std0);
        b.wv = detail::normal_param(rng, {d, d}, std0);
        b.wo = detail::normal_param(rng, {d, d}, std_out);
        b.ln2_gain = detail::const_param({d}, 1.0);
        b.ln2_bias = detail::const_param({d}, 0.0);
        b.w1 = detail::normal_param(rng, {d, cfg.ffn_dim}, std0);
        b.b1 = detail::const_param({cfg.ffn_dim}, 0.0);
        b.w2 = detail::normal_param(rng, {cfg.ffn_dim, d}, std_out);
        b.b2 = detail::const_param({d}, 0.0);
        if (cfg.loops_enabled) {
            lp.router = HaltingRouter{detail::const_param({d + 1, 1}, 0.0), detail::const_param({1}, 0.0)};
            lp.scales = LoopScales{detail::const_param({cfg.max_loops}, cfg.alpha_init)};
        }
        if (cfg.memory_enabled) {
            MemoryInterface m;
            m.query_gain = detail::const_param({d}, 1.0);
            if (cfg.has_local_memory()) {
                lp.local_memory = detail::make_bank(rng, cfg.local_slots, d);
                m.local_proj = detail::normal_param(rng, {d, d}, std_out);
                m.local_gate_w = detail::normal_param(rng, {d, d}, std0);
                m.local_gate_b = detail::const_param({d}, cfg.gate_bias_init);
            }
            if (cfg.has_global_memory()) {
                m.global_proj = detail::normal_param(rng, {d, d}, std_out);
                m.global_gate_w = detail::normal_param(rng, {d, d}, std0);
                m.global_gate_b = detail::const_param({d}, cfg.gate_bias_init);
            }
            lp.memory = std::move(m);
        }
        p.layers.push_back(std::move(lp));
    }
    if (cfg.has_global_memory()) {
        p.global_memory = detail::make_bank(rng, cfg.global_slots, d);
    }
    p.final_gain = detail::const_param({d}, 1.0);
    p.final_bias = detail::const_param({d}, 0.0);
    p.unembed = detail::normal_param(rng, {d, cfg.vocab}, std0);
    return p;
}

// ---------------------------------------------------------------------------
// Transformer block

struct BlockParts {
    Tensor attn;  // Attn(LN(h))
    Tensor mid;   // h' = h + attn
    Tensor ffn;   // FFN(LN(h'))
};

inline BlockParts block_parts(Graph& g, const Tensor& h, const BlockParams& p, std::size_t heads) {
    if (h.rank() != 3) {
        throw ShapeError("block input must be [B x T x D], got " + shape_str(h.shape()));
    }
    BlockParts out;
    Tensor x = layer_norm(g, h, p.ln1_gain, p.ln1_bias);
    Tensor ctx = causal_attention(g, matmul(g, x, p.wq), matmul(g, x, p.wk), matmul(g, x, p.wv), heads);
    out.attn = matmul(g, ctx, p.wo);
    out.mid = add(g, h, out.attn);
    Tensor y = layer_norm(g, out.mid, p.ln2_gain, p.ln2_bias);
    out.ffn = add(g, matmul(g, gelu(g, add(g, matmul(g, y, p.w1), p.b1)), p.w2), p.b2);
    return out;
}

/// Pre-norm block: h' = h + Attn(LN(h)), h'' = h' + FFN(LN(h')).
inline Tensor block_forward(Graph& g, const Tensor& h, const BlockParams& p, std::size_t heads) {
    BlockParts parts = block_parts(g, h, p, heads);
    return add(g, parts.mid, parts.ffn);
}

/// The block's residual contribution, block_forward(h) - h, formed without cancellation.
inline Tensor block_update(Graph& g, const Tensor& h, const BlockParams& p, std::size_t heads) {
    BlockParts parts = block_parts(g, h, p, heads);
    return add(g, parts.attn, parts.ffn);
}

// ---------------------------------------------------------------------------
// Adaptive halting

/// Per-token halt probability at 1-based iteration `step`; returns [B x T].
inline Tensor halting_probability(Graph& g, const Tensor& h, std::size_t step, const HaltingRouter& r,
                                  std::size_t max_loops) {
    if (step < 1 || step > max_loops) {
        throw IndexError("halting step " + std::to_string(step) + " outside [1, " + std::to_string(max_loops) + "]");
    }
    const double feature = static_cast<double>(step) / static_cast<double>(max_loops);
    Tensor logit = add(g, matmul(g, append_feature(g, h, feature), r.weight), r.bias);
    Shape lead(h.shape().begin(), h.shape().end() - 1);
    return reshape(g, sigmoid(g, logit), std::move(lead));
}

/// p_halt(t) = p_t * prod_{i<t} (1 - p_i) for t < N; the last step takes the
/// remaining mass prod_{i<N} (1 - p_i), so the distribution sums to one.
inline std::vector<Tensor> halting_distribution(Graph& g, std::span<const Tensor> step_probs) {
    if (step_probs.empty()) {
        throw ShapeError("halting_distribution needs at least one step");
    }
    std::vector<Tensor> out;
    out.reserve(step_probs.size());
    Tensor remaining;  // prod (1 - p_i) so far; undefined means 1
    for (std::size_t t = 0; t + 1 < step_probs.size(); ++t) {
        const Tensor& p = step_probs[t];
        out.push_back(remaining.defined() ? mul(g, p, remaining) : p);
        Tensor keep = affine(g, p, -1.0, 1.0);
        remaining = remaining.defined() ? mul(g, remaining, keep) : keep;
    }
    out.push_back(remaining.defined() ? remaining : affine(g, step_probs.back(), 0.0, 1.0));
    return out;
}

struct LayerTrace {
    bool looped = false;
    std::vector<Tensor> step_probs;  // per iteration, [B x T]
    std::vector<Tensor> halt_probs;  // per iteration, [B x T]
    Tensor expected_steps;           // [1], token mean of sum_t t * p_halt(t); differentiable
    std::vector<double> mean_step_prob;
    std::vector<double> mean_halt_prob;

    double expected_steps_value() const { return looped ? expected_steps.item() : 1.0; }
};

struct HaltingTrace {
    std::vector<LayerTrace> layers;
};

namespace detail {

inline double mean_of(const Tensor& t) {
    double acc = 0.0;
    for (double v : t.data()) {
        acc += v;
    }
    return acc / static_cast<double>(t.numel());
}

}  // namespace detail

struct LoopOutput {
    Tensor h_out;
    LayerTrace trace;
    std::vector<Tensor> iterates;  // h^(1) .. h^(N)
};

/// Runs all N_max iterations h^(t) = h^(t-1) + softplus(alpha_t) * update(h^(t-1))
/// and mixes the iterates with the halting distribution.
inline LoopOutput adaptive_loop_forward(Graph& g, const Tensor& h_in, const BlockParams& block, const HaltingRouter& router,
                                        const LoopScales& scales, std::size_t max_loops, std::size_t heads) {
    if (max_loops == 0 || scales.alpha.numel() != max_loops) {
        throw ShapeError("loop scales hold " + std::to_string(scales.alpha.numel()) + " entries for N_max = " +
                         std::to_string(max_loops));
    }
    LoopOutput out;
    out.trace.looped = true;
    Tensor h = h_in;
    for (std::size_t t = 1; t <= max_loops; ++t) {
        Tensor gain = softplus(g, element(g, scales.alpha, t - 1));
        h = add(g, h, mul(g, block_update(g, h, block, heads), gain));
        out.iterates.push_back(h);
        out.trace.step_probs.push_back(halting_probability(g, h, t, router, max_loops));
    }
    out.trace.halt_probs = halting_distribution(g, out.trace.step_probs);
    // Mixed as h^(N) + sum_{t<N} p_halt(t) (h^(t) - h^(N)), which equals the
    // weighted sum because the weights sum to one, and returns h^(N) bit-exactly
    // when every iterate agrees.
    const Tensor& last = out.iterates.back();
    out.h_out = last;
    Tensor expected;
    for (std::size_t t = 0; t < max_loops; ++t) {
        if (t + 1 < max_loops) {
            out.h_out = add(g, out.h_out, scale_rows(g, sub(g, out.iterates[t], last), out.trace.halt_probs[t]));
        }
        Tensor term = scale(g, out.trace.halt_probs[t], static_cast<double>(t + 1));
        expected = expected.defined() ? add(g, expected, term) : term;
        out.trace.mean_step_prob.push_back(detail::mean_of(out.trace.step_probs[t]));
        out.trace.mean_halt_prob.push_back(detail::mean_of(out.trace.halt_probs[t]));
    }
    out.trace.expected_steps = mean(g, expected);
    return out;
}

/// expected steps per layer, token-averaged (1 for non-looped layers)
inline std::vector<double> expected_steps(const HaltingTrace& trace) {
    std::vector<double> out;
    for (const auto& l : trace.layers) {
        out.push_back(l.expected_steps_value());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Memory

/// Attention of already-normalized queries [N x D] over one bank's slots.
inline Tensor retrieve_normalized(Graph& g, const Tensor& queries, const MemoryBank& bank) {
    if (bank.keys.rank() != 2 || bank.keys.shape() != bank.values.shape()) {
        throw ConfigError("memory bank keys and values must share an M x D shape");
    }
    const std::size_t d = queries.shape().back();
    Tensor keys = layer_norm(g, bank.keys, bank.key_gain);
    Tensor logits = scale(g, matmul(g, queries, transpose(g, keys)), 1.0 / std::sqrt(static_cast<double>(d)));
    return matmul(g, softmax_rows(g, logits), bank.values);
}

/// softmax(LN_q(h) LN_k(K)^T / sqrt(D)) V for h of shape [B x T x D].
inline Tensor memory_retrieve(Graph& g, const Tensor& h, const MemoryBank& bank, const MemoryInterface& iface) {
    if (!bank.keys.defined()) {
        throw ConfigError("memory bank has no slots");
    }
    return retrieve_normalized(g, layer_norm(g, h, iface.query_gain), bank);
}

struct GatedOutput {
    Tensor h;
    double gate_local_mean = std::numeric_limits<double>::quiet_NaN();
    double gate_global_mean = std::numeric_limits<double>::quiet_NaN();
};

/// h + g_L * (m_L W_L) + g_G * (m_G W_G) with g_X = sigmoid(h W_gX + b_gX).
/// A null readout (or a bank without interface weights) contributes nothing.
inline GatedOutput gated_integrate(Graph& g, const Tensor& h, const Tensor* m_local, const Tensor* m_global,
                                   const MemoryInterface& iface) {
    GatedOutput out;
    out.h = h;
    auto integrate = [&](const Tensor* m, const Tensor& proj, const Tensor& gate_w, const Tensor& gate_b, double& stat) {
        if (m == nullptr || !proj.defined()) {
            return;
        }
        Tensor gate = sigmoid(g, add(g, matmul(g, h, gate_w), gate_b));
        stat = detail::mean_of(gate);
        out.h = add(g, out.h, mul(g, gate, matmul(g, *m, proj)));
    };
    integrate(m_local, iface.local_proj, iface.local_gate_w, iface.local_gate_b, out.gate_local_mean);
    integrate(m_global, iface.global_proj, iface.global_gate_w, iface.global_gate_b, out.gate_global_mean);
    return out;
}

// ---------------------------------------------------------------------------
// Full model

/// Per-layer gate means over batch, tokens and features; NaN for absent banks.
struct GateStats {
    std::vector<double> local_mean;
    std::vector<double> global_mean;
};

struct ForwardResult {
    Tensor logits;  // [B x T x V]
    HaltingTrace trace;
    GateStats gates;
};

inline ForwardResult model_forward(Graph& g, const ModelParams& params, const ModelConfig& cfg, const TokenGrid& tokens) {
    if (tokens.cols > cfg.max_seq_len) {
        throw ConfigError("sequence length " + std::to_string(tokens.cols) + " exceeds T_max = " +
                          std::to_string(cfg.max_seq_len));
    }
    if (tokens.rows == 0 || tokens.cols == 0 || tokens.ids.size() != tokens.rows * tokens.cols) {
        throw ShapeError("token grid is empty or inconsistent");
    }
    if (params.layers.size() != cfg.layers) {
        throw ConfigError("parameters hold " + std::to_string(params.layers.size()) + " layers, config expects " +
                          std::to_string(cfg.layers));
    }
    ForwardResult out;
    Tensor h = add(g, embedding(g, params.tok_emb, tokens.ids, {tokens.rows, tokens.cols}),
                   slice_rows(g, params.pos_emb, 0, tokens.cols));
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (const LayerParams& layer : params.layers) {
        double gate_local = nan;
        double gate_global = nan;
        if (layer.memory) {
            Tensor queries = layer_norm(g, h, layer.memory->query_gain);
            std::optional<Tensor> m_local;
            std::optional<Tensor> m_global;
            if (layer.local_memory) {
                m_local = retrieve_normalized(g, queries, *layer.local_memory);
            }
            if (params.global_memory) {
                m_global = retrieve_normalized(g, queries, *params.global_memory);
            }
            GatedOutput enriched = gated_integrate(g, h, m_local ? &*m_local : nullptr, m_global ? &*m_global : nullptr,
                                                   *layer.memory);
            h = enriched.h;
            gate_local = enriched.gate_local_mean;
            gate_global = enriched.gate_global_mean;
        }
        out.gates.local_mean.push_back(gate_local);
        out.gates.global_mean.push_back(gate_global);
        if (layer.router && layer.scales) {
            LoopOutput loop = adaptive_loop_forward(g, h, layer.block, *layer.router, *layer.scales, cfg.max_loops,
                                                    cfg.heads);
            h = loop.h_out;
            out.trace.layers.push_back(std::move(loop.trace));
        } else {
            h = block_forward(g, h, layer.block, cfg.heads);
            out.trace.layers.push_back(LayerTrace{});
        }
    }
    out.logits = matmul(g, layer_norm(g, h, params.final_gain, params.final_bias), params.unembed);
    return out;
}

}  // namespace loopmem
