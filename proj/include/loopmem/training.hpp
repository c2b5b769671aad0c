#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "loopmem/config.hpp"
#include "loopmem/data.hpp"
#include "loopmem/model.hpp"
#include "loopmem/ops.hpp"

namespace loopmem {

struct TrainConfig {
    std::size_t total_steps = 1000;
    std::optional<std::size_t> warmup_steps;  // default: 1% of total_steps
    double peak_lr = 3.0e-3;
    std::optional<double> min_lr;  // default: 0.1 * peak_lr
    std::size_t batch_size = 16;
    std::size_t seq_len = 128;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.1;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    std::size_t eval_interval = 100;

    std::size_t warmup() const { return warmup_steps.value_or(total_steps / 100); }
    double floor_lr() const { return min_lr.value_or(0.1 * peak_lr); }
    std::size_t batch_tokens() const { return batch_size * seq_len; }

    void validate(const std::string& prefix = "train") const {
        auto field = [&](const char* n) { return prefix + "." + n; };
        if (total_steps == 0) {
            throw ConfigError("must be at least 1", field("total_steps"));
        }
        if (warmup() >= total_steps) {
            throw ConfigError("must be smaller than total_steps", field("warmup_steps"));
        }
        if (!(peak_lr > floor_lr()) || floor_lr() < 0.0) {
            throw ConfigError("need peak_lr > min_lr >= 0", field("peak_lr"));
        }
        if (batch_size == 0) {
            throw ConfigError("must be at least 1", field("batch_size"));
        }
        if (seq_len == 0) {
            throw ConfigError("must be at least 1", field("seq_len"));
        }
        if (!(grad_clip > 0.0)) {
            throw ConfigError("must be positive", field("grad_clip"));
        }
        if (weight_decay < 0.0) {
            throw ConfigError("must be non-negative", field("weight_decay"));
        }
        if (eval_interval == 0) {
            throw ConfigError("must be at least 1", field("eval_interval"));
        }
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"total_steps", c.total_steps}, {"warmup_steps", c.warmup()}, {"peak_lr", c.peak_lr},
                       {"min_lr", c.floor_lr()},       {"batch_size", c.batch_size}, {"seq_len", c.seq_len},
                       {"betas", {c.beta1, c.beta2}},  {"adam_eps", c.adam_eps},     {"weight_decay", c.weight_decay},
                       {"grad_clip", c.grad_clip},     {"seed", c.seed},             {"eval_interval", c.eval_interval}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {},
                                          const std::string& prefix = "train") {
    detail::reject_unknown(j,
                           {"total_steps", "warmup_steps", "peak_lr", "min_lr", "batch_size", "seq_len", "betas",
                            "adam_eps", "weight_decay", "grad_clip", "seed", "eval_interval"},
                           prefix);
    detail::read_field(j, "total_steps", base.total_steps, prefix);
    if (j.contains("warmup_steps")) {
        std::size_t w = 0;
        detail::read_field(j, "warmup_steps", w, prefix);
        base.warmup_steps = w;
    }
    detail::read_field(j, "peak_lr", base.peak_lr, prefix);
    if (j.contains("min_lr")) {
        double m = 0.0;
        detail::read_field(j, "min_lr", m, prefix);
        base.min_lr = m;
    }
    detail::read_field(j, "batch_size", base.batch_size, prefix);
    detail::read_field(j, "seq_len", base.seq_len, prefix);
    if (j.contains("betas")) {
        const auto& b = j.at("betas");
        if (!b.is_array() || b.size() != 2 || !b[0].is_number() || !b[1].is_number()) {
            throw ConfigError("expected [beta1, beta2]", prefix + ".betas");
        }
        base.beta1 = b[0].get<double>();
        base.beta2 = b[1].get<double>();
    }
    detail::read_field(j, "adam_eps", base.adam_eps, prefix);
    detail::read_field(j, "weight_decay", base.weight_decay, prefix);
    detail::read_field(j, "grad_clip", base.grad_clip, prefix);
    if (j.contains("seed")) {
        if (!j.at("seed").is_number_unsigned()) {
            throw ConfigError("expected a non-negative integer", prefix + ".seed");
        }
        base.seed = j.at("seed").get<std::uint64_t>();
    }
    detail::read_field(j, "eval_interval", base.eval_interval, prefix);
    return base;
}

// ---------------------------------------------------------------------------

struct PonderLoss {
    Tensor loss;
    double n_bar = 1.0;    // mean over layers of expected steps
    double n_tilde = 0.0;  // (n_bar - 1) / (N_max - 1), clamped to [0, 1]
};

/// L = L_CE + lambda * n_tilde. With lambda = 0 the loss is the CE tensor itself.
inline PonderLoss ponder_loss(Graph& g, const Tensor& ce, const HaltingTrace& trace, double lambda,
                              std::size_t max_loops) {
    PonderLoss out;
    const std::size_t layers = trace.layers.size();
    if (layers == 0) {
        out.loss = ce;
        return out;
    }
    Tensor total;
    double constant = 0.0;
    for (const auto& l : trace.layers) {
        if (l.looped) {
            total = total.defined() ? add(g, total, l.expected_steps) : l.expected_steps;
        } else {
            constant += 1.0;
        }
    }
    out.n_bar = ((total.defined() ? total.item() : 0.0) + constant) / static_cast<double>(layers);
    if (max_loops > 1) {
        out.n_tilde = std::clamp((out.n_bar - 1.0) / static_cast<double>(max_loops - 1), 0.0, 1.0);
    }
    if (lambda == 0.0) {
        out.loss = ce;
        return out;
    }
    if (max_loops <= 1 || !total.defined()) {
        out.loss = affine(g, ce, 1.0, lambda * out.n_tilde);
        return out;
    }
    const double denom = static_cast<double>(layers) * static_cast<double>(max_loops - 1);
    Tensor n_tilde = affine(g, total, 1.0 / denom, (constant - static_cast<double>(layers)) / denom);
    out.loss = add(g, ce, scale(g, n_tilde, lambda));
    return out;
}

/// Linear warmup from 0 to peak, then cosine decay to the floor at total_steps.
inline double cosine_lr(std::size_t step, const TrainConfig& tc) {
    const std::size_t warm = tc.warmup();
    const double peak = tc.peak_lr;
    const double floor = tc.floor_lr();
    if (step < warm) {
        return peak * static_cast<double>(step) / static_cast<double>(warm);
    }
    const double span = static_cast<double>(tc.total_steps - warm);
    const double progress = std::min(1.0, static_cast<double>(step - warm) / span);
    return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Optimizer state: completed step count plus Adam moments aligned with
/// ModelParams::parameters().
struct TrainState {
    std::size_t step = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;

    static TrainState fresh(std::span<const Parameter> params) {
        TrainState s;
        for (const auto& p : params) {
            s.first_moment.emplace_back(p.tensor.numel(), 0.0);
            s.second_moment.emplace_back(p.tensor.numel(), 0.0);
        }
        return s;
    }
};

inline double global_grad_norm(std::span<const Parameter> params) {
    double sq = 0.0;
    for (const auto& p : params) {
        for (double v : p.tensor.grad()) {
            sq += v * v;
        }
    }
    return std::sqrt(sq);
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_grad_norm(std::span<const Parameter> params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (const auto& p : params) {
            for (double& v : p.tensor.storage().grad) {
                v *= s;
            }
        }
    }
    return norm;
}

/// Bias-corrected Adam with decoupled weight decay on the parameters flagged
/// `decay`. Uses t = state.step + 1; the caller advances state.step.
inline void adamw_step(std::span<const Parameter> params, TrainState& state, double lr, const TrainConfig& tc) {
    if (state.first_moment.size() != params.size()) {
        throw StateError("optimizer state holds " + std::to_string(state.first_moment.size()) + " moments for " +
                         std::to_string(params.size()) + " parameters");
    }
    const double t = static_cast<double>(state.step + 1);
    const double c1 = 1.0 - std::pow(tc.beta1, t);
    const double c2 = 1.0 - std::pow(tc.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Parameter& p = params[i];
        for (double v : p.tensor.grad()) {
            if (!std::isfinite(v)) {
                throw NumericError("non-finite gradient in '" + p.name + "' at step " + std::to_string(state.step));
            }
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Parameter& p = params[i];
        Tensor t_ = p.tensor;
        auto theta = t_.mutable_data();
        auto grad = p.tensor.grad();
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        if (m.size() != theta.size() || v.size() != theta.size()) {
            throw StateError("optimizer moments for '" + p.name + "' do not match its shape");
        }
        const double shrink = p.decay ? 1.0 - lr * tc.weight_decay : 1.0;
        for (std::size_t k = 0; k < theta.size(); ++k) {
            const double gk = grad.empty() ? 0.0 : grad[k];
            m[k] = tc.beta1 * m[k] + (1.0 - tc.beta1) * gk;
            v[k] = tc.beta2 * v[k] + (1.0 - tc.beta2) * gk * gk;
            const double mhat = m[k] / c1;
            const double vhat = v[k] / c2;
            theta[k] = theta[k] * shrink - lr * mhat / (std::sqrt(vhat) + tc.adam_eps);
        }
    }
}

struct StepMetrics {
    std::size_t step = 0;  // completed steps after this update
    double ce = 0.0;
    double loss = 0.0;
    double n_bar = 1.0;
    double n_tilde = 0.0;
    std::vector<double> expected_steps;  // per layer
    std::vector<double> gate_local;
    std::vector<double> gate_global;
    double lr = 0.0;
    double grad_norm = 0.0;
    double tokens_per_sec = 0.0;
};

inline void zero_grads(std::span<const Parameter> params) {
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
}

/// forward -> ponder loss -> backward -> clip -> AdamW -> schedule advance.
inline StepMetrics train_step(const TokenBatch& batch, const ModelParams& params, TrainState& state,
                              const ModelConfig& cfg, const TrainConfig& tc) {
    if (batch.inputs.size() != tc.batch_tokens() || batch.targets.size() != tc.batch_tokens()) {
        throw ConfigError("batch holds " + std::to_string(batch.inputs.size()) + " tokens, expected " +
                          std::to_string(tc.batch_tokens()));
    }
    const auto start = std::chrono::steady_clock::now();
    const std::vector<Parameter> plist = params.parameters();
    zero_grads(plist);

    Graph g;
    ForwardResult fwd = model_forward(g, params, cfg, batch.inputs);
    Tensor ce = cross_entropy(g, fwd.logits, batch.targets.ids);
    PonderLoss pl = ponder_loss(g, ce, fwd.trace, cfg.ponder_weight, cfg.max_loops);
    g.backward(pl.loss);

    StepMetrics m;
    m.ce = ce.item();
    m.loss = pl.loss.item();
    if (!std::isfinite(m.loss)) {
        throw NumericError("non-finite loss at step " + std::to_string(state.step));
    }
    m.n_bar = pl.n_bar;
    m.n_tilde = pl.n_tilde;
    m.expected_steps = expected_steps(fwd.trace);
    m.gate_local = fwd.gates.local_mean;
    m.gate_global = fwd.gates.global_mean;
    m.grad_norm = clip_grad_norm(plist, tc.grad_clip);
    m.lr = cosine_lr(state.step + 1, tc);
    adamw_step(plist, state, m.lr, tc);
    state.step += 1;
    m.step = state.step;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    m.tokens_per_sec = secs > 0.0 ? static_cast<double>(tc.batch_tokens()) / secs : 0.0;
    return m;
}

/// Owns parameters, optimizer state and the batch stream for one run. Batch k of
/// the seeded stream feeds optimizer step k, so state.step fully locates the data.
class Trainer {
public:
    Trainer(ModelConfig cfg, TrainConfig tc, std::shared_ptr<const std::vector<TokenId>> tokens, ModelParams params,
            TrainState state)
        : cfg_(cfg),
          tc_(tc),
          params_(std::move(params)),
          state_(std::move(state)),
          batches_(std::move(tokens), tc.batch_size, tc.seq_len, mix_seed(tc.seed, 0xBA7C4ull)) {
        cfg_.validate();
        tc_.validate();
    }

    static Trainer fresh(const ModelConfig& cfg, const TrainConfig& tc, std::shared_ptr<const std::vector<TokenId>> tokens) {
        ModelParams params = ModelParams::init(cfg, mix_seed(tc.seed, 0x1417ull));
        TrainState state = TrainState::fresh(params.parameters());
        return Trainer(cfg, tc, std::move(tokens), std::move(params), std::move(state));
    }

    StepMetrics step() {
        TokenBatch batch = batches_.batch_at(state_.step);
        return train_step(batch, params_, state_, cfg_, tc_);
    }

    bool done() const { return state_.step >= tc_.total_steps; }

    const ModelConfig& model_config() const { return cfg_; }
    const TrainConfig& train_config() const { return tc_; }
    const ModelParams& params() const { return params_; }
    const TrainState& state() const { return state_; }
    BatchIterator& batches() { return batches_; }

private:
    ModelConfig cfg_;
    TrainConfig tc_;
    ModelParams params_;
    TrainState state_;
    BatchIterator batches_;
};

}  // namespace loopmem
