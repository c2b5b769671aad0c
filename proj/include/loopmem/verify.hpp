#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "loopmem/grad_check.hpp"
#include "loopmem/model.hpp"
#include "loopmem/ops.hpp"
#include "loopmem/reference.hpp"
#include "loopmem/rng.hpp"
#include "loopmem/training.hpp"

// Init-time invariant suites shared by `loopmem verify` and the acceptance run.

namespace loopmem {

struct SuiteResult {
    std::string name;
    bool passed = false;
    double metric = 0.0;  // worst observed value of the suite's measured quantity
    double seconds = 0.0;
    std::string detail;
};

inline TokenGrid random_tokens(Rng& rng, std::size_t rows, std::size_t cols, std::size_t vocab) {
    TokenGrid grid{rows, cols, {}};
    for (std::size_t i = 0; i < rows * cols; ++i) {
        grid.ids.push_back(static_cast<TokenId>(rng.below(vocab)));
    }
    return grid;
}

/// max |a - b| over equally long ranges
inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ShapeError("comparing " + std::to_string(a.size()) + " values against " + std::to_string(b.size()));
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

inline double max_norm(std::span<const double> a) {
    double worst = 0.0;
    for (double v : a) {
        worst = std::max(worst, std::abs(v));
    }
    return worst;
}

inline Tensor inference_logits(const ModelParams& params, const ModelConfig& cfg, const TokenGrid& tokens) {
    Graph g(Graph::Mode::inference);
    return model_forward(g, params, cfg, tokens).logits;
}

namespace detail {

template <class Fn>
SuiteResult timed_suite(std::string name, Fn&& body) {
    const auto start = std::chrono::steady_clock::now();
    SuiteResult r = body();
    r.name = std::move(name);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

inline std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

}  // namespace detail

struct GradSuiteOptions {
    std::size_t batch = 2;
    std::size_t seq_len = 16;
    double ponder_weight = 0.5;  // keeps the E[n] path in the checked loss
    GradCheckOptions check;
};

/// Central-difference check of CE + lambda * n_tilde against backprop, every parameter tensor.
inline SuiteResult gradient_suite(const ModelConfig& cfg, std::uint64_t seed, const GradSuiteOptions& opt = {}) {
    return detail::timed_suite("gradient-check", [&] {
        ModelParams params = ModelParams::init(cfg, seed);
        Rng rng(mix_seed(seed, 0x67AD));
        const std::size_t t = std::min(opt.seq_len, cfg.max_seq_len);
        TokenGrid inputs = random_tokens(rng, opt.batch, t, cfg.vocab);
        TokenGrid targets = random_tokens(rng, opt.batch, t, cfg.vocab);
        auto loss_fn = [&](Graph& g) {
            ForwardResult fwd = model_forward(g, params, cfg, inputs);
            Tensor ce = cross_entropy(g, fwd.logits, targets.ids);
            return ponder_loss(g, ce, fwd.trace, opt.ponder_weight, cfg.max_loops).loss;
        };
        std::vector<NamedTensor> named = params.named_tensors();
        GradCheckOptions check = opt.check;
        check.seed = seed;
        GradCheckReport report = grad_check(loss_fn, named, check);
        SuiteResult r;
        r.passed = report.passed;
        r.metric = report.max_rel_error;
        std::string worst;
        double worst_err = -1.0;
        std::size_t checked = 0;
        for (const auto& tc : report.tensors) {
            checked += tc.checked;
            if (tc.max_rel_error > worst_err) {
                worst_err = tc.max_rel_error;
                worst = tc.name;
            }
        }
        r.detail = std::to_string(checked) + " elements over " + std::to_string(report.tensors.size()) +
                   " tensors, worst in " + worst;
        return r;
    });
}

/// Random router weights and hidden states: per-token halting mass sums to 1
/// and E[n] stays within [1, N_max].
inline SuiteResult halting_suite(const ModelConfig& cfg, std::uint64_t seed, std::size_t draws = 1000) {
    return detail::timed_suite("halting-normalization", [&] {
        Rng rng(mix_seed(seed, 0x4A17));
        const std::size_t d = cfg.dim;
        const std::size_t n = cfg.max_loops;
        double worst_mass = 0.0;
        double worst_excursion = 0.0;
        for (std::size_t draw = 0; draw < draws; ++draw) {
            const double spread = std::pow(10.0, rng.uniform(-2.0, 1.0));
            HaltingRouter router{Tensor({d + 1, 1}, rng.normal_vector(d + 1, spread)),
                                 Tensor({1}, {rng.uniform(-4.0, 4.0)})};
            Graph g(Graph::Mode::inference);
            std::vector<Tensor> step_probs;
            const std::size_t b = 2;
            const std::size_t t = 4;
            for (std::size_t s = 1; s <= n; ++s) {
                Tensor h({b, t, d}, rng.normal_vector(b * t * d, 1.0));
                step_probs.push_back(halting_probability(g, h, s, router, n));
            }
            std::vector<Tensor> halt = halting_distribution(g, step_probs);
            for (std::size_t tok = 0; tok < b * t; ++tok) {
                double mass = 0.0;
                double expected = 0.0;
                for (std::size_t s = 0; s < n; ++s) {
                    mass += halt[s].data()[tok];
                    expected += static_cast<double>(s + 1) * halt[s].data()[tok];
                }
                worst_mass = std::max(worst_mass, std::abs(mass - 1.0));
                worst_excursion = std::max({worst_excursion, 1.0 - expected, expected - static_cast<double>(n)});
            }
        }
        SuiteResult r;
        r.metric = worst_mass;
        r.passed = worst_mass <= 1e-9 && worst_excursion <= 0.0;
        r.detail = std::to_string(draws) + " draws, worst |sum - 1| " + detail::sci(worst_mass) +
                   ", worst E[n] excursion " + detail::sci(std::max(worst_excursion, 0.0));
        return r;
    });
}

/// With alpha = -7 and b_g = -3 the model stays within 1% (relative max-norm) of
/// embedding -> final norm -> unembedding.
inline SuiteResult near_identity_suite(ModelConfig cfg, std::uint64_t seed, std::size_t inputs = 32,
                                       std::size_t seq_len = 16) {
    return detail::timed_suite("near-identity", [&] {
        cfg.alpha_init = -7.0;
        cfg.gate_bias_init = -3.0;
        Rng rng(mix_seed(seed, 0x1DE7));
        double worst = 0.0;
        const std::size_t t = std::min(seq_len, cfg.max_seq_len);
        for (std::size_t i = 0; i < inputs; ++i) {
            ModelParams params = ModelParams::init(cfg, mix_seed(seed, i));
            TokenGrid tokens = random_tokens(rng, 1, t, cfg.vocab);
            Tensor logits = inference_logits(params, cfg, tokens);
            reference::Matrix stripped = reference::stripped_logits(params, cfg, tokens);
            worst = std::max(worst, max_abs_diff(logits.data(), stripped) / max_norm(stripped));
        }
        SuiteResult r;
        r.metric = worst;
        r.passed = worst < 0.01;
        r.detail = std::to_string(inputs) + " inputs, worst relative max-norm deviation " + detail::sci(worst);
        return r;
    });
}

/// Permuting the slots of each bank (K and V rows together) leaves logits unchanged.
inline SuiteResult permutation_suite(const ModelConfig& cfg, std::uint64_t seed, std::size_t seq_len = 16) {
    return detail::timed_suite("memory-permutation", [&] {
        SuiteResult r;
        if (!cfg.memory_enabled) {
            r.passed = true;
            r.detail = "memory disabled, nothing to permute";
            return r;
        }
        ModelConfig c = cfg;
        c.gate_bias_init = 2.0;  // open gates so the readout dominates the residual
        ModelParams params = ModelParams::init(c, seed);
        Rng rng(mix_seed(seed, 0x9E57));
        TokenGrid tokens = random_tokens(rng, 2, std::min(seq_len, c.max_seq_len), c.vocab);
        const Tensor base = inference_logits(params, c, tokens);
        std::vector<MemoryBank*> banks;
        for (auto& layer : params.layers) {
            if (layer.local_memory) {
                banks.push_back(&*layer.local_memory);
            }
        }
        if (params.global_memory) {
            banks.push_back(&*params.global_memory);
        }
        double worst = 0.0;
        for (MemoryBank* bank : banks) {
            const std::size_t m = bank->keys.dim(0);
            const std::size_t d = bank->keys.dim(1);
            std::vector<std::size_t> perm(m);
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            rng.shuffle(perm);
            const MemoryBank saved{bank->keys.clone(), bank->values.clone(), bank->key_gain};
            auto permute = [&](const Tensor& src, Tensor& dst) {
                auto in = src.data();
                auto out = dst.mutable_data();
                for (std::size_t i = 0; i < m; ++i) {
                    std::copy_n(in.begin() + perm[i] * d, d, out.begin() + i * d);
                }
            };
            permute(saved.keys, bank->keys);
            permute(saved.values, bank->values);
            worst = std::max(worst, max_abs_diff(inference_logits(params, c, tokens).data(), base.data()));
            std::copy_n(saved.keys.data().begin(), m * d, bank->keys.mutable_data().begin());
            std::copy_n(saved.values.data().begin(), m * d, bank->values.mutable_data().begin());
        }
        r.metric = worst;
        r.passed = worst < 1e-9;
        r.detail = std::to_string(banks.size()) + " banks permuted, worst logit change " + detail::sci(worst);
        return r;
    });
}

/// Loops and memory disabled: logits match the straight-loop reference transformer.
inline SuiteResult reduction_suite(ModelConfig cfg, std::uint64_t seed, std::size_t draws = 10,
                                   std::size_t seq_len = 16) {
    return detail::timed_suite("reduction-oracle", [&] {
        cfg.loops_enabled = false;
        cfg.memory_enabled = false;
        Rng rng(mix_seed(seed, 0x0AC1E));
        double worst = 0.0;
        for (std::size_t i = 0; i < draws; ++i) {
            ModelParams params = ModelParams::init(cfg, mix_seed(seed, 100 + i));
            // Re-draw every tensor at a larger scale so each block moves the residual stream.
            detail::for_each_tensor(params, [&](Tensor& t) {
                auto v = t.mutable_data();
                for (double& x : v) {
                    x = rng.normal() * 0.3;
                }
            });
            TokenGrid tokens = random_tokens(rng, 2, std::min(seq_len, cfg.max_seq_len), cfg.vocab);
            Tensor logits = inference_logits(params, cfg, tokens);
            worst = std::max(worst, max_abs_diff(logits.data(), reference::plain_transformer_logits(params, cfg, tokens)));
        }
        SuiteResult r;
        r.metric = worst;
        r.passed = worst < 1e-10;
        r.detail = std::to_string(draws) + " draws, worst |logit difference| " + detail::sci(worst);
        return r;
    });
}

}  // namespace loopmem
