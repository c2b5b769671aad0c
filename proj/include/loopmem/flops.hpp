#pragma once

#include <cmath>
#include <cstddef>

#include "loopmem/config.hpp"

namespace loopmem {

/// Exact number of trainable scalars for `cfg`.
inline std::size_t parameter_count(const ModelConfig& c) {
    const std::size_t d = c.dim;
    std::size_t total = c.vocab * d + c.max_seq_len * d;  // token + positional embeddings
    total += 2 * d + d * c.vocab;                        // final norm + unembedding
    std::size_t per_layer = 4 * d + 4 * d * d + 2 * d * c.ffn_dim + c.ffn_dim + d;
    if (c.loops_enabled) {
        per_layer += (d + 1) + 1 + c.max_loops;
    }
    if (c.memory_enabled) {
        per_layer += d;  // query norm gain
        if (c.has_local_memory()) {
            per_layer += 2 * c.local_slots * d + d + 2 * d * d + d;
        }
        if (c.has_global_memory()) {
            per_layer += 2 * d * d + d;
        }
    }
    total += c.layers * per_layer;
    if (c.has_global_memory()) {
        total += 2 * c.global_slots * d + d;
    }
    return total;
}

enum class FlopMode { per_token, per_sequence };

/// Forward-pass FLOPs (2 per multiply-accumulate), split by component.
struct FlopBreakdown {
    double block_applications = 0.0;  // attention projections, attention mixing, FFN
    double memory = 0.0;
    double router = 0.0;
    double unembedding = 0.0;
    double total = 0.0;
    std::size_t applications = 0;  // block applications across all layers
};

/// FLOPs of one block application for one token attending over `seq_len` positions.
inline double block_flops_per_token(const ModelConfig& c, std::size_t seq_len) {
    const double d = static_cast<double>(c.dim);
    return 8.0 * d * d + 4.0 * static_cast<double>(seq_len) * d + 4.0 * d * static_cast<double>(c.ffn_dim);
}

inline FlopBreakdown flop_estimate(const ModelConfig& c, std::size_t seq_len, FlopMode mode = FlopMode::per_token) {
    const double d = static_cast<double>(c.dim);
    const double layers = static_cast<double>(c.layers);
    FlopBreakdown out;
    out.applications = c.layers * c.block_applications();
    out.block_applications = static_cast<double>(out.applications) * block_flops_per_token(c, seq_len);
    double memory_per_layer = 0.0;
    if (c.has_local_memory()) {
        memory_per_layer += 4.0 * static_cast<double>(c.local_slots) * d + 4.0 * d * d;
    }
    if (c.has_global_memory()) {
        memory_per_layer += 4.0 * static_cast<double>(c.global_slots) * d + 4.0 * d * d;
    }
    out.memory = layers * memory_per_layer;
    if (c.loops_enabled) {
        out.router = layers * static_cast<double>(c.max_loops) * 2.0 * (d + 1.0);
    }
    out.unembedding = 2.0 * d * static_cast<double>(c.vocab);
    if (mode == FlopMode::per_sequence) {
        const double t = static_cast<double>(seq_len);
        out.block_applications *= t;
        out.memory *= t;
        out.router *= t;
        out.unembedding *= t;
    }
    out.total = out.block_applications + out.memory + out.router + out.unembedding;
    return out;
}

/// Depth of a plain transformer (same width, no loops or memory) whose forward
/// cost is closest to that of `c`.
inline std::size_t matching_plain_depth(const ModelConfig& c, std::size_t seq_len) {
    const FlopBreakdown target = flop_estimate(c, seq_len);
    const double per_layer = block_flops_per_token(c, seq_len);
    const double layers = std::round((target.total - target.unembedding) / per_layer);
    return static_cast<std::size_t>(std::max(1.0, layers));
}

}  // namespace loopmem
