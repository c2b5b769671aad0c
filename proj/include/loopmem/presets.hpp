#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "loopmem/config.hpp"
#include "loopmem/flops.hpp"

namespace loopmem {

namespace detail {

inline ModelConfig preset_base(std::string_view scale) {
    ModelConfig c;
    if (scale == "tiny") {
        return c;  // L4 D64 H4 d_ff256 V257 T128 N3 M_L32 M_G16
    }
    c.layers = 12;
    c.dim = 768;
    c.heads = 12;
    c.ffn_dim = 3072;
    c.vocab = 50304;
    c.max_seq_len = 1024;
    c.local_slots = 1024;
    c.global_slots = 512;
    return c;
}

inline ModelConfig with_loops(ModelConfig c, std::size_t n) {
    c.loops_enabled = true;
    c.max_loops = n;
    c.memory_enabled = false;
    return c;
}

inline ModelConfig plain(ModelConfig c) {
    c.loops_enabled = false;
    c.memory_enabled = false;
    return c;
}

/// d_ff giving `c` (otherwise unchanged) the parameter count closest to `target`.
inline std::size_t matching_ffn_dim(ModelConfig c, std::size_t target) {
    c.ffn_dim = 1;
    const double at_one = static_cast<double>(parameter_count(c));
    const double slope = static_cast<double>(c.layers * (2 * c.dim + 1));
    const double dff = 1.0 + std::round((static_cast<double>(target) - at_one) / slope);
    return static_cast<std::size_t>(std::max(1.0, dff));
}

}  // namespace detail

/// Names accepted by model_preset, "<scale>/<variant>" with scale tiny or paper.
inline std::vector<std::string> preset_names() {
    std::vector<std::string> out;
    for (const char* scale : {"tiny", "paper"}) {
        for (const char* v : {"isopar", "loop3", "loop5", "loop7", "isoflop", "isopar-m", "mem-3", "mem0", "mem3",
                              "isoflop-m"}) {
            out.push_back(std::string(scale) + "/" + v);
        }
    }
    return out;
}

inline ModelConfig model_preset(std::string_view name) {
    if (name == "tiny") {
        name = "tiny/mem-3";
    }
    const auto slash = name.find('/');
    const std::string_view scale = name.substr(0, slash);
    if (slash == std::string_view::npos || (scale != "tiny" && scale != "paper")) {
        throw ConfigError("unknown preset '" + std::string(name) + "'", "preset");
    }
    const std::string_view variant = name.substr(slash + 1);
    const ModelConfig base = detail::preset_base(scale);
    const ModelConfig loop3 = detail::with_loops(base, 3);
    ModelConfig mem = loop3;
    mem.memory_enabled = true;

    if (variant == "loop3") {
        return loop3;
    }
    if (variant == "loop5") {
        return detail::with_loops(base, 5);
    }
    if (variant == "loop7") {
        return detail::with_loops(base, 7);
    }
    if (variant == "isopar") {
        ModelConfig c = detail::plain(base);
        c.ffn_dim = detail::matching_ffn_dim(c, parameter_count(loop3));
        return c;
    }
    if (variant == "isoflop") {
        ModelConfig c = detail::plain(base);
        c.layers = matching_plain_depth(loop3, loop3.max_seq_len);
        return c;
    }
    if (variant == "mem-3" || variant == "mem0" || variant == "mem3") {
        mem.gate_bias_init = variant == "mem-3" ? -3.0 : (variant == "mem0" ? 0.0 : 3.0);
        return mem;
    }
    if (variant == "isopar-m" || variant == "isoflop-m") {
        ModelConfig c = detail::plain(base);
        c.ffn_dim = detail::matching_ffn_dim(c, parameter_count(mem));
        if (variant == "isoflop-m") {
            c.layers = matching_plain_depth(loop3, loop3.max_seq_len);
        }
        return c;
    }
    throw ConfigError("unknown preset '" + std::string(name) + "'", "preset");
}

}  // namespace loopmem
