#pragma once

#include <cstddef>
#include <string>

#include <json.hpp>

#include "loopmem/error.hpp"

namespace loopmem {

/// Architecture and loss hyperparameters. JSON keys follow the short names
/// (L, D, H, d_ff, V, T_max, N_max, M_L, M_G, alpha_init, gate_bias_init, lambda).
struct ModelConfig {
    std::size_t layers = 4;          // L
    std::size_t dim = 64;            // D
    std::size_t heads = 4;           // H
    std::size_t ffn_dim = 256;       // d_ff
    std::size_t vocab = 257;         // V
    std::size_t max_seq_len = 128;   // T_max
    std::size_t max_loops = 3;       // N_max
    std::size_t local_slots = 32;    // M_L
    std::size_t global_slots = 16;   // M_G
    double alpha_init = -7.0;
    double gate_bias_init = -3.0;
    double ponder_weight = 0.0;      // lambda
    bool loops_enabled = true;
    bool memory_enabled = true;

    bool has_local_memory() const noexcept { return memory_enabled && local_slots > 0; }
    bool has_global_memory() const noexcept { return memory_enabled && global_slots > 0; }

    /// Iterations each layer runs per invocation (1 when looping is off).
    std::size_t block_applications() const noexcept { return loops_enabled ? max_loops : 1; }

    void validate(const std::string& prefix = "model") const {
        auto field = [&](const char* name) { return prefix.empty() ? std::string(name) : prefix + "." + name; };
        if (layers == 0) {
            throw ConfigError("must be at least 1", field("L"));
        }
        if (dim == 0) {
            throw ConfigError("must be at least 1", field("D"));
        }
        if (heads == 0 || dim % heads != 0) {
            throw ConfigError("must divide D = " + std::to_string(dim), field("H"));
        }
        if (ffn_dim == 0) {
            throw ConfigError("must be at least 1", field("d_ff"));
        }
        if (vocab == 0) {
            throw ConfigError("must be at least 1", field("V"));
        }
        if (max_seq_len == 0) {
            throw ConfigError("must be at least 1", field("T_max"));
        }
        if (max_loops == 0) {
            throw ConfigError("must be at least 1", field("N_max"));
        }
        if (memory_enabled && local_slots + global_slots == 0) {
            throw ConfigError("memory_enabled needs M_L + M_G > 0", field("M_L"));
        }
        if (!(ponder_weight >= 0.0)) {
            throw ConfigError("must be non-negative", field("lambda"));
        }
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"L", c.layers},
                       {"D", c.dim},
                       {"H", c.heads},
                       {"d_ff", c.ffn_dim},
                       {"V", c.vocab},
                       {"T_max", c.max_seq_len},
                       {"N_max", c.max_loops},
                       {"M_L", c.local_slots},
                       {"M_G", c.global_slots},
                       {"alpha_init", c.alpha_init},
                       {"gate_bias_init", c.gate_bias_init},
                       {"lambda", c.ponder_weight},
                       {"loops_enabled", c.loops_enabled},
                       {"memory_enabled", c.memory_enabled}};
}

namespace detail {

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& prefix) {
    const std::string path = prefix.empty() ? std::string(key) : prefix + "." + key;
    auto it = j.find(key);
    if (it == j.end()) {
        return;
    }
    try {
        if constexpr (std::is_same_v<T, std::size_t>) {
            if (!it->is_number_integer() || it->template get<long long>() < 0) {
                throw ConfigError("expected a non-negative integer", path);
            }
        } else if constexpr (std::is_same_v<T, bool>) {
            if (!it->is_boolean()) {
                throw ConfigError("expected a boolean", path);
            }
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!it->is_number()) {
                throw ConfigError("expected a number", path);
            }
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!it->is_string()) {
                throw ConfigError("expected a string", path);
            }
        }
        out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(e.what(), path);
    }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& prefix) {
    if (!j.is_object()) {
        throw ConfigError("expected an object", prefix);
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool found = false;
        for (const char* k : known) {
            found = found || it.key() == k;
        }
        if (!found) {
            throw ConfigError("unknown field", prefix.empty() ? it.key() : prefix + "." + it.key());
        }
    }
}

}  // namespace detail

/// Overlays the fields present in `j` onto `base`. Unknown keys are rejected.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {},
                                          const std::string& prefix = "model") {
    detail::reject_unknown(j,
                           {"preset", "L", "D", "H", "d_ff", "V", "T_max", "N_max", "M_L", "M_G", "alpha_init",
                            "gate_bias_init", "lambda", "loops_enabled", "memory_enabled"},
                           prefix);
    detail::read_field(j, "L", base.layers, prefix);
    detail::read_field(j, "D", base.dim, prefix);
    detail::read_field(j, "H", base.heads, prefix);
    detail::read_field(j, "d_ff", base.ffn_dim, prefix);
    detail::read_field(j, "V", base.vocab, prefix);
    detail::read_field(j, "T_max", base.max_seq_len, prefix);
    detail::read_field(j, "N_max", base.max_loops, prefix);
    detail::read_field(j, "M_L", base.local_slots, prefix);
    detail::read_field(j, "M_G", base.global_slots, prefix);
    detail::read_field(j, "alpha_init", base.alpha_init, prefix);
    detail::read_field(j, "gate_bias_init", base.gate_bias_init, prefix);
    detail::read_field(j, "lambda", base.ponder_weight, prefix);
    detail::read_field(j, "loops_enabled", base.loops_enabled, prefix);
    detail::read_field(j, "memory_enabled", base.memory_enabled, prefix);
    return base;
}

}  // namespace loopmem
