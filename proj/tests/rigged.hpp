#pragma once

#include <cmath>

#include "loopmem/model.hpp"

namespace loopmem::testing {

/// Plain model whose every block is the identity and whose readout predicts
/// `target` with certainty after `target`, so an answer made only of `target`
/// bytes that follows a context ending in `target` scores exactly zero NLL.
inline ModelParams rigged_repeat_model(ModelConfig& cfg, TokenId target) {
    cfg.loops_enabled = false;
    cfg.memory_enabled = false;
    ModelParams p = ModelParams::init(cfg, 0);
    auto zero = [](Tensor t) {
        for (double& v : t.mutable_data()) {
            v = 0.0;
        }
    };
    for (auto& l : p.layers) {
        for (Tensor t : {l.block.wq, l.block.wk, l.block.wv, l.block.wo, l.block.w1, l.block.b1, l.block.w2, l.block.b2}) {
            zero(t);
        }
    }
    zero(p.pos_emb);
    zero(p.tok_emb);
    const std::size_t d = cfg.dim;
    auto emb = p.tok_emb.mutable_data();
    for (std::size_t v = 0; v < cfg.vocab; ++v) {
        emb[v * d + (static_cast<TokenId>(v) == target ? 0 : 1)] = 1.0;
    }
    const double dd = static_cast<double>(d);
    const double sigma = std::sqrt(1.0 / dd - 1.0 / (dd * dd));
    auto un = p.unembed.mutable_data();
    const double scale = 20.0;
    for (std::size_t v = 0; v < cfg.vocab; ++v) {
        const std::size_t hot = static_cast<TokenId>(v) == target ? 0 : 1;
        for (std::size_t k = 0; k < d; ++k) {
            un[k * cfg.vocab + v] = scale * ((k == hot ? 1.0 : 0.0) - 1.0 / dd) / sigma;
        }
    }
    return p;
}

}  // namespace loopmem::testing
