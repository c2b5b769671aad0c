#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "loopmem/config.hpp"
#include "loopmem/model.hpp"
#include "loopmem/serialize.hpp"
#include "loopmem/training.hpp"

// Checkpoint = tensor container holding every parameter plus "optim.m.<name>" /
// "optim.v.<name>" moments; meta carries {"model": ModelConfig, "step": n, ...}.

namespace loopmem {

struct Checkpoint {
    ModelConfig model;
    ModelParams params;
    TrainState state;
    nlohmann::json meta;  // full meta block, including caller extras
};

inline void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ModelParams& params,
                            const TrainState& state, nlohmann::json extra = nlohmann::json::object()) {
    std::vector<NamedTensor> tensors = params.named_tensors();
    const std::size_t n = tensors.size();
    if (state.first_moment.size() == n) {
        for (std::size_t i = 0; i < n; ++i) {
            const Shape& s = tensors[i].tensor.shape();
            tensors.push_back({"optim.m." + tensors[i].name, Tensor(s, state.first_moment[i])});
            tensors.push_back({"optim.v." + tensors[i].name, Tensor(s, state.second_moment[i])});
        }
    }
    extra["model"] = cfg;
    extra["step"] = state.step;
    save_tensors(path, tensors, extra);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    TensorFile file = load_tensors(path);
    Checkpoint ck;
    if (!file.meta.contains("model") || !file.meta.contains("step")) {
        throw CorruptCheckpoint(path.string() + " lacks the model/step meta block");
    }
    try {
        ck.model = model_config_from_json(file.meta.at("model"));
        ck.model.validate();
        ck.state.step = file.meta.at("step").get<std::size_t>();
    } catch (const ConfigError& e) {
        throw CorruptCheckpoint(std::string("invalid model config in checkpoint: ") + e.what());
    } catch (const nlohmann::json::exception& e) {
        throw CorruptCheckpoint(std::string("invalid checkpoint meta: ") + e.what());
    }
    ck.meta = file.meta;
    ck.params = ModelParams::init(ck.model, 0);
    const std::vector<Parameter> plist = ck.params.parameters();
    bool has_moments = true;
    for (const auto& p : plist) {
        const Tensor* stored = file.find(p.name);
        if (stored == nullptr || stored->shape() != p.tensor.shape()) {
            throw CorruptCheckpoint("parameter '" + p.name + "' missing or misshapen in " + path.string());
        }
        has_moments = has_moments && file.find("optim.m." + p.name) != nullptr &&
                      file.find("optim.v." + p.name) != nullptr;
    }
    for (const auto& p : plist) {
        Tensor dst = p.tensor;
        auto src = file.find(p.name)->data();
        std::copy(src.begin(), src.end(), dst.mutable_data().begin());
        if (has_moments) {
            auto m = file.find("optim.m." + p.name)->data();
            auto v = file.find("optim.v." + p.name)->data();
            if (m.size() != src.size() || v.size() != src.size()) {
                throw CorruptCheckpoint("optimizer moments for '" + p.name + "' misshapen");
            }
            ck.state.first_moment.emplace_back(m.begin(), m.end());
            ck.state.second_moment.emplace_back(v.begin(), v.end());
        }
    }
    if (!has_moments) {
        TrainState fresh = TrainState::fresh(plist);
        ck.state.first_moment = std::move(fresh.first_moment);
        ck.state.second_moment = std::move(fresh.second_moment);
    }
    return ck;
}

}  // namespace loopmem
