#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "loopmem/config.hpp"
#include "loopmem/data.hpp"
#include "loopmem/presets.hpp"
#include "loopmem/training.hpp"

namespace loopmem {

/// Everything one `train` invocation needs. Relative paths in a config file are
/// resolved against the file's directory.
struct RunConfig {
    std::string preset;  // empty when the model block names none
    ModelConfig model;
    TrainConfig train;
    std::vector<std::filesystem::path> train_files;
    std::vector<std::filesystem::path> val_files;
    double val_fraction = 0.1;  // tail of the training stream held out when val_files is empty
    std::optional<std::filesystem::path> eval_set;
    std::filesystem::path out_dir = "run";
    std::optional<std::size_t> telemetry_interval;  // defaults to train.eval_interval
    std::size_t val_windows = 8;

    std::size_t telemetry_every() const { return telemetry_interval.value_or(train.eval_interval); }

    /// Checks values and referenced paths, then creates the output directory.
    void validate() const {
        model.validate("model");
        train.validate("train");
        if (train.seq_len > model.max_seq_len) {
            throw ConfigError("exceeds model.T_max = " + std::to_string(model.max_seq_len), "train.seq_len");
        }
        if (train_files.empty()) {
            throw ConfigError("at least one training file is required", "data.train");
        }
        auto check_paths = [](const std::vector<std::filesystem::path>& paths, const std::string& field) {
            for (std::size_t i = 0; i < paths.size(); ++i) {
                if (!std::filesystem::is_regular_file(paths[i])) {
                    throw ConfigError("no such file: " + paths[i].string(), field + "[" + std::to_string(i) + "]");
                }
            }
        };
        check_paths(train_files, "data.train");
        check_paths(val_files, "data.val");
        if (eval_set && !std::filesystem::is_regular_file(*eval_set)) {
            throw ConfigError("no such file: " + eval_set->string(), "eval_set");
        }
        if (val_files.empty() && !(val_fraction > 0.0 && val_fraction < 1.0)) {
            throw ConfigError("must lie in (0, 1) when data.val is empty", "data.val_fraction");
        }
        if (telemetry_every() == 0) {
            throw ConfigError("must be at least 1", "telemetry_interval");
        }
        if (val_windows == 0) {
            throw ConfigError("must be at least 1", "val_windows");
        }
        std::error_code ec;
        std::filesystem::create_directories(out_dir, ec);
        if (ec) {
            throw ConfigError("cannot create " + out_dir.string() + ": " + ec.message(), "out_dir");
        }
    }
};

inline nlohmann::json to_json(const RunConfig& r) {
    auto strings = [](const std::vector<std::filesystem::path>& paths) {
        std::vector<std::string> out;
        for (const auto& p : paths) {
            out.push_back(p.string());
        }
        return out;
    };
    nlohmann::json model = r.model;
    if (!r.preset.empty()) {
        model["preset"] = r.preset;
    }
    nlohmann::json j{{"model", model},
                     {"train", r.train},
                     {"data", {{"train", strings(r.train_files)}, {"val", strings(r.val_files)},
                               {"val_fraction", r.val_fraction}}},
                     {"out_dir", r.out_dir.string()},
                     {"telemetry_interval", r.telemetry_every()},
                     {"val_windows", r.val_windows}};
    if (r.eval_set) {
        j["eval_set"] = r.eval_set->string();
    }
    return j;
}

/// The model block may name a preset; its remaining fields override the preset.
inline ModelConfig resolve_model(const nlohmann::json& j, std::string* preset_out = nullptr,
                                 const std::string& prefix = "model") {
    ModelConfig base;
    if (j.is_object() && j.contains("preset")) {
        if (!j.at("preset").is_string()) {
            throw ConfigError("expected a string", prefix + ".preset");
        }
        const std::string name = j.at("preset").get<std::string>();
        try {
            base = model_preset(name);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("unknown preset '") + name + "'", prefix + ".preset");
        }
        if (preset_out != nullptr) {
            *preset_out = name;
        }
    }
    return model_config_from_json(j, base, prefix);
}

inline RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
    detail::reject_unknown(j, {"model", "train", "data", "eval_set", "out_dir", "telemetry_interval", "val_windows"}, "");
    RunConfig r;
    auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
    };
    if (j.contains("model")) {
        r.model = resolve_model(j.at("model"), &r.preset);
    }
    if (j.contains("train")) {
        r.train = train_config_from_json(j.at("train"));
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::reject_unknown(d, {"train", "val", "val_fraction"}, "data");
        for (const char* key : {"train", "val"}) {
            if (!d.contains(key)) {
                continue;
            }
            const auto& list = d.at(key);
            const std::string field = std::string("data.") + key;
            if (!list.is_array()) {
                throw ConfigError("expected an array of paths", field);
            }
            auto& dst = std::string(key) == "train" ? r.train_files : r.val_files;
            for (std::size_t i = 0; i < list.size(); ++i) {
                if (!list[i].is_string()) {
                    throw ConfigError("expected a path string", field + "[" + std::to_string(i) + "]");
                }
                dst.push_back(resolve(list[i].get<std::string>()));
            }
        }
        detail::read_field(d, "val_fraction", r.val_fraction, "data");
    }
    if (j.contains("eval_set")) {
        std::string p;
        detail::read_field(j, "eval_set", p, "");
        r.eval_set = resolve(p);
    }
    if (j.contains("out_dir")) {
        std::string p;
        detail::read_field(j, "out_dir", p, "");
        r.out_dir = resolve(p);
    }
    if (j.contains("telemetry_interval")) {
        std::size_t n = 0;
        detail::read_field(j, "telemetry_interval", n, "");
        r.telemetry_interval = n;
    }
    detail::read_field(j, "val_windows", r.val_windows, "");
    return r;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open " + path.string(), "config");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what(), "config");
    }
    return run_config_from_json(j, path.parent_path());
}

/// Training and validation token streams for a run.
struct RunData {
    std::shared_ptr<const std::vector<TokenId>> train;
    std::vector<TokenId> val;
};

inline RunData load_run_data(const RunConfig& r) {
    std::vector<TokenId> train = Corpus::from_files(r.train_files).tokens;
    RunData out;
    if (!r.val_files.empty()) {
        out.val = Corpus::from_files(r.val_files).tokens;
    } else {
        const auto held = static_cast<std::size_t>(static_cast<double>(train.size()) * r.val_fraction);
        out.val.assign(train.end() - static_cast<std::ptrdiff_t>(held), train.end());
        train.resize(train.size() - held);
    }
    out.train = std::make_shared<const std::vector<TokenId>>(std::move(train));
    return out;
}

}  // namespace loopmem
