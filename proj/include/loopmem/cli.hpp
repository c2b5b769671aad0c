#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "loopmem/checkpoint.hpp"
#include "loopmem/eval.hpp"
#include "loopmem/flops.hpp"
#include "loopmem/presets.hpp"
#include "loopmem/run_config.hpp"
#include "loopmem/training.hpp"
#include "loopmem/verify.hpp"

namespace loopmem::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitUsage = 2;

inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kTelemetryJsonl = "telemetry.jsonl";
inline constexpr const char* kTelemetryCsv = "telemetry.csv";

struct Options {
    std::string config;
    std::string preset;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<std::size_t> steps;
    bool match_depth = false;
    std::string checkpoint;
    std::string resume;
    std::string eval_set;
    std::optional<std::size_t> seq_len;
    std::string telemetry;
    std::optional<std::size_t> max_loops;
};

/// Model config from --config (a run config or a bare model block) or --preset.
inline ModelConfig model_from_options(const Options& o) {
    ModelConfig cfg;
    if (!o.config.empty()) {
        std::ifstream in(o.config);
        if (!in) {
            throw ConfigError("cannot open " + o.config, "config");
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError(o.config + ": " + e.what(), "config");
        }
        cfg = j.contains("model") ? resolve_model(j.at("model")) : resolve_model(j, nullptr, "");
    } else if (!o.preset.empty()) {
        cfg = model_preset(o.preset);
    } else {
        cfg = model_preset("tiny");
    }
    cfg.validate();
    return cfg;
}

inline nlohmann::json flop_json(const FlopBreakdown& f) {
    return {{"block_applications", f.block_applications},
            {"memory", f.memory},
            {"router", f.router},
            {"unembedding", f.unembedding},
            {"total", f.total},
            {"applications", f.applications}};
}

inline int cmd_flops(const Options& o, std::ostream& out) {
    const ModelConfig cfg = model_from_options(o);
    const std::size_t t = o.seq_len.value_or(cfg.max_seq_len);
    nlohmann::json j{{"model", cfg},
                     {"seq_len", t},
                     {"parameters", parameter_count(cfg)},
                     {"flops_per_token", flop_json(flop_estimate(cfg, t))}};
    if (o.match_depth) {
        const std::size_t depth = matching_plain_depth(cfg, t);
        ModelConfig plain = cfg;
        plain.layers = depth;
        plain.loops_enabled = false;
        plain.memory_enabled = false;
        j["match_depth"] = depth;
        j["matched_flops_per_token"] = flop_json(flop_estimate(plain, t));
    }
    out << j.dump(2) << '\n';
    return kExitOk;
}

inline int cmd_verify(const Options& o, std::ostream& out) {
    const ModelConfig cfg = model_from_options(o);
    const std::uint64_t seed = o.seed.value_or(0);
    std::vector<SuiteResult> results;
    results.push_back(gradient_suite(cfg, seed));
    results.push_back(halting_suite(cfg, seed));
    results.push_back(near_identity_suite(cfg, seed));
    results.push_back(permutation_suite(cfg, seed));
    results.push_back(reduction_suite(cfg, seed));
    bool ok = true;
    for (const auto& r : results) {
        out << (r.passed ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail << " (" << std::fixed
            << std::setprecision(1) << r.seconds << "s)" << std::defaultfloat << '\n';
        ok = ok && r.passed;
    }
    return ok ? kExitOk : kExitError;
}

inline TelemetryRecord evaluate_telemetry(const ModelParams& params, const ModelConfig& cfg, const RunConfig& run,
                                          const std::vector<TokenId>& val, std::size_t step) {
    ForwardResult fwd;
    const double ce = validation_ce(params, cfg, val, run.train.seq_len, run.val_windows, &fwd);
    return record_telemetry(step, ce, fwd.trace, fwd.gates, loop_alphas(params));
}

inline void export_telemetry_files(const std::vector<TelemetryRecord>& records, const std::filesystem::path& csv,
                                   std::size_t max_loops) {
    export_csv(records, csv);
    write_transition_sidecar(csv, detect_transition(transition_series(records), max_loops));
}

inline int cmd_train(const Options& o, std::ostream& out) {
    if (o.config.empty()) {
        throw ConfigError("train needs --config", "config");
    }
    RunConfig run = load_run_config(o.config);
    if (o.seed) {
        run.train.seed = *o.seed;
    }
    if (o.steps) {
        run.train.total_steps = *o.steps;
    }
    if (!o.out.empty()) {
        run.out_dir = o.out;
    }
    run.validate();
    RunData data = load_run_data(run);
    const std::filesystem::path jsonl = run.out_dir / kTelemetryJsonl;
    const std::filesystem::path ckpt_path = run.out_dir / kCheckpointFile;

    std::optional<Trainer> trainer;
    if (!o.resume.empty()) {
        Checkpoint ck = load_checkpoint(o.resume);
        if (ck.model != run.model) {
            throw ConfigError("checkpoint model differs from the run config", "model");
        }
        trainer.emplace(run.model, run.train, data.train, std::move(ck.params), std::move(ck.state));
    } else {
        trainer.emplace(Trainer::fresh(run.model, run.train, data.train));
        std::filesystem::remove(jsonl);
    }
    const nlohmann::json meta{{"run", to_json(run)}};
    std::ofstream log(jsonl, std::ios::app);
    if (!log) {
        throw IoError("cannot open " + jsonl.string());
    }
    while (!trainer->done()) {
        StepMetrics m = trainer->step();
        const bool last = trainer->done();
        if (m.step % run.telemetry_every() != 0 && !last) {
            continue;
        }
        TelemetryRecord rec = evaluate_telemetry(trainer->params(), run.model, run, data.val, m.step);
        nlohmann::json line = to_json(rec);
        line["ce"] = m.ce;
        line["loss"] = m.loss;
        line["lr"] = m.lr;
        line["grad_norm"] = m.grad_norm;
        line["tokens_per_sec"] = m.tokens_per_sec;
        log << line.dump() << '\n';
        log.flush();
        save_checkpoint(ckpt_path, run.model, trainer->params(), trainer->state(), meta);
        out << "step " << m.step << " ce " << m.ce << " val_ce " << rec.val_ce << " n_bar " << rec.n_bar << " lr "
            << m.lr << '\n';
    }
    log.close();
    const auto records = read_telemetry_jsonl(jsonl);
    if (!records.empty()) {
        export_telemetry_files(records, run.out_dir / kTelemetryCsv, run.model.max_loops);
    }
    out << "wrote " << ckpt_path.string() << '\n';
    return kExitOk;
}

inline int cmd_eval(const Options& o, std::ostream& out) {
    if (o.checkpoint.empty()) {
        throw ConfigError("eval needs --checkpoint", "checkpoint");
    }
    Checkpoint ck = load_checkpoint(o.checkpoint);
    std::string set = o.eval_set;
    if (set.empty() && ck.meta.contains("run") && ck.meta["run"].contains("eval_set")) {
        set = ck.meta["run"]["eval_set"].get<std::string>();
    }
    if (set.empty()) {
        throw ConfigError("eval needs --eval-set or a checkpoint run config naming one", "eval_set");
    }
    const std::vector<EvalItem> items = load_eval_set(set);
    out << eval_bpb(ck.params, ck.model, items).to_json().dump(2) << '\n';
    return kExitOk;
}

inline int cmd_inspect(const Options& o, std::ostream& out) {
    if (o.checkpoint.empty()) {
        throw ConfigError("inspect needs --checkpoint", "checkpoint");
    }
    Checkpoint ck = load_checkpoint(o.checkpoint);
    nlohmann::json j;
    if (ck.meta.contains("run")) {
        RunConfig run = run_config_from_json(ck.meta.at("run"));
        run.model = ck.model;
        RunData data = load_run_data(run);
        j = to_json(evaluate_telemetry(ck.params, ck.model, run, data.val, ck.state.step));
    } else {
        std::vector<std::vector<double>> scales;
        for (const auto& layer : loop_alphas(ck.params)) {
            std::vector<double> s;
            for (double a : layer) {
                s.push_back(detail::softplus(a));
            }
            scales.push_back(std::move(s));
        }
        j = {{"step", ck.state.step}, {"loop_scales", scales}};
    }
    j["alpha"] = loop_alphas(ck.params);
    j["model"] = ck.model;
    out << j.dump(2) << '\n';
    return kExitOk;
}

inline int cmd_export(const Options& o, std::ostream& out) {
    if (o.telemetry.empty() || o.out.empty()) {
        throw ConfigError("export-telemetry needs --telemetry <jsonl> and --out <csv>", "telemetry");
    }
    const auto records = read_telemetry_jsonl(o.telemetry);
    if (records.empty()) {
        throw ConfigError("no telemetry records in " + o.telemetry, "telemetry");
    }
    std::size_t n_max = 1;
    for (const auto& layer : records.front().loop_scales) {
        n_max = std::max(n_max, layer.size());
    }
    export_telemetry_files(records, o.out, o.max_loops.value_or(n_max));
    out << "wrote " << o.out << '\n';
    return kExitOk;
}

/// Entry point; `args` excludes the program name.
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Looped transformer with gated memory: training, evaluation and cost accounting", "loopmem"};
    app.require_subcommand(1);
    Options o;

    auto model_flags = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "run config or model config JSON");
        sub->add_option("--preset", o.preset, "model preset, e.g. tiny/mem-3 or paper/loop3");
    };
    CLI::App* train = app.add_subcommand("train", "train a model from a run config");
    train->add_option("--config", o.config, "run config JSON")->required();
    train->add_option("--seed", o.seed, "override train.seed");
    train->add_option("--out", o.out, "override the output directory");
    train->add_option("--steps", o.steps, "override train.total_steps");
    train->add_option("--resume", o.resume, "continue from a checkpoint");

    CLI::App* eval = app.add_subcommand("eval", "bits-per-byte on a JSON-lines eval set");
    eval->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
    eval->add_option("--eval-set", o.eval_set, "eval set (JSON lines)");

    CLI::App* verify = app.add_subcommand("verify", "gradient, halting, identity, permutation and oracle checks");
    model_flags(verify);
    verify->add_option("--seed", o.seed, "seed for parameters and inputs");

    CLI::App* flops = app.add_subcommand("flops", "parameter count and forward FLOPs per token");
    model_flags(flops);
    flops->add_flag("--match-depth", o.match_depth, "report the plain depth with matching cost");
    flops->add_option("--seq-len", o.seq_len, "attention context length (default T_max)");

    CLI::App* inspect = app.add_subcommand("inspect", "per-layer E[n], gate means and loop scales");
    inspect->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();

    CLI::App* exporter = app.add_subcommand("export-telemetry", "telemetry JSONL to CSV plus transition sidecar");
    exporter->add_option("--telemetry", o.telemetry, "telemetry.jsonl written by train")->required();
    exporter->add_option("--out", o.out, "CSV path")->required();
    exporter->add_option("--max-loops", o.max_loops, "N_max for the transition threshold");

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    }

    try {
        if (*train) {
            return cmd_train(o, out);
        }
        if (*eval) {
            return cmd_eval(o, out);
        }
        if (*verify) {
            return cmd_verify(o, out);
        }
        if (*flops) {
            return cmd_flops(o, out);
        }
        if (*inspect) {
            return cmd_inspect(o, out);
        }
        return cmd_export(o, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
    }
    return kExitError;
}

}  // namespace loopmem::cli
