#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "loopmem/data.hpp"
#include "loopmem/model.hpp"
#include "loopmem/ops.hpp"

namespace loopmem {

// ---------------------------------------------------------------------------
// Bits per byte

/// ell / ln 2 * (L_T / L_B), with ell the mean per-token NLL in nats.
inline double bpb(double nll_nats, long long token_len, long long byte_len) {
    if (token_len <= 0 || byte_len <= 0) {
        throw Error("bpb needs positive lengths, got L_T = " + std::to_string(token_len) +
                    ", L_B = " + std::to_string(byte_len));
    }
    return nll_nats / std::numbers::ln2 * (static_cast<double>(token_len) / static_cast<double>(byte_len));
}

/// Pairwise summation over a fixed order; result independent of thread timing.
inline double pairwise_sum(std::span<const double> v) {
    if (v.size() <= 8) {
        double acc = 0.0;
        for (double x : v) {
            acc += x;
        }
        return acc;
    }
    const std::size_t half = v.size() / 2;
    return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

struct EvalItem {
    std::string context;
    std::string answer;
    std::string domain;
};

inline std::vector<EvalItem> parse_eval_set(std::istream& in, const std::string& source = "<eval set>") {
    std::vector<EvalItem> items;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const std::string where = source + ":" + std::to_string(lineno);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError(where + ": " + e.what());
        }
        EvalItem item;
        for (auto [key, dst] : {std::pair{"context", &item.context}, std::pair{"answer", &item.answer},
                                std::pair{"domain", &item.domain}}) {
            if (!j.contains(key) || !j.at(key).is_string()) {
                throw ConfigError(where + ": field '" + key + "' must be a string");
            }
            *dst = j.at(key).get<std::string>();
        }
        if (item.answer.empty()) {
            throw ConfigError(where + ": answer must be nonempty");
        }
        items.push_back(std::move(item));
    }
    return items;
}

inline std::vector<EvalItem> load_eval_set(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open eval set " + path.string());
    }
    return parse_eval_set(in, path.string());
}

struct DomainScore {
    double mean_bpb = 0.0;
    std::size_t items = 0;
};

struct EvalReport {
    std::map<std::string, DomainScore> domains;
    std::vector<double> item_bpb;  // per input item; NaN when skipped
    std::size_t skipped = 0;

    nlohmann::json to_json() const {
        nlohmann::json d = nlohmann::json::object();
        for (const auto& [name, s] : domains) {
            d[name] = {{"bpb", s.mean_bpb}, {"items", s.items}};
        }
        return {{"domains", d}, {"skipped", skipped}};
    }
};

/// Worker count from LOOPMEM_THREADS (default 1), never more than `work`.
inline std::size_t worker_threads(std::size_t work) {
    std::size_t n = 1;
    if (const char* env = std::getenv("LOOPMEM_THREADS")) {
        char* end = nullptr;
        const unsigned long v = std::strtoul(env, &end, 10);
        if (end != env && v > 0) {
            n = v;
        }
    }
    return std::max<std::size_t>(1, std::min(n, work));
}

/// Scores [BOS] + context + answer; only the answer positions enter the NLL.
/// `logits_fn(TokenGrid)` returns logits of shape [1 x n x V].
template <class LogitsFn>
EvalReport eval_bpb(LogitsFn&& logits_fn, std::span<const EvalItem> items, std::size_t max_len,
                    std::size_t threads = 0) {
    EvalReport report;
    report.item_bpb.assign(items.size(), std::numeric_limits<double>::quiet_NaN());
    auto score = [&](std::size_t i) {
        const EvalItem& item = items[i];
        const std::size_t n = item.context.size() + item.answer.size();
        if (n > max_len) {
            return;
        }
        std::vector<TokenId> tokens = tokenize_bytes(item.context + item.answer);
        TokenGrid input{1, n, std::vector<TokenId>(tokens.begin(), tokens.end() - 1)};
        Tensor logits = logits_fn(input);
        const std::size_t vocab = logits.shape().back();
        auto data = logits.data();
        std::vector<double> nll;
        for (std::size_t j = item.context.size(); j < n; ++j) {
            nll.push_back(row_nll(data.subspan(j * vocab, vocab), static_cast<std::size_t>(tokens[j + 1])));
        }
        const auto len = static_cast<long long>(item.answer.size());
        report.item_bpb[i] = bpb(pairwise_sum(nll) / static_cast<double>(len), len, len);
    };
    const std::size_t workers = threads == 0 ? worker_threads(items.size()) : std::min(threads, items.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < items.size(); ++i) {
            score(i);
        }
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = w; i < items.size(); i += workers) {
                        score(i);
                    }
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) {
            t.join();
        }
        for (auto& e : errors) {
            if (e) {
                std::rethrow_exception(e);
            }
        }
    }
    std::map<std::string, std::vector<double>> per_domain;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (std::isnan(report.item_bpb[i])) {
            ++report.skipped;
        } else {
            per_domain[items[i].domain].push_back(report.item_bpb[i]);
        }
    }
    for (const auto& [name, values] : per_domain) {
        report.domains[name] = {pairwise_sum(values) / static_cast<double>(values.size()), values.size()};
    }
    return report;
}

inline EvalReport eval_bpb(const ModelParams& params, const ModelConfig& cfg, std::span<const EvalItem> items,
                           std::size_t threads = 0) {
    auto logits_fn = [&](const TokenGrid& input) {
        Graph g(Graph::Mode::inference);
        return model_forward(g, params, cfg, input).logits;
    };
    return eval_bpb(logits_fn, items, cfg.max_seq_len, threads);
}

/// Mean next-token CE over `windows` fixed windows of a held-out stream.
inline double validation_ce(const ModelParams& params, const ModelConfig& cfg, std::span<const TokenId> tokens,
                            std::size_t seq_len, std::size_t windows, ForwardResult* last = nullptr) {
    const std::size_t usable = tokens.size() > 0 ? (tokens.size() - 1) / seq_len : 0;
    const std::size_t count = std::min(windows, usable);
    if (count == 0) {
        throw ConfigError("validation stream of " + std::to_string(tokens.size()) + " tokens is shorter than one window");
    }
    TokenGrid inputs{count, seq_len, {}};
    std::vector<TokenId> targets;
    for (std::size_t w = 0; w < count; ++w) {
        const std::size_t start = w * seq_len;
        inputs.ids.insert(inputs.ids.end(), tokens.begin() + start, tokens.begin() + start + seq_len);
        targets.insert(targets.end(), tokens.begin() + start + 1, tokens.begin() + start + seq_len + 1);
    }
    Graph g(Graph::Mode::inference);
    ForwardResult fwd = model_forward(g, params, cfg, inputs);
    const double ce = cross_entropy(g, fwd.logits, targets).item();
    if (last != nullptr) {
        *last = std::move(fwd);
    }
    return ce;
}

// ---------------------------------------------------------------------------
// Telemetry

struct TelemetryRecord {
    std::size_t step = 0;
    double val_ce = 0.0;
    std::vector<double> expected_steps;
    double n_bar = 1.0;
    std::vector<double> gate_local;   // NaN where the layer has no local bank
    std::vector<double> gate_global;  // NaN where the layer has no global bank
    std::vector<std::vector<double>> loop_scales;  // softplus(alpha_t); empty for plain layers
};

/// Raw alpha values per layer (empty for plain layers).
inline std::vector<std::vector<double>> loop_alphas(const ModelParams& params) {
    std::vector<std::vector<double>> out;
    for (const auto& layer : params.layers) {
        if (layer.scales) {
            auto a = layer.scales->alpha.data();
            out.emplace_back(a.begin(), a.end());
        } else {
            out.emplace_back();
        }
    }
    return out;
}

inline TelemetryRecord record_telemetry(std::size_t step, double val_ce, const HaltingTrace& trace,
                                        const GateStats& gates, const std::vector<std::vector<double>>& alphas) {
    TelemetryRecord r;
    r.step = step;
    r.val_ce = val_ce;
    r.expected_steps = expected_steps(trace);
    double total = 0.0;
    for (double e : r.expected_steps) {
        total += e;
    }
    r.n_bar = r.expected_steps.empty() ? 1.0 : total / static_cast<double>(r.expected_steps.size());
    r.gate_local = gates.local_mean;
    r.gate_global = gates.global_mean;
    for (const auto& layer : alphas) {
        std::vector<double> s;
        for (double a : layer) {
            s.push_back(detail::softplus(a));
        }
        r.loop_scales.push_back(std::move(s));
    }
    return r;
}

namespace detail {

inline nlohmann::json nullable(const std::vector<double>& v) {
    nlohmann::json out = nlohmann::json::array();
    for (double x : v) {
        if (std::isnan(x)) {
            out.push_back(nullptr);
        } else {
            out.push_back(x);
        }
    }
    return out;
}

inline std::vector<double> from_nullable(const nlohmann::json& j, const std::string& field) {
    if (!j.is_array()) {
        throw ConfigError("expected an array", field);
    }
    std::vector<double> out;
    for (const auto& x : j) {
        if (x.is_null()) {
            out.push_back(std::numeric_limits<double>::quiet_NaN());
        } else if (x.is_number()) {
            out.push_back(x.get<double>());
        } else {
            throw ConfigError("expected numbers or null", field);
        }
    }
    return out;
}

}  // namespace detail

inline nlohmann::json to_json(const TelemetryRecord& r) {
    return {{"step", r.step},
            {"val_ce", r.val_ce},
            {"expected_steps", r.expected_steps},
            {"n_bar", r.n_bar},
            {"gate_local", detail::nullable(r.gate_local)},
            {"gate_global", detail::nullable(r.gate_global)},
            {"loop_scales", r.loop_scales}};
}

inline TelemetryRecord telemetry_from_json(const nlohmann::json& j) {
    TelemetryRecord r;
    try {
        r.step = j.at("step").get<std::size_t>();
        r.val_ce = j.at("val_ce").get<double>();
        r.expected_steps = j.at("expected_steps").get<std::vector<double>>();
        r.n_bar = j.at("n_bar").get<double>();
        r.gate_local = detail::from_nullable(j.at("gate_local"), "gate_local");
        r.gate_global = detail::from_nullable(j.at("gate_global"), "gate_global");
        if (j.contains("loop_scales")) {
            r.loop_scales = j.at("loop_scales").get<std::vector<std::vector<double>>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed telemetry record: ") + e.what());
    }
    if (r.gate_local.size() != r.expected_steps.size() || r.gate_global.size() != r.expected_steps.size()) {
        throw ConfigError("telemetry record arrays disagree on the layer count");
    }
    return r;
}

/// Reads every line holding a telemetry record; training-only fields are ignored.
inline std::vector<TelemetryRecord> read_telemetry_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open telemetry log " + path.string());
    }
    std::vector<TelemetryRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            out.push_back(telemetry_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const ConfigError& e) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Transition detection

inline constexpr std::size_t kTransitionWindow = 5;
inline constexpr double kTransitionThreshold = 0.05;
inline constexpr std::size_t kTransitionMinPoints = 10;

struct SeriesPoint {
    std::size_t step = 0;
    double val_ce = 0.0;
    double n_bar = 1.0;
};

struct TransitionPoint {
    std::size_t step = 0;
    double ce = 0.0;
};

/// Centered moving average, window truncated at both ends.
inline std::vector<double> centered_moving_average(std::span<const double> x, std::size_t window) {
    const std::size_t half = window / 2;
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t lo = i >= half ? i - half : 0;
        const std::size_t hi = std::min(x.size(), i + half + 1);
        double acc = 0.0;
        for (std::size_t k = lo; k < hi; ++k) {
            acc += x[k];
        }
        out[i] = acc / static_cast<double>(hi - lo);
    }
    return out;
}

/// First point whose smoothed n_bar exceeds the running minimum of the raw
/// n_bar by 0.05 * (N_max - 1). Series shorter than 10 points yield nothing.
inline std::optional<TransitionPoint> detect_transition(std::span<const SeriesPoint> series, std::size_t max_loops) {
    if (series.size() < kTransitionMinPoints) {
        return std::nullopt;
    }
    std::vector<double> nbar;
    for (const auto& p : series) {
        nbar.push_back(p.n_bar);
    }
    const std::vector<double> smooth = centered_moving_average(nbar, kTransitionWindow);
    const double threshold = kTransitionThreshold * static_cast<double>(max_loops > 0 ? max_loops - 1 : 0);
    double running_min = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < series.size(); ++i) {
        running_min = std::min(running_min, nbar[i]);
        if (smooth[i] > running_min + threshold) {
            return TransitionPoint{series[i].step, series[i].val_ce};
        }
    }
    return std::nullopt;
}

inline std::vector<SeriesPoint> transition_series(std::span<const TelemetryRecord> records) {
    std::vector<SeriesPoint> out;
    for (const auto& r : records) {
        out.push_back({r.step, r.val_ce, r.n_bar});
    }
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.step < b.step; });
    return out;
}

// ---------------------------------------------------------------------------
// CSV export

inline constexpr const char* kTelemetryCsvHeader =
    "step,val_ce,layer,expected_steps,gate_local_mean,gate_global_mean,n_bar";

inline std::string format_g6(double v) {
    if (std::isnan(v)) {
        return "nan";
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

inline std::string telemetry_csv(std::span<const TelemetryRecord> records) {
    std::vector<const TelemetryRecord*> order;
    for (const auto& r : records) {
        order.push_back(&r);
    }
    std::stable_sort(order.begin(), order.end(), [](const auto* a, const auto* b) { return a->step < b->step; });
    std::ostringstream out;
    out << kTelemetryCsvHeader << '\n';
    for (const TelemetryRecord* r : order) {
        for (std::size_t l = 0; l < r->expected_steps.size(); ++l) {
            const double gl = l < r->gate_local.size() ? r->gate_local[l] : std::numeric_limits<double>::quiet_NaN();
            const double gg = l < r->gate_global.size() ? r->gate_global[l] : std::numeric_limits<double>::quiet_NaN();
            out << r->step << ',' << format_g6(r->val_ce) << ',' << l << ',' << format_g6(r->expected_steps[l]) << ','
                << format_g6(gl) << ',' << format_g6(gg) << ',' << format_g6(r->n_bar) << '\n';
        }
    }
    return out.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing: " + std::strerror(errno));
    }
    out << text;
    out.flush();
    if (!out) {
        throw IoError("write to " + path.string() + " failed: " + std::strerror(errno));
    }
}

inline void export_csv(std::span<const TelemetryRecord> records, const std::filesystem::path& path) {
    if (records.empty()) {
        throw Error("export_csv needs at least one record");
    }
    write_text_file(path, telemetry_csv(records));
}

inline std::filesystem::path transition_sidecar_path(const std::filesystem::path& csv) {
    return std::filesystem::path(csv.string() + ".transition.json");
}

/// Writes <csv>.transition.json when a transition exists, removes a stale one otherwise.
inline void write_transition_sidecar(const std::filesystem::path& csv, const std::optional<TransitionPoint>& t) {
    const auto path = transition_sidecar_path(csv);
    if (!t) {
        std::error_code ec;
        std::filesystem::remove(path, ec);
        return;
    }
    write_text_file(path, nlohmann::json{{"step", t->step}, {"ce", t->ce}}.dump() + "\n");
}

}  // namespace loopmem
