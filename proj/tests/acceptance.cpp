// Acceptance gate: one line per primary criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "loopmem/loopmem.hpp"

using namespace loopmem;

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
};

std::string fmt(const char* format, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, format, v);
    return buf;
}

ModelConfig tiny() { return model_preset("tiny/mem-3"); }

Outcome from_suite(const SuiteResult& r) { return {r.passed, r.detail}; }

Outcome gradient_correctness() {
    SuiteResult r = gradient_suite(tiny(), 0);
    const bool fast = r.seconds < 300.0;
    return {r.passed && fast, "max rel error " + fmt("%.3e", r.metric) + " (< 1e-4), " + r.detail + ", " +
                                  fmt("%.1f", r.seconds) + "s (< 300s)"};
}

Outcome halting_normalization() { return from_suite(halting_suite(tiny(), 0, 1000)); }

Outcome near_identity() {
    SuiteResult r = near_identity_suite(tiny(), 0, 32, 16);
    return {r.passed, r.detail};
}

Outcome reduction_oracle() {
    SuiteResult r = reduction_suite(tiny(), 0, 10, 16);
    return {r.passed && r.metric < 1e-10, r.detail};
}

Outcome permutation_invariance() { return from_suite(permutation_suite(tiny(), 0, 16)); }

Outcome flop_match() {
    const ModelConfig loop3 = model_preset("paper/loop3");
    ModelConfig plain = loop3;
    plain.loops_enabled = false;
    plain.layers = 36;
    const std::size_t t = loop3.max_seq_len;
    const FlopBreakdown a = flop_estimate(loop3, t);
    const FlopBreakdown b = flop_estimate(plain, t);
    const double rel = std::abs(a.total / b.total - 1.0);
    const bool exact = a.block_applications == b.block_applications;
    return {exact && rel < 0.02 && matching_plain_depth(loop3, t) == 36,
            "block applications " + fmt("%.0f", a.block_applications) + " vs " + fmt("%.0f", b.block_applications) +
                ", total ratio off by " + fmt("%.4f", rel) + " (< 0.02)"};
}

Outcome bpb_formula() {
    const double e1 = std::abs(bpb(std::log(2.0), 12, 12) - 1.0);
    const double e2 = std::abs(bpb(std::log(2.0), 10, 20) - 0.5);
    const double e3 = std::abs(bpb(0.0, 5, 9));
    ModelConfig cfg = tiny();
    ModelParams params = ModelParams::init(cfg, 0);
    for (double& v : params.unembed.mutable_data()) {
        v = 0.0;
    }
    std::vector<EvalItem> items{{"Q: name a colour. A: ", "vermilio", "commonsense"}};
    const double uniform = eval_bpb(params, cfg, items).domains.at("commonsense").mean_bpb;
    const double target = std::log2(257.0);
    const bool ok = std::max({e1, e2, e3}) <= 1e-12 && std::abs(uniform - target) <= 0.01;
    return {ok, "examples max error " + fmt("%.1e", std::max({e1, e2, e3})) + " (<= 1e-12), uniform model " +
                    fmt("%.6f", uniform) + " vs log2(257) = " + fmt("%.6f", target)};
}

std::shared_ptr<const std::vector<TokenId>> pangram_corpus(std::size_t tokens) {
    std::vector<TokenId> t =
        tokenize_bytes("The quick brown fox jumps over the lazy dog; pack my box with five dozen liquor jugs!");
    t.resize(tokens);
    return std::make_shared<const std::vector<TokenId>>(std::move(t));
}

TrainConfig desk_train(std::size_t steps, std::uint64_t seed) {
    TrainConfig tc;
    tc.total_steps = steps;
    tc.batch_size = 2;
    tc.seq_len = 16;
    tc.seed = seed;
    return tc;
}

Outcome memorization() {
    // B*T*2 + 1 tokens: exactly two batches per epoch.
    const auto start = std::chrono::steady_clock::now();
    Trainer trainer = Trainer::fresh(tiny(), desk_train(300, 0), pangram_corpus(2 * 2 * 16 + 1));
    double best = INFINITY;
    std::size_t hit = 0;
    while (!trainer.done()) {
        StepMetrics m = trainer.step();
        best = std::min(best, m.ce);
        if (hit == 0 && m.ce < 0.05) {
            hit = m.step;
        }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {hit != 0 && secs < 120.0, "CE < 0.05 first at step " + std::to_string(hit) + ", min CE " +
                                          fmt("%.2e", best) + ", " + fmt("%.1f", secs) + "s (< 120s)"};
}

double final_nbar(double lambda, std::uint64_t seed) {
    ModelConfig cfg = tiny();
    cfg.ponder_weight = lambda;
    Trainer trainer = Trainer::fresh(cfg, desk_train(500, seed), pangram_corpus(2 * 2 * 16 + 1));
    StepMetrics m;
    while (!trainer.done()) {
        m = trainer.step();
    }
    return m.n_bar;
}

double median3(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[1];
}

Outcome ponder_direction() {
    std::vector<double> free, penalized;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        free.push_back(final_nbar(0.0, seed));
        penalized.push_back(final_nbar(0.5, seed));
    }
    const double a = median3(free);
    const double b = median3(penalized);
    return {b < a, "median final n_bar " + fmt("%.4f", b) + " with lambda 0.5 vs " + fmt("%.4f", a) + " without"};
}

Outcome determinism_and_resume() {
    const ModelConfig cfg = tiny();
    const TrainConfig tc = desk_train(40, 11);
    auto corpus = pangram_corpus(86);
    Trainer a = Trainer::fresh(cfg, tc, corpus);
    Trainer b = Trainer::fresh(cfg, tc, corpus);
    bool same = true;
    std::vector<double> straight;
    for (int i = 0; i < 20; ++i) {
        const double la = a.step().loss;
        same = same && la == b.step().loss;
        straight.push_back(la);
    }
    Trainer c = Trainer::fresh(cfg, tc, corpus);
    for (int i = 0; i < 10; ++i) {
        c.step();
    }
    std::random_device rd;
    const auto path = std::filesystem::temp_directory_path() / ("loopmem-accept-" + std::to_string(rd()) + ".bin");
    save_checkpoint(path, cfg, c.params(), c.state());
    Checkpoint ck = load_checkpoint(path);
    std::filesystem::remove(path);
    Trainer resumed(ck.model, tc, corpus, std::move(ck.params), std::move(ck.state));
    bool resume_ok = true;
    for (int i = 10; i < 20; ++i) {
        resume_ok = resume_ok && resumed.step().loss == straight[static_cast<std::size_t>(i)];
    }
    const auto pa = a.params().named_tensors();
    const auto pr = resumed.params().named_tensors();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        resume_ok = resume_ok && std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(),
                                            pr[i].tensor.data().begin());
    }
    return {same && resume_ok, std::string("20-step losses ") + (same ? "bit-identical" : "DIFFER") +
                                   ", resume at step 10 " + (resume_ok ? "bit-exact" : "DIVERGES") +
                                   " through step 20"};
}

Outcome transition_detector() {
    std::vector<SeriesPoint> ramp, flat;
    for (std::size_t i = 0; i < 70; ++i) {
        const double n = i < 50 ? 1.5 : std::min(2.5, 1.5 + 0.1 * static_cast<double>(i - 50));
        ramp.push_back({i, 4.0 - 0.01 * static_cast<double>(i), n});
        flat.push_back({i, 4.0 - 0.01 * static_cast<double>(i), 1.5});
    }
    auto hit = detect_transition(ramp, 3);
    auto none = detect_transition(flat, 3);
    const bool ok = hit && std::abs(static_cast<long>(hit->step) - 50) <= 2 && !none;
    return {ok, "ramp onset 50 detected at " + (hit ? std::to_string(hit->step) : std::string("none")) +
                    ", constant series " + (none ? "DETECTED" : "none")};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient correctness", gradient_correctness},
        {"halting normalization", halting_normalization},
        {"near-identity init", near_identity},
        {"reduction oracle", reduction_oracle},
        {"memory permutation invariance", permutation_invariance},
        {"FLOP match", flop_match},
        {"BPB formula", bpb_formula},
        {"memorization", memorization},
        {"ponder-penalty direction", ponder_direction},
        {"determinism and resume", determinism_and_resume},
        {"transition detector", transition_detector},
    };
    int failures = 0;
    for (const auto& [name, fn] : criteria) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failures += o.passed ? 0 : 1;
        std::cout << (o.passed ? "[PASS] " : "[FAIL] ") << name << ": " << o.detail << std::endl;
    }
    std::cout << (criteria.size() - static_cast<std::size_t>(failures)) << "/" << criteria.size()
              << " acceptance criteria passed" << std::endl;
    return failures == 0 ? 0 : 1;
}
