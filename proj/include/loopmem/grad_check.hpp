#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "loopmem/graph.hpp"
#include "loopmem/rng.hpp"
#include "loopmem/tensor.hpp"

namespace loopmem {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct GradCheckOptions {
    double eps = 1e-5;  // central-difference step
    double tol = 1e-4;  // max relative error
    // Denominator floor of the relative error, in gradient units. A loss near 5
    // is quantized at ~1e-15, so central differences at eps = 1e-5 carry about
    // 1e-10 of absolute noise; below this floor the comparison is absolute.
    double abs_floor = 1e-5;
    std::size_t max_elements = 24;  // per tensor; larger tensors are subsampled
    std::uint64_t seed = 0;
};

struct TensorGradCheck {
    std::string name;
    std::size_t checked = 0;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    bool passed = true;
};

struct GradCheckReport {
    std::vector<TensorGradCheck> tensors;
    double max_rel_error = 0.0;
    bool passed = true;
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor)
inline double relative_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Deterministic element subsample: every element when the tensor is small,
/// otherwise a seeded draw without replacement.
inline std::vector<std::size_t> grad_check_indices(std::size_t numel, std::size_t max_elements, std::uint64_t seed) {
    std::vector<std::size_t> idx(numel);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (numel <= max_elements) {
        return idx;
    }
    Rng rng(seed);
    for (std::size_t i = 0; i < max_elements; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(numel - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(max_elements);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Compares reverse-mode gradients of `loss_fn` against central differences.
///
/// `loss_fn(Graph&)` must build a scalar loss from the current values of `params`.
/// It is evaluated once with a recording graph for the analytic gradients, then
/// repeatedly in inference mode while single elements are perturbed in place.
template <class LossFn>
GradCheckReport grad_check(LossFn&& loss_fn, std::span<const NamedTensor> params, const GradCheckOptions& opt = {}) {
    for (const NamedTensor& p : params) {
        Tensor t = p.tensor;
        t.zero_grad();
        t.set_requires_grad(true);
    }
    Graph graph;
    Tensor loss = loss_fn(graph);
    const double base = loss.item();
    graph.backward(loss);

    auto evaluate = [&loss_fn] {
        Graph probe(Graph::Mode::inference);
        return loss_fn(probe).item();
    };
    const double again = evaluate();
    if (again != base || evaluate() != again) {
        throw StateError("grad_check: loss function is not deterministic");
    }

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor t = params[pi].tensor;
        TensorGradCheck entry;
        entry.name = params[pi].name;
        std::vector<double> analytic(t.numel(), 0.0);
        if (t.has_grad()) {
            std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        }
        auto values = t.mutable_data();
        std::vector<std::size_t> indices = grad_check_indices(t.numel(), opt.max_elements, mix_seed(opt.seed, pi));
        // The largest analytic entry is always probed, whatever the subsample drew.
        const auto largest = static_cast<std::size_t>(
            std::max_element(analytic.begin(), analytic.end(),
                             [](double a, double b) { return std::abs(a) < std::abs(b); }) -
            analytic.begin());
        if (std::find(indices.begin(), indices.end(), largest) == indices.end()) {
            indices.push_back(largest);
        }
        for (std::size_t i : indices) {
            const double saved = values[i];
            values[i] = saved + opt.eps;
            const double up = evaluate();
            values[i] = saved - opt.eps;
            const double down = evaluate();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * opt.eps);
            entry.max_abs_error = std::max(entry.max_abs_error, std::abs(numeric - analytic[i]));
            entry.max_rel_error = std::max(entry.max_rel_error, relative_error(analytic[i], numeric, opt.abs_floor));
            ++entry.checked;
        }
        entry.passed = entry.max_rel_error < opt.tol;
        report.passed = report.passed && entry.passed;
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        report.tensors.push_back(std::move(entry));
    }
    return report;
}

}  // namespace loopmem
