#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "loopmem/error.hpp"

namespace loopmem {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) {
            out += "x";
        }
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

struct TensorStorage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;

    /// Gradient buffer, allocated as zeros on first use.
    std::vector<double>& grad_buffer() {
        if (grad.empty()) {
            grad.assign(data.size(), 0.0);
        }
        return grad;
    }
};

/// Dense row-major array of doubles with shared ownership of the storage.
///
/// Copies of a Tensor alias the same storage; use `clone()` for a deep copy.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : impl_(std::make_shared<TensorStorage>()) {
        for (std::size_t d : shape) {
            if (d == 0) {
                throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
            }
        }
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " elements");
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0, requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }

    bool defined() const noexcept { return impl_ != nullptr; }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }

    /// Writable view of the values. Only for leaves outside a live graph
    /// (initialization, optimizer updates, finite-difference probes).
    std::span<double> mutable_data() { return impl_->data; }

    double item() const {
        if (numel() != 1) {
            throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        }
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool value) { impl_->requires_grad = value; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    Tensor clone() const {
        Tensor copy(impl_->shape, impl_->data, impl_->requires_grad);
        copy.impl_->grad = impl_->grad;
        return copy;
    }

    bool all_finite() const {
        for (double v : impl_->data) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    TensorStorage& storage() const { return *impl_; }
    const std::shared_ptr<TensorStorage>& storage_ptr() const { return impl_; }

    bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

private:
    std::shared_ptr<TensorStorage> impl_;
};

}  // namespace loopmem
