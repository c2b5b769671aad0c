#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <unordered_map>
#include <vector>

#include "loopmem/error.hpp"
#include "loopmem/tensor.hpp"

namespace loopmem {

/// Define-by-run tape. Ops append one node per differentiable result in creation
/// order; `backward` replays the tape in reverse exactly once.
///
/// A graph in inference mode records nothing, so results never require grad.
class Graph {
public:
    enum class Mode { record, inference };

    struct Node {
        std::string op;
        std::vector<std::ptrdiff_t> inputs;  // producing node ids, -1 for leaves
        Tensor output;
        std::function<void()> backward;
    };

    explicit Graph(Mode mode = Mode::record) : mode_(mode) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const noexcept { return mode_ == Mode::record; }

    bool needs_grad(std::initializer_list<const Tensor*> inputs) const {
        if (!recording()) {
            return false;
        }
        for (const Tensor* t : inputs) {
            if (t != nullptr && t->defined() && t->requires_grad()) {
                return true;
            }
        }
        return false;
    }

    void record(std::string op, std::initializer_list<const Tensor*> inputs, const Tensor& output,
                std::function<void()> backward_fn) {
        if (backward_done_) {
            throw StateError("cannot record op '" + op + "' after backward; reset the graph first");
        }
        Node node;
        node.op = std::move(op);
        for (const Tensor* t : inputs) {
            if (t == nullptr || !t->defined()) {
                continue;
            }
            auto it = producer_.find(&t->storage());
            node.inputs.push_back(it == producer_.end() ? -1 : static_cast<std::ptrdiff_t>(it->second));
        }
        node.output = output;
        node.backward = std::move(backward_fn);
        producer_[&output.storage()] = nodes_.size();
        nodes_.push_back(std::move(node));
    }

    /// Seeds d(loss)/d(loss) = 1 and propagates to every tensor that requires grad.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1) {
            throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
        }
        if (backward_done_) {
            throw StateError("backward already ran on this graph; call reset() before reuse");
        }
        if (!loss.requires_grad()) {
            throw StateError("loss does not depend on any tensor that requires grad");
        }
        backward_done_ = true;
        loss.storage().grad_buffer()[0] += 1.0;
        visit_order_.clear();
        visit_order_.reserve(nodes_.size());
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& node = nodes_[i];
            visit_order_.push_back(i);
            if (node.output.has_grad()) {
                node.backward();
            }
        }
    }

    void reset() {
        nodes_.clear();
        producer_.clear();
        visit_order_.clear();
        backward_done_ = false;
    }

    const std::vector<Node>& nodes() const noexcept { return nodes_; }
    const std::vector<std::size_t>& visit_order() const noexcept { return visit_order_; }

private:
    Mode mode_;
    bool backward_done_ = false;
    std::vector<Node> nodes_;
    std::unordered_map<const TensorStorage*, std::size_t> producer_;
    std::vector<std::size_t> visit_order_;
};

}  // namespace loopmem
