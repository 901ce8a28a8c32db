#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nfaseg/error.hpp"

namespace nfaseg {

/// (batch, channels, height, width), row-major layout.
struct Shape {
    long n = 0, c = 0, h = 0, w = 0;

    long numel() const { return n * c * h * w; }
    bool operator==(const Shape& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + ","
             + std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

/// Dense double tensor that doubles as a node of the autodiff graph.
/// Values are written once by the op that creates the tensor; after
/// that only the grad slot mutates.
class Tensor {
public:
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until ensure_grad()

    // Recorded by the creating op when any input requires grad.
    std::vector<TensorPtr> parents;
    std::function<void()> backward_fn;

    static TensorPtr create(Shape s, double fill = 0.0, bool requires_grad = false) {
        if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
            throw_parameter("tensor shape must be non-negative, got " + s.str());
        auto t = std::make_shared<Tensor>();
        t->shape = s;
        t->data.assign(static_cast<std::size_t>(s.numel()), fill);
        t->requires_grad = requires_grad;
        if (requires_grad) t->ensure_grad();
        return t;
    }

    static TensorPtr from(Shape s, std::vector<double> values, bool requires_grad = false) {
        if (static_cast<long>(values.size()) != s.numel())
            throw_parameter("tensor data length " + std::to_string(values.size())
                            + " does not match shape " + s.str());
        auto t = create(s, 0.0, requires_grad);
        t->data = std::move(values);
        return t;
    }

    static TensorPtr scalar(double v, bool requires_grad = false) {
        auto t = create({1, 1, 1, 1}, v, requires_grad);
        return t;
    }

    long numel() const { return shape.numel(); }
    bool is_scalar() const { return numel() == 1; }
    bool is_leaf() const { return !backward_fn; }

    std::size_t index(long n0, long c0, long y, long x) const {
        return static_cast<std::size_t>(((n0 * shape.c + c0) * shape.h + y) * shape.w + x);
    }
    double& at(long n0, long c0, long y, long x) { return data[index(n0, c0, y, x)]; }
    double at(long n0, long c0, long y, long x) const { return data[index(n0, c0, y, x)]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() {
        std::fill(grad.begin(), grad.end(), 0.0);
    }

    /// Value copy severed from the graph.
    TensorPtr detach() const {
        auto t = std::make_shared<Tensor>();
        t->shape = shape;
        t->data = data;
        return t;
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

/// Operations reachable from a root, in topological order (every
/// tensor appears after the tensors it consumes).
class Tape {
public:
    static Tape from(const TensorPtr& root) {
        Tape tape;
        std::unordered_set<const Tensor*> seen;
        // iterative post-order; second visit emits the node
        std::vector<std::pair<TensorPtr, bool>> stack;
        stack.emplace_back(root, false);
        while (!stack.empty()) {
            auto [node, expanded] = stack.back();
            stack.pop_back();
            if (expanded) {
                tape.order_.push_back(node);
                continue;
            }
            if (!seen.insert(node.get()).second) continue;
            stack.emplace_back(node, true);
            for (const auto& p : node->parents) stack.emplace_back(p, false);
        }
        return tape;
    }

    const std::vector<TensorPtr>& order() const { return order_; }

    /// Reverse sweep from the root. Non-leaf grads are transient and
    /// reset per call; leaf grads accumulate across calls.
    void backward() {
        if (order_.empty()) return;
        for (const auto& t : order_) {
            if (!t->is_leaf()) {
                t->ensure_grad();
                t->zero_grad();
            } else if (t->requires_grad) {
                t->ensure_grad();
            }
        }
        TensorPtr root = order_.back();
        std::fill(root->grad.begin(), root->grad.end(), 1.0);
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            if ((*it)->backward_fn) (*it)->backward_fn();
        }
    }

private:
    std::vector<TensorPtr> order_;
};

/// Populates d(loss)/d(param) for every parameter reachable from loss.
inline void backward(const TensorPtr& loss) {
    if (!loss) throw_parameter("backward: null loss");
    if (!loss->is_scalar())
        throw_parameter("backward requires a scalar loss, got shape " + loss->shape.str());
    Tape::from(loss).backward();
}

}  // namespace nfaseg
