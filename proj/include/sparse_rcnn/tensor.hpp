#pragma once

// Dense float64 tensor with a dynamic reverse-mode tape.
//
// A Tensor is a shared handle: copies alias the same storage and autodiff
// node. Every op records its inputs and a backward rule; Graph::from_root
// orders the reachable records topologically and Tensor::backward replays
// them in reverse, accumulating into each input's gradient buffer.

#include <sparse_rcnn/errors.hpp>

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace sparse_rcnn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this->grad and accumulates into inputs[i]->grad.
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
    bool input_needs_grad(std::size_t i) const { return inputs[i]->requires_grad; }
    std::vector<double>& input_grad(std::size_t i) {
        inputs[i]->ensure_grad();
        return inputs[i]->grad;
    }
    const std::vector<double>& input_data(std::size_t i) const { return inputs[i]->data; }
    // inputs[i].grad += src (copied when the buffer is still empty).
    void accumulate_grad(std::size_t i, const double* src) {
        auto& in = *inputs[i];
        if (in.grad.size() != in.data.size()) {
            in.grad.assign(src, src + in.data.size());
            return;
        }
        double* g = in.grad.data();
        for (std::size_t k = 0, n = in.grad.size(); k < n; ++k) g[k] += src[k];
    }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        node_->data.assign(sparse_rcnn::numel(shape), fill);
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (sparse_rcnn::numel(shape) != data.size()) {
            throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                                 std::to_string(sparse_rcnn::numel(shape)) + " values, got " +
                                 std::to_string(data.size()));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    // Direct writes bypass the tape; meant for leaves (optimizer, init, FD probes).
    std::span<double> mutable_data() { return node_->data; }
    double item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }
    double operator[](std::size_t i) const { return node_->data[i]; }
    double at(std::size_t i, std::size_t j) const { return node_->data[i * node_->shape.back() + j]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }
    bool is_leaf() const { return node_->inputs.empty(); }
    const char* op_name() const { return node_->op; }

    bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    // Deep copy of the values, detached from any graph.
    Tensor clone() const { return Tensor(shape(), node_->data, false); }

    void backward() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

using NamedTensor = std::pair<std::string, Tensor>;

// Builds an op result. The backward rule is only retained when recording is
// enabled and at least one input participates in differentiation.
inline Tensor make_op(Shape shape, std::vector<double> data, const char* op,
                      std::initializer_list<Tensor> inputs, std::function<void(detail::Node&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any && grad_enabled()) {
        auto& n = *out.node();
        n.requires_grad = true;
        n.op = op;
        n.inputs.reserve(inputs.size());
        for (const auto& t : inputs) n.inputs.push_back(t.node());
        n.backward = std::move(backward);
    }
    return out;
}

inline Tensor make_op(Shape shape, std::vector<double> data, const char* op, const std::vector<Tensor>& inputs,
                      std::function<void(detail::Node&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any && grad_enabled()) {
        auto& n = *out.node();
        n.requires_grad = true;
        n.op = op;
        n.inputs.reserve(inputs.size());
        for (const auto& t : inputs) n.inputs.push_back(t.node());
        n.backward = std::move(backward);
    }
    return out;
}

// Records reachable from a root, in topological order (inputs first).
class Graph {
public:
    static Graph from_root(const Tensor& root) {
        Graph g;
        if (!root.requires_grad()) return g;
        std::unordered_set<const detail::Node*> seen;
        // Iterative post-order DFS.
        std::vector<std::pair<detail::Node*, std::size_t>> stack;
        stack.emplace_back(root.node().get(), 0);
        seen.insert(root.node().get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->inputs.size()) {
                detail::Node* child = node->inputs[next++].get();
                if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
            } else {
                g.order_.push_back(node);
                stack.pop_back();
            }
        }
        return g;
    }

    std::span<detail::Node* const> records() const { return order_; }
    std::size_t size() const { return order_.size(); }

    // Seeds the root (last record) with `seed` and runs every backward rule once.
    void run_backward(double seed = 1.0) const {
        if (order_.empty()) return;
        detail::Node* root = order_.back();
        root->ensure_grad();
        for (auto& g : root->grad) g += seed;
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            detail::Node* n = *it;
            if (n->backward && !n->grad.empty()) n->backward(*n);
        }
    }

private:
    std::vector<detail::Node*> order_;
};

inline void Tensor::backward() const {
    if (numel() != 1) throw ContractError("backward() requires a scalar, got " + shape_str(shape()));
    Graph::from_root(*this).run_backward();
}

inline void check_shape(const Tensor& t, const Shape& expected, const char* what) {
    if (t.shape() != expected) {
        throw DimensionError(std::string(what) + ": expected shape " + shape_str(expected) + ", got " +
                             shape_str(t.shape()));
    }
}

}  // namespace sparse_rcnn
