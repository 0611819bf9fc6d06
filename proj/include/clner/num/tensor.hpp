#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace clner::num {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {
struct Node;
}

// Nodes visited by backward(), in topological order (inputs before outputs).
std::vector<const detail::Node*> topo_order(const Tensor& root);

/// Receives the gradient of the loss w.r.t. an op's output and pushes
/// contributions into the op's inputs.
using BackwardFn = std::function<void(std::span<const double> out_grad)>;

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    BackwardFn backward;
};

}  // namespace detail

// Dense row-major tensor of 64-bit floats. A Tensor is a shared handle: copies
// alias the same storage and graph node. Operations that involve at least one
// tensor with requires_grad() record a node so that backward() can run over
// the define-by-run graph.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    // Records an op result. When no input requires a gradient (or grad mode is
    // off) the backward function is dropped and the result is a constant.
    static Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                          BackwardFn backward);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const;
    std::size_t dim() const { return shape().size(); }
    std::size_t size() const;
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> values() const;
    // Writes bypass the graph; intended for parameter init and optimizers.
    std::span<double> mutable_values();
    double item() const;
    double at(std::size_t i, std::size_t j) const;

    bool requires_grad() const;
    // Leaves only; toggles whether later ops record this tensor.
    void set_requires_grad(bool flag);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad() const;
    void accumulate_grad(std::span<const double> g) const;
    void zero_grad();
    void clear_grad();

    // Same values, no history. The copy owns fresh storage.
    Tensor detach() const;
    Tensor clone(bool requires_grad) const;

    void backward() const;

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    friend std::vector<const detail::Node*> topo_order(const Tensor& root);
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

}  // namespace clner::num
