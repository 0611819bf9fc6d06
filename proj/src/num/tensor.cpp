#include "clner/num/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace clner::num {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> v(shape_size(shape), value);
    return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_size(shape) != values.size()) {
        throw std::invalid_argument("tensor shape " + shape_str(shape) + " does not match " +
                                    std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor Tensor::make_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                       BackwardFn backward) {
    Tensor out = from(std::move(shape), std::move(values));
    if (!g_grad_enabled) return out;
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->backward = std::move(backward);
    out.node_->inputs.reserve(inputs.size());
    for (auto& in : inputs) {
        if (in.requires_grad()) out.node_->inputs.push_back(in.node_);
    }
    return out;
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }

std::size_t Tensor::rows() const {
    if (dim() != 2) throw std::invalid_argument("rows() on non-matrix of shape " + shape_str(shape()));
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    if (dim() != 2) throw std::invalid_argument("cols() on non-matrix of shape " + shape_str(shape()));
    return node_->shape[1];
}

std::span<const double> Tensor::values() const { return node_->value; }
std::span<double> Tensor::mutable_values() { return node_->value; }

double Tensor::item() const {
    if (size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

double Tensor::at(std::size_t i, std::size_t j) const { return node_->value[i * cols() + j]; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) {
    if (node_->backward) throw std::logic_error("set_requires_grad() on a non-leaf tensor");
    node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::mutable_grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
    return node_->grad;
}

void Tensor::accumulate_grad(std::span<const double> g) const {
    if (!requires_grad()) return;
    if (g.size() != size()) {
        throw std::invalid_argument("gradient of size " + std::to_string(g.size()) +
                                    " for tensor of shape " + shape_str(shape()));
    }
    auto dst = mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::clear_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return from(node_->shape, node_->value, false); }
Tensor Tensor::clone(bool requires_grad) const { return from(node_->shape, node_->value, requires_grad); }

std::vector<const detail::Node*> topo_order(const Tensor& root) {
    std::vector<const detail::Node*> order;
    if (!root.requires_grad()) return order;
    // Iterative post-order DFS; graphs from long sentences get deep.
    std::unordered_set<const detail::Node*> seen;
    struct Frame {
        const detail::Node* node;
        std::size_t next;
    };
    std::vector<Frame> stack;
    const detail::Node* start = root.node_.get();
    stack.push_back({start, 0});
    seen.insert(start);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->inputs.size()) {
            const detail::Node* child = f.node->inputs[f.next++].get();
            if (seen.insert(child).second) stack.push_back({child, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
    return order;
}

void Tensor::backward() const {
    if (!node_) throw std::invalid_argument("backward() on undefined tensor");
    if (size() != 1) throw std::invalid_argument("backward() needs a scalar loss, got shape " + shape_str(shape()));
    if (!requires_grad()) throw std::invalid_argument("backward() on a loss that does not depend on any parameter");
    auto order = topo_order(*this);
    node_->grad.assign(1, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto* node = const_cast<detail::Node*>(*it);
        if (!node->backward || node->grad.empty()) continue;
        node->backward(node->grad);
    }
    // Interior nodes drop their gradients; leaves keep them for the optimizer.
    for (const detail::Node* cn : order) {
        auto* node = const_cast<detail::Node*>(cn);
        if (node->backward) {
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }
}

}  // namespace clner::num
