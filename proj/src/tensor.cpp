#include "jar/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "jar/errors.hpp"

namespace jar {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

namespace {

void check_shape(const Shape& shape) {
    for (auto extent : shape) {
        if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
}

std::string& corrupted_op() {
    static std::string op;
    return op;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_shape(shape);
    auto node = std::make_shared<detail::Node>();
    node->data.assign(shape_numel(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    check_shape(shape);
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("shape " + shape_str(shape) + " does not hold " + std::to_string(data.size()) +
                             " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_data({1}, {value}, requires_grad); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    check_shape(shape);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = rng.normal(0.0, stddev);
    return from_data(std::move(shape), std::move(values), requires_grad);
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
    if (dim() != 2) throw DimensionError("at(row, col) needs a 2-d tensor, got " + shape_str(shape()));
    return node_->data.at(row * node_->shape[1] + col);
}

Tensor Tensor::detach() const {
    auto node = std::make_shared<detail::Node>();
    node->shape = node_->shape;
    node->data = node_->data;
    return Tensor(std::move(node));
}

void Tensor::backward() const {
    if (numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
    }
    // Iterative post-order DFS; reversed it is a topological order.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    node_->ensure_grad()[0] += 1.0;
    const std::string& corrupted = corrupted_op();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node& node = **it;
        if (!node.backward || node.grad.empty()) continue;
        if (!corrupted.empty() && corrupted == node.op) {
            for (auto& g : node.grad) g *= 1.5;
        }
        node.backward(node);
    }
}

namespace debug {
void corrupt_backward(const std::string& op) { corrupted_op() = op; }
const std::string& corrupted_backward_op() { return corrupted_op(); }
}  // namespace debug

}  // namespace jar
