#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "jar/rng.hpp"

namespace jar {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the autodiff graph. Inputs and the backward closure are only
// retained when some input requires a gradient.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

// Row-major float64 array with reverse-mode autodiff. Copies share the
// underlying node; use `detach()` for an independent value.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim() const { return node_->shape.size(); }
    std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    // Writable storage; meant for leaves (parameter init, optimizer steps).
    std::span<double> mutable_data() { return node_->data; }
    double item() const;
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool value) { node_->requires_grad = value; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.clear(); }

    const char* op() const { return node_->op; }
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    // Reverse-mode sweep from this scalar; gradients accumulate into every
    // reachable node that requires one.
    void backward() const;

    Tensor detach() const;

    // Used by op implementations.
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

namespace debug {
// Test hook: scales the incoming gradient of every node produced by `op` by
// 1.5 during backward. Empty string disables it.
void corrupt_backward(const std::string& op);
const std::string& corrupted_backward_op();
}  // namespace debug

}  // namespace jar
