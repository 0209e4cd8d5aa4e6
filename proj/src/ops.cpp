#include "jar/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <numbers>

#include "jar/errors.hpp"
#include "jar/flops.hpp"

namespace jar {

namespace {

using detail::Node;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

using BackwardFn = std::function<void(Node&)>;

Tensor make_result(const char* op, Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                   BackwardFn backward, std::uint64_t flops, std::uint64_t values) {
    detail::record_op(op, flops, values);
    auto node = std::make_shared<Node>();
    node->op = op;
    node->shape = std::move(shape);
    node->data = std::move(data);
    for (const Tensor* in : inputs) {
        if (in->requires_grad()) node->requires_grad = true;
    }
    if (node->requires_grad) {
        for (const Tensor* in : inputs) node->inputs.push_back(in->node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

Tensor make_result_n(const char* op, Shape shape, std::vector<double> data, std::span<const Tensor> inputs,
                     BackwardFn backward, std::uint64_t flops, std::uint64_t values) {
    detail::record_op(op, flops, values);
    auto node = std::make_shared<Node>();
    node->op = op;
    node->shape = std::move(shape);
    node->data = std::move(data);
    for (const Tensor& in : inputs) {
        if (in.requires_grad()) node->requires_grad = true;
    }
    if (node->requires_grad) {
        for (const Tensor& in : inputs) node->inputs.push_back(in.node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

void require_2d(const char* op, const Tensor& t) {
    if (t.dim() != 2) throw DimensionError(std::string(op) + ": expected a 2-d tensor, got " + shape_str(t.shape()));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

std::size_t last_extent(const Tensor& t) { return t.shape().back(); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d("matmul", a);
    require_2d("matmul", b);
    const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
    if (b.size(0) != k) {
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    }
    std::vector<double> out(m * n);
    MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
    auto backward = [m, k, n](Node& self) {
        ConstMap grad_out(self.grad.data(), m, n);
        Node& lhs = *self.inputs[0];
        Node& rhs = *self.inputs[1];
        if (lhs.requires_grad) {
            MutMap(lhs.ensure_grad().data(), m, k).noalias() += grad_out * ConstMap(rhs.data.data(), k, n).transpose();
        }
        if (rhs.requires_grad) {
            MutMap(rhs.ensure_grad().data(), k, n).noalias() += ConstMap(lhs.data.data(), m, k).transpose() * grad_out;
        }
    };
    return make_result("matmul", {m, n}, std::move(out), {&a, &b}, backward, flop_cost::kMultiplyAdd * m * n * k,
                       m * n);
}

Tensor transpose(const Tensor& a) {
    require_2d("transpose", a);
    const std::size_t r = a.size(0), c = a.size(1);
    std::vector<double> out(r * c);
    MutMap(out.data(), c, r) = ConstMap(a.data().data(), r, c).transpose();
    auto backward = [r, c](Node& self) {
        Node& in = *self.inputs[0];
        MutMap(in.ensure_grad().data(), r, c) += ConstMap(self.grad.data(), c, r).transpose();
    };
    return make_result("transpose", {c, r}, std::move(out), {&a}, backward, 0, 0);
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    auto backward = [](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
    return make_result("reshape", std::move(shape), std::move(out), {&a}, backward, 0, 0);
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] + b.data()[i];
    auto backward = [](Node& self) {
        for (auto& input : self.inputs) {
            if (!input->requires_grad) continue;
            auto& g = input->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    };
    return make_result("add", a.shape(), std::move(out), {&a, &b}, backward, flop_cost::kElementwise * n, n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
    auto backward = [](Node& self) {
        Node& lhs = *self.inputs[0];
        Node& rhs = *self.inputs[1];
        if (lhs.requires_grad) {
            auto& g = lhs.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * rhs.data[i];
        }
        if (rhs.requires_grad) {
            auto& g = rhs.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * lhs.data[i];
        }
    };
    return make_result("mul", a.shape(), std::move(out), {&a, &b}, backward, flop_cost::kElementwise * n, n);
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
    const std::size_t width = last_extent(a);
    if (bias.numel() != width) {
        throw DimensionError("add_row: bias " + shape_str(bias.shape()) + " does not match last axis of " +
                             shape_str(a.shape()));
    }
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] + bias.data()[i % width];
    auto backward = [width](Node& self) {
        Node& in = *self.inputs[0];
        Node& b = *self.inputs[1];
        if (in.requires_grad) {
            auto& g = in.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (b.requires_grad) {
            auto& g = b.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % width] += self.grad[i];
        }
    };
    return make_result("add_row", a.shape(), std::move(out), {&a, &bias}, backward, flop_cost::kElementwise * n, n);
}

Tensor scale(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw DimensionError("scale: factor must hold one value, got " + shape_str(s.shape()));
    const std::size_t n = a.numel();
    const double factor = s.data()[0];
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * factor;
    auto backward = [](Node& self) {
        Node& in = *self.inputs[0];
        Node& s = *self.inputs[1];
        const double factor = s.data[0];
        if (in.requires_grad) {
            auto& g = in.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
        }
        if (s.requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * in.data[i];
            s.ensure_grad()[0] += acc;
        }
    };
    return make_result("scale", a.shape(), std::move(out), {&a, &s}, backward, flop_cost::kElementwise * n, n);
}

Tensor scale(const Tensor& a, double factor) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * factor;
    auto backward = [factor](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    };
    return make_result("scale", a.shape(), std::move(out), {&a}, backward, flop_cost::kElementwise * n, n);
}

Tensor tanh(const Tensor& a) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(a.data()[i]);
    auto backward = [](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (1.0 - self.data[i] * self.data[i]);
    };
    return make_result("tanh", a.shape(), std::move(out), {&a}, backward, flop_cost::kTanh * n, n);
}

Tensor gelu(const Tensor& a) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = a.data()[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    }
    auto backward = [](Node& self) {
        Node& in = *self.inputs[0];
        auto& g = in.ensure_grad();
        const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = in.data[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
            g[i] += self.grad[i] * (cdf + x * pdf);
        }
    };
    return make_result("gelu", a.shape(), std::move(out), {&a}, backward, flop_cost::kGelu * n, n);
}

Tensor softmax_rows(const Tensor& x) {
    const std::size_t width = last_extent(x);
    const std::size_t rows = x.numel() / width;
    std::vector<double> out(x.numel());
    const auto in = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.data() + r * width;
        double* dst = out.data() + r * width;
        double peak = row[0];
        for (std::size_t j = 0; j < width; ++j) {
            if (!std::isfinite(row[j])) throw ContractError("softmax_rows: non-finite input in row " + std::to_string(r));
            peak = std::max(peak, row[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
            dst[j] = std::exp(row[j] - peak);
            total += dst[j];
        }
        for (std::size_t j = 0; j < width; ++j) dst[j] /= total;
    }
    auto backward = [rows, width](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.data.data() + r * width;
            const double* dy = self.grad.data() + r * width;
            double dot = 0.0;
            for (std::size_t j = 0; j < width; ++j) dot += y[j] * dy[j];
            for (std::size_t j = 0; j < width; ++j) g[r * width + j] += y[j] * (dy[j] - dot);
        }
    };
    return make_result("softmax", x.shape(), std::move(out), {&x}, backward, flop_cost::kSoftmax * x.numel(),
                       x.numel());
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    const std::size_t width = last_extent(x);
    if (gain.numel() != width || bias.numel() != width) {
        throw DimensionError("layer_norm: affine params " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                             " do not match last axis of " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / width;
    std::vector<double> out(x.numel());
    std::vector<double> normalized(x.numel());
    std::vector<double> inv_std(rows);
    const auto in = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.data() + r * width;
        double mean = 0.0;
        for (std::size_t j = 0; j < width; ++j) mean += row[j];
        mean /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t j = 0; j < width; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(width);
        inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
        for (std::size_t j = 0; j < width; ++j) {
            const double xhat = (row[j] - mean) * inv_std[r];
            normalized[r * width + j] = xhat;
            out[r * width + j] = gain.data()[j] * xhat + bias.data()[j];
        }
    }
    auto backward = [rows, width, normalized = std::move(normalized), inv_std = std::move(inv_std)](Node& self) {
        Node& in = *self.inputs[0];
        Node& gain = *self.inputs[1];
        Node& bias = *self.inputs[2];
        if (gain.requires_grad) {
            auto& g = gain.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % width] += self.grad[i] * normalized[i];
        }
        if (bias.requires_grad) {
            auto& g = bias.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % width] += self.grad[i];
        }
        if (!in.requires_grad) return;
        auto& g = in.ensure_grad();
        const double inv_width = 1.0 / static_cast<double>(width);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xhat = normalized.data() + r * width;
            const double* dy = self.grad.data() + r * width;
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < width; ++j) {
                const double d = dy[j] * gain.data[j];
                mean_d += d;
                mean_dx += d * xhat[j];
            }
            mean_d *= inv_width;
            mean_dx *= inv_width;
            for (std::size_t j = 0; j < width; ++j) {
                const double d = dy[j] * gain.data[j];
                g[r * width + j] += inv_std[r] * (d - mean_d - xhat[j] * mean_dx);
            }
        }
    };
    return make_result("layer_norm", x.shape(), std::move(out), {&x, &gain, &bias}, backward,
                       flop_cost::kLayerNorm * x.numel(), x.numel());
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    require_2d("slice_cols", a);
    const std::size_t rows = a.size(0), cols = a.size(1);
    if (begin >= end || end > cols) {
        throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") outside " + shape_str(a.shape()));
    }
    const std::size_t width = end - begin;
    std::vector<double> out(rows * width);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < width; ++j) out[r * width + j] = a.data()[r * cols + begin + j];
    }
    auto backward = [rows, cols, begin, width](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < width; ++j) g[r * cols + begin + j] += self.grad[r * width + j];
        }
    };
    return make_result("slice", {rows, width}, std::move(out), {&a}, backward, 0, 0);
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t rows = parts[0].size(0);
    std::size_t cols = 0;
    for (const auto& p : parts) {
        require_2d("concat_cols", p);
        if (p.size(0) != rows) throw DimensionError("concat_cols: row counts differ");
        cols += p.size(1);
    }
    std::vector<double> out(rows * cols);
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        const std::size_t w = p.size(1);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < w; ++j) out[r * cols + offset + j] = p.data()[r * w + j];
        }
        offset += w;
    }
    auto backward = [rows, cols, offsets = std::move(offsets)](Node& self) {
        for (std::size_t i = 0; i < self.inputs.size(); ++i) {
            Node& in = *self.inputs[i];
            if (!in.requires_grad) continue;
            const std::size_t w = in.shape[1];
            auto& g = in.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < w; ++j) g[r * w + j] += self.grad[r * cols + offsets[i] + j];
            }
        }
    };
    return make_result_n("concat", {rows, cols}, std::move(out), parts, backward, 0, 0);
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t cols = parts[0].size(1);
    std::size_t rows = 0;
    for (const auto& p : parts) {
        require_2d("concat_rows", p);
        if (p.size(1) != cols) {
            throw DimensionError("concat_rows: widths differ, " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        rows += p.size(0);
    }
    std::vector<double> out;
    out.reserve(rows * cols);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    auto backward = [](Node& self) {
        std::size_t offset = 0;
        for (auto& input : self.inputs) {
            const std::size_t n = input->data.size();
            if (input->requires_grad) {
                auto& g = input->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
            }
            offset += n;
        }
    };
    return make_result_n("concat", {rows, cols}, std::move(out), parts, backward, 0, 0);
}

Tensor mean_rows(const Tensor& a) {
    require_2d("mean_rows", a);
    const std::size_t rows = a.size(0), cols = a.size(1);
    std::vector<double> out(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < cols; ++j) out[j] += a.data()[r * cols + j];
    }
    for (auto& v : out) v /= static_cast<double>(rows);
    auto backward = [rows, cols](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        const double inv = 1.0 / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < cols; ++j) g[r * cols + j] += self.grad[j] * inv;
        }
    };
    return make_result("mean_rows", {1, cols}, std::move(out), {&a}, backward, flop_cost::kElementwise * rows * cols,
                       cols);
}

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    auto backward = [](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    };
    return make_result("sum", {1}, {total}, {&a}, backward, flop_cost::kElementwise * a.numel(), 1);
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
    require_2d("gather_rows", table);
    if (ids.empty()) throw DimensionError("gather_rows: empty id list");
    const std::size_t vocab = table.size(0), cols = table.size(1);
    std::vector<double> out(ids.size() * cols);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= vocab) {
            throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                                 std::to_string(vocab) + " rows");
        }
        std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * cols), cols,
                    out.begin() + static_cast<std::ptrdiff_t>(i * cols));
    }
    auto backward = [cols, ids = std::vector<std::size_t>(ids.begin(), ids.end())](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            for (std::size_t j = 0; j < cols; ++j) g[ids[i] * cols + j] += self.grad[i * cols + j];
        }
    };
    return make_result("gather", {ids.size(), cols}, std::move(out), {&table}, backward, 0, 0);
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
    require_2d("cross_entropy", logits);
    const std::size_t batch = logits.size(0), classes = logits.size(1);
    if (labels.size() != batch) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(batch) + " rows");
    }
    std::vector<double> probs(batch * classes);
    double loss = 0.0;
    for (std::size_t r = 0; r < batch; ++r) {
        if (labels[r] >= classes) throw DimensionError("cross_entropy: label out of range");
        const double* row = logits.data().data() + r * classes;
        double peak = row[0];
        for (std::size_t j = 0; j < classes; ++j) peak = std::max(peak, row[j]);
        double total = 0.0;
        for (std::size_t j = 0; j < classes; ++j) total += std::exp(row[j] - peak);
        const double log_total = std::log(total) + peak;
        for (std::size_t j = 0; j < classes; ++j) probs[r * classes + j] = std::exp(row[j] - log_total);
        loss += log_total - row[labels[r]];
    }
    loss /= static_cast<double>(batch);
    auto backward = [batch, classes, probs = std::move(probs),
                     labels = std::vector<std::size_t>(labels.begin(), labels.end())](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        const double upstream = self.grad[0] / static_cast<double>(batch);
        for (std::size_t r = 0; r < batch; ++r) {
            for (std::size_t j = 0; j < classes; ++j) {
                const double target = j == labels[r] ? 1.0 : 0.0;
                g[r * classes + j] += upstream * (probs[r * classes + j] - target);
            }
        }
    };
    return make_result("cross_entropy", {1}, {loss}, {&logits}, backward,
                       flop_cost::kSoftmax * batch * classes + batch, batch * classes);
}

}  // namespace jar
