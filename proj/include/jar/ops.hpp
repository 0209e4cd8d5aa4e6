#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "jar/tensor.hpp"

// Differentiable ops. Every op reports its FLOPs and produced values to the
// active FlopScope (see flops.hpp). Shapes never broadcast except the
// last-axis bias in `add_row` and the scalar in `scale`.
namespace jar {

inline constexpr double kLayerNormEps = 1e-5;

// [m x k] * [k x n] -> [m x n]; 2mnk FLOPs.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// a + bias broadcast over the last axis.
Tensor add_row(const Tensor& a, const Tensor& bias);
// a * s for a one-element tensor s.
Tensor scale(const Tensor& a, const Tensor& s);
Tensor scale(const Tensor& a, double factor);

Tensor tanh(const Tensor& a);
// Exact (erf) GELU.
Tensor gelu(const Tensor& a);

// Max-subtracted softmax over the last axis. Throws ContractError on
// non-finite input.
Tensor softmax_rows(const Tensor& x);
// Normalizes over the last axis, eps = 1e-5, then gain * xhat + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);

// [r x c] -> [1 x c]
Tensor mean_rows(const Tensor& a);
// Sum of all entries, shape {1}.
Tensor sum(const Tensor& a);
// Rows of `table` selected by `ids`.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
// Mean softmax cross-entropy over rows of [B x A] logits.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

}  // namespace jar
