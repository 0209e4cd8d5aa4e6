#pragma once

#include <cstddef>
#include <string>

#include "jar/param_store.hpp"
#include "jar/rng.hpp"
#include "jar/tensor.hpp"

namespace jar::nn {

// Bias-free multi-head attention. All four projections are [D x D]; heads
// split D evenly.
struct AttentionParams {
    Tensor query;
    Tensor key;
    Tensor value;
    Tensor output;
    std::size_t heads = 1;

    std::size_t width() const { return query.size(0); }
};

struct MlpParams {
    Tensor expand;         // [D x rD]
    Tensor expand_bias;    // [rD]
    Tensor contract;       // [rD x D]
    Tensor contract_bias;  // [D]
    std::size_t ratio = 4;
};

struct LayerNormParams {
    Tensor gain;
    Tensor bias;
};

// Pre-norm block: x + Attn(Ln(x)), then + Mlp(Ln(.)).
struct TransformerLayerParams {
    LayerNormParams attn_norm;
    AttentionParams attn;
    LayerNormParams mlp_norm;
    MlpParams mlp;
};

// Weights ~ N(0, 1/fan_in); biases zero; norm gain one.
AttentionParams make_attention(ParamStore& store, const std::string& prefix, std::size_t width, std::size_t heads,
                               Rng& rng);
MlpParams make_mlp(ParamStore& store, const std::string& prefix, std::size_t width, std::size_t ratio, Rng& rng);
LayerNormParams make_layer_norm(ParamStore& store, const std::string& prefix, std::size_t width);
TransformerLayerParams make_transformer_layer(ParamStore& store, const std::string& prefix, std::size_t width,
                                              std::size_t heads, std::size_t mlp_ratio, Rng& rng);

// Scaled dot-product attention per head with scale 1/sqrt(D/heads).
// Output is [q x D] for any number of key/value rows.
Tensor multi_head_attention(const Tensor& queries, const Tensor& keys_values, const AttentionParams& params);
// contract(gelu(expand(x)))
Tensor mlp_forward(const Tensor& x, const MlpParams& params);
Tensor layer_norm(const Tensor& x, const LayerNormParams& params);
Tensor transformer_layer(const Tensor& x, const TransformerLayerParams& params);

// Zeroes every weight and bias of a layer (norm gains stay at one).
void zero_weights(TransformerLayerParams& layer);
void fill(Tensor& tensor, double value);

}  // namespace jar::nn
