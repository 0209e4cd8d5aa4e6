#include "jar/nn.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "jar/errors.hpp"
#include "jar/ops.hpp"

namespace jar::nn {

namespace {

Tensor init_weight(ParamStore& store, const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    return store.add(name, Tensor::randn({fan_in, fan_out}, rng, 1.0 / std::sqrt(static_cast<double>(fan_in))));
}

void require_width(const char* op, const Tensor& x, std::size_t width) {
    if (x.dim() != 2 || x.size(1) != width) {
        throw DimensionError(std::string(op) + ": input " + shape_str(x.shape()) + " does not have width " +
                             std::to_string(width));
    }
}

}  // namespace

AttentionParams make_attention(ParamStore& store, const std::string& prefix, std::size_t width, std::size_t heads,
                               Rng& rng) {
    if (heads == 0 || width % heads != 0) {
        throw ConfigError("head count " + std::to_string(heads) + " must divide width " + std::to_string(width));
    }
    AttentionParams p;
    p.query = init_weight(store, prefix + ".query", width, width, rng);
    p.key = init_weight(store, prefix + ".key", width, width, rng);
    p.value = init_weight(store, prefix + ".value", width, width, rng);
    p.output = init_weight(store, prefix + ".output", width, width, rng);
    p.heads = heads;
    return p;
}

MlpParams make_mlp(ParamStore& store, const std::string& prefix, std::size_t width, std::size_t ratio, Rng& rng) {
    if (ratio < 1) throw ConfigError("mlp ratio must be at least 1");
    MlpParams p;
    p.ratio = ratio;
    p.expand = init_weight(store, prefix + ".expand", width, ratio * width, rng);
    p.expand_bias = store.add(prefix + ".expand_bias", Tensor::zeros({ratio * width}));
    p.contract = init_weight(store, prefix + ".contract", ratio * width, width, rng);
    p.contract_bias = store.add(prefix + ".contract_bias", Tensor::zeros({width}));
    return p;
}

LayerNormParams make_layer_norm(ParamStore& store, const std::string& prefix, std::size_t width) {
    return {store.add(prefix + ".gain", Tensor::full({width}, 1.0)), store.add(prefix + ".bias", Tensor::zeros({width}))};
}

TransformerLayerParams make_transformer_layer(ParamStore& store, const std::string& prefix, std::size_t width,
                                              std::size_t heads, std::size_t mlp_ratio, Rng& rng) {
    TransformerLayerParams p;
    p.attn_norm = make_layer_norm(store, prefix + ".attn_norm", width);
    p.attn = make_attention(store, prefix + ".attn", width, heads, rng);
    p.mlp_norm = make_layer_norm(store, prefix + ".mlp_norm", width);
    p.mlp = make_mlp(store, prefix + ".mlp", width, mlp_ratio, rng);
    return p;
}

Tensor multi_head_attention(const Tensor& queries, const Tensor& keys_values, const AttentionParams& params) {
    const std::size_t width = params.width();
    require_width("multi_head_attention", queries, width);
    require_width("multi_head_attention", keys_values, width);

    const Tensor q = matmul(queries, params.query);
    const Tensor k = matmul(keys_values, params.key);
    const Tensor v = matmul(keys_values, params.value);

    const std::size_t head_dim = width / params.heads;
    const double logit_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<Tensor> head_outputs;
    head_outputs.reserve(params.heads);
    for (std::size_t h = 0; h < params.heads; ++h) {
        const std::size_t begin = h * head_dim, end = begin + head_dim;
        const Tensor logits = matmul(slice_cols(q, begin, end), transpose(slice_cols(k, begin, end)));
        const Tensor weights = softmax_rows(scale(logits, logit_scale));
        head_outputs.push_back(matmul(weights, slice_cols(v, begin, end)));
    }
    const Tensor merged = params.heads == 1 ? head_outputs.front() : concat_cols(head_outputs);
    return matmul(merged, params.output);
}

Tensor mlp_forward(const Tensor& x, const MlpParams& params) {
    require_width("mlp_forward", x, params.expand.size(0));
    const Tensor hidden = gelu(add_row(matmul(x, params.expand), params.expand_bias));
    return add_row(matmul(hidden, params.contract), params.contract_bias);
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& params) { return jar::layer_norm(x, params.gain, params.bias); }

Tensor transformer_layer(const Tensor& x, const TransformerLayerParams& params) {
    require_width("transformer_layer", x, params.attn.width());
    const Tensor normed = layer_norm(x, params.attn_norm);
    const Tensor attended = add(x, multi_head_attention(normed, normed, params.attn));
    return add(attended, mlp_forward(layer_norm(attended, params.mlp_norm), params.mlp));
}

void fill(Tensor& tensor, double value) { std::ranges::fill(tensor.mutable_data(), value); }

void zero_weights(TransformerLayerParams& layer) {
    for (Tensor* t : {&layer.attn.query, &layer.attn.key, &layer.attn.value, &layer.attn.output, &layer.mlp.expand,
                      &layer.mlp.expand_bias, &layer.mlp.contract, &layer.mlp.contract_bias, &layer.attn_norm.bias,
                      &layer.mlp_norm.bias}) {
        fill(*t, 0.0);
    }
}

}  // namespace jar::nn
