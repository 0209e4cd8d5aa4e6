#include "jar/costmodel.hpp"

#include <cmath>
#include <ostream>

#include "jar/errors.hpp"
#include "jar/flops.hpp"

namespace jar::cost {

namespace {

using u64 = std::uint64_t;
using namespace flop_cost;

// FLOPs and produced activation values of a piece of the forward pass.
struct Cost {
    u64 flops = 0;
    u64 values = 0;

    Cost& operator+=(const Cost& other) {
        flops += other.flops;
        values += other.values;
        return *this;
    }
    friend Cost operator+(Cost a, const Cost& b) { return a += b; }
    friend Cost operator*(u64 times, const Cost& c) { return {times * c.flops, times * c.values}; }
};

struct Dims {
    u64 D, heads, r;
};

Cost elementwise(u64 n) { return {kElementwise * n, n}; }
Cost matmul(u64 m, u64 k, u64 n) { return {kMultiplyAdd * m * k * n, m * n}; }
Cost layer_norm(u64 rows, const Dims& d) { return {kLayerNorm * rows * d.D, rows * d.D}; }
Cost softmax(u64 n) { return {kSoftmax * n, n}; }
Cost tanh_scalar() { return {kTanh, 1}; }

Cost attention(u64 q, u64 m, const Dims& d) {
    const u64 head_dim = d.D / d.heads;
    Cost c = matmul(q, d.D, d.D) + matmul(m, d.D, d.D) + matmul(m, d.D, d.D);
    const Cost per_head = matmul(q, head_dim, m) + elementwise(q * m) + softmax(q * m) + matmul(q, m, head_dim);
    c += d.heads * per_head;
    c += matmul(q, d.D, d.D);
    return c;
}

Cost mlp(u64 q, const Dims& d) {
    const u64 hidden = d.r * d.D;
    return matmul(q, d.D, hidden) + elementwise(q * hidden) + Cost{kGelu * q * hidden, q * hidden} +
           matmul(q, hidden, d.D) + elementwise(q * d.D);
}

Cost transformer_layer(u64 q, const Dims& d) {
    return layer_norm(q, d) + attention(q, q, d) + elementwise(q * d.D) + layer_norm(q, d) + mlp(q, d) +
           elementwise(q * d.D);
}

Cost gated_cross_fuse(u64 n, const Dims& d) {
    const u64 nd = n * d.D;
    return layer_norm(n, d) + layer_norm(n, d) + attention(n, n, d) + tanh_scalar() + elementwise(nd) +
           elementwise(nd) + mlp(n, d) + tanh_scalar() + elementwise(nd) + elementwise(nd);
}

// tanh(gate) * F + c * t_N, identical for every combination mode.
Cost combination(u64 n, const Dims& d) {
    const u64 nd = n * d.D;
    return tanh_scalar() + elementwise(nd) + elementwise(nd) + elementwise(nd);
}

Cost projection(const ArchSpec& s) {
    const u64 m = s.image_tokens();
    Cost c = matmul(m, s.channels, s.width);
    if (s.position_embedding) c += elementwise(m * s.width);
    return c;
}

Cost refine(const ArchSpec& s, const Dims& d) {
    const u64 per_iteration = s.total_layers / s.iterations;
    Cost c;
    for (u64 i = 0; i < s.iterations; ++i) {
        if (i > 0) c += combination(s.latents, d);
        c += gated_cross_fuse(s.latents, d) + per_iteration * transformer_layer(s.latents, d);
    }
    return c;
}

Cost forward_cost(const ArchSpec& s) {
    const Dims d{s.width, s.heads, s.mlp_ratio};
    const u64 L = s.text_tokens, M = s.image_tokens(), N = s.latents, D = s.width;
    const Cost proj = projection(s);
    switch (s.kind) {
        case FusionKind::Jar:
            return proj + attention(N, M, d) + attention(N, L, d) + refine(s, d);
        case FusionKind::Spatial: {
            const Cost maps = matmul(M, D, N) + softmax(N * M) + matmul(N, M, D);
            return proj + maps + attention(N, L, d) + refine(s, d);
        }
        case FusionKind::Perceiver: {
            const u64 per_iteration = s.total_layers / s.iterations;
            const Cost round = attention(N, M, d) + attention(N, L, d) + gated_cross_fuse(N, d) +
                               per_iteration * transformer_layer(N, d);
            return proj + s.iterations * round;
        }
        case FusionKind::Concat:
            return proj + s.total_layers * transformer_layer(L + M, d);
        case FusionKind::CrossAttn: {
            const Cost layer = layer_norm(L, d) + attention(L, M, d) + elementwise(L * D) + layer_norm(L, d) +
                               mlp(L, d) + elementwise(L * D);
            return proj + layer_norm(M, d) + s.total_layers * layer;
        }
    }
    throw ConfigError("unknown fusion kind");
}

u64 param_count(const ArchSpec& s) {
    const u64 D = s.width, N = s.latents, r = s.mlp_ratio;
    const u64 attn = 4 * D * D;
    const u64 mlp_params = 2 * r * D * D + r * D + D;
    const u64 norm = 2 * D;
    const u64 layer = 2 * norm + attn + mlp_params;
    u64 total = s.channels * D + (s.position_embedding ? s.image_tokens() * D : 0);
    const u64 fusion_block = 2 + 2 * norm + attn + mlp_params + s.total_layers * layer;
    const u64 gates = s.combination == CombinationMode::Weighted ? s.iterations - 1 : 0;
    switch (s.kind) {
        case FusionKind::Jar:
            return total + 2 * N * D + 2 * attn + gates + fusion_block;
        case FusionKind::Spatial:
            return total + D * N + N * D + attn + gates + fusion_block;
        case FusionKind::Perceiver:
            return total + 2 * N * D + 2 * attn + fusion_block;
        case FusionKind::Concat:
            return total + s.total_layers * layer;
        case FusionKind::CrossAttn:
            return total + norm + s.total_layers * layer;
    }
    throw ConfigError("unknown fusion kind");
}

bool is_perfect_square(u64 v, u64& root) {
    root = static_cast<u64>(std::llround(std::sqrt(static_cast<double>(v))));
    return root * root == v;
}

}  // namespace

void ArchSpec::validate() const {
    if (width == 0 || heads == 0 || total_layers == 0 || text_tokens == 0 || grid_height == 0 || grid_width == 0 ||
        channels == 0 || latents == 0 || iterations == 0 || mlp_ratio == 0) {
        throw ConfigError("ArchSpec fields must all be positive");
    }
    if (width % heads != 0) throw ConfigError("ArchSpec: heads must divide width");
    if (total_layers % iterations != 0) throw ConfigError("ArchSpec: total_layers must be divisible by iterations");
}

fusion::FusionConfig ArchSpec::fusion_config() const {
    fusion::FusionConfig c;
    c.latents = latents;
    c.iterations = iterations;
    c.total_layers = total_layers;
    c.width = width;
    c.heads = heads;
    c.mlp_ratio = mlp_ratio;
    c.combination = combination;
    c.resample = kind == FusionKind::Spatial ? fusion::ResampleMode::Spatial : fusion::ResampleMode::Latent;
    c.position_embedding = position_embedding;
    return c;
}

fusion::ImageGeometry ArchSpec::geometry() const { return {grid_height, grid_width, channels}; }

std::uint64_t flops_attention(std::uint64_t queries, std::uint64_t keys, std::uint64_t width, std::uint64_t heads) {
    if (queries == 0 || keys == 0 || width == 0 || heads == 0 || width % heads != 0) {
        throw ConfigError("flops_attention: positive arguments with heads dividing width required");
    }
    return attention(queries, keys, Dims{width, heads, 1}).flops;
}

CostReport flops_total(const ArchSpec& spec) {
    spec.validate();
    const Cost c = forward_cost(spec);
    return {c.flops, param_count(spec), c.values};
}

std::string_view to_string(SweepAxis axis) {
    switch (axis) {
        case SweepAxis::ImageSize: return "image_size";
        case SweepAxis::Width: return "width";
        case SweepAxis::Depth: return "depth";
        case SweepAxis::Iterations: return "iterations";
        case SweepAxis::Tokens: return "tokens";
    }
    return "?";
}

SweepAxis parse_sweep_axis(std::string_view text) {
    for (auto axis : {SweepAxis::ImageSize, SweepAxis::Width, SweepAxis::Depth, SweepAxis::Iterations,
                      SweepAxis::Tokens}) {
        if (text == to_string(axis)) return axis;
    }
    throw ConfigError("unknown sweep axis '" + std::string(text) +
                      "' (valid axes: image_size, width, depth, iterations, tokens)");
}

ArchSpec apply_axis(ArchSpec base, SweepAxis axis, std::uint64_t value) {
    switch (axis) {
        case SweepAxis::ImageSize: {
            u64 root = 0;
            if (is_perfect_square(value, root)) {
                base.grid_height = base.grid_width = root;
            } else {
                base.grid_height = 1;
                base.grid_width = value;
            }
            break;
        }
        case SweepAxis::Width: base.width = value; break;
        case SweepAxis::Depth: base.total_layers = value; break;
        case SweepAxis::Iterations: base.iterations = value; break;
        case SweepAxis::Tokens: base.latents = value; break;
    }
    return base;
}

std::vector<SweepRow> sweep(SweepAxis axis, std::span<const std::uint64_t> grid, const ArchSpec& base,
                            std::span<const FusionKind> kinds) {
    if (grid.empty()) throw ConfigError("sweep: empty grid");
    if (kinds.empty()) throw ConfigError("sweep: no fusion kinds selected");
    std::vector<SweepRow> rows;
    rows.reserve(grid.size() * kinds.size());
    for (u64 value : grid) {
        ArchSpec spec = apply_axis(base, axis, value);
        for (FusionKind kind : kinds) {
            spec.kind = kind;
            rows.push_back({axis, value, kind, flops_total(spec)});
        }
    }
    return rows;
}

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
    out << kSweepCsvHeader << '\n';
    for (const auto& row : rows) {
        out << to_string(row.axis) << ',' << row.value << ',' << fusion::to_string(row.kind) << ',' << row.report.flops
            << ',' << row.report.params << ',' << row.report.peak_activation_values << '\n';
    }
}

}  // namespace jar::cost
