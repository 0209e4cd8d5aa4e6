#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "jar/fusion.hpp"

namespace jar::cost {

using fusion::CombinationMode;
using fusion::FusionKind;

// Architecture description for closed-form accounting. Mirrors a
// FusionModel built with `fusion_config()` / `geometry()` and fed L text
// tokens.
struct ArchSpec {
    std::uint64_t width = 768;  // D
    std::uint64_t heads = 12;
    std::uint64_t total_layers = 32;
    std::uint64_t text_tokens = 16;  // L
    std::uint64_t grid_height = 14;  // H
    std::uint64_t grid_width = 14;   // W
    std::uint64_t channels = 768;    // C
    std::uint64_t latents = 64;      // N
    std::uint64_t iterations = 4;    // K
    std::uint64_t mlp_ratio = 4;
    FusionKind kind = FusionKind::Jar;
    CombinationMode combination = CombinationMode::Weighted;
    bool position_embedding = true;

    std::uint64_t image_tokens() const { return grid_height * grid_width; }
    void validate() const;
    fusion::FusionConfig fusion_config() const;
    fusion::ImageGeometry geometry() const;
};

struct CostReport {
    std::uint64_t flops = 0;
    std::uint64_t params = 0;
    // Activation values produced by the forward pass, all of which stay live
    // for backward when nothing is recomputed.
    std::uint64_t peak_activation_values = 0;
};

// Multi-head attention of q query rows over m key/value rows:
// 4qD^2 (Q, output) + 4mD^2 (K, V) + 4qmD (logits, mixing) + 6qm*heads
// (logit scaling, softmax).
std::uint64_t flops_attention(std::uint64_t queries, std::uint64_t keys, std::uint64_t width, std::uint64_t heads);

CostReport flops_total(const ArchSpec& spec);

enum class SweepAxis { ImageSize, Width, Depth, Iterations, Tokens };

std::string_view to_string(SweepAxis axis);
SweepAxis parse_sweep_axis(std::string_view text);

struct SweepRow {
    SweepAxis axis;
    std::uint64_t value;
    FusionKind kind;
    CostReport report;
};

// Applies one grid value to `base` along `axis`. For image_size the value is
// the visual token count M, laid out square when M is a perfect square and as
// a 1 x M strip otherwise.
ArchSpec apply_axis(ArchSpec base, SweepAxis axis, std::uint64_t value);

// One row per (grid value, kind), grid-major, kinds in the given order.
std::vector<SweepRow> sweep(SweepAxis axis, std::span<const std::uint64_t> grid, const ArchSpec& base,
                            std::span<const FusionKind> kinds);

inline constexpr std::string_view kSweepCsvHeader = "axis,value,kind,flops,params,peak_values";
void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows);

}  // namespace jar::cost
