#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "jar/flops.hpp"
#include "jar/nn.hpp"
#include "jar/param_store.hpp"
#include "jar/tensor.hpp"

namespace jar::fusion {

// How the next iteration's query is formed from the previous output F_i and
// the text latents t_N.
enum class CombinationMode { None, Residual, Weighted };
enum class ResampleMode { Latent, Spatial };
enum class FusionKind { Jar, Concat, CrossAttn, Perceiver, Spatial };

inline constexpr FusionKind kAllKinds[] = {FusionKind::Jar, FusionKind::Concat, FusionKind::CrossAttn,
                                           FusionKind::Perceiver, FusionKind::Spatial};

std::string_view to_string(CombinationMode mode);
std::string_view to_string(ResampleMode mode);
std::string_view to_string(FusionKind kind);
CombinationMode parse_combination_mode(std::string_view text);
ResampleMode parse_resample_mode(std::string_view text);
FusionKind parse_fusion_kind(std::string_view text);

struct FusionConfig {
    std::size_t latents = 64;       // N
    std::size_t iterations = 4;     // K
    std::size_t total_layers = 32;  // transformer layers, split evenly over iterations
    std::size_t width = 768;        // D
    std::size_t heads = 12;
    std::size_t mlp_ratio = 4;
    CombinationMode combination = CombinationMode::Weighted;
    ResampleMode resample = ResampleMode::Latent;
    bool position_embedding = true;

    // Throws ConfigError on zero extents, heads not dividing width, or a
    // layer budget not divisible by the iteration count.
    void validate() const;
    std::size_t layers_per_iteration() const { return total_layers / iterations; }
};

// Feature grid geometry of the image input.
struct ImageGeometry {
    std::size_t height = 14;
    std::size_t width = 14;
    std::size_t channels = 768;

    std::size_t tokens() const { return height * width; }
};

struct ModalityFeatures {
    Tensor text;   // [L x D]
    Tensor image;  // [H x W x C]
};

struct ProjectionParams {
    Tensor w1;         // [C x D]
    Tensor positions;  // [M x D]; undefined when position embeddings are off
};

// Learned query tokens per modality and the attention that resamples with
// them. The attention output projection plays the role of W_2.
struct LatentBank {
    Tensor image_latents;  // [N x D]
    Tensor text_latents;   // [N x D]
    nn::AttentionParams image_attn;
    nn::AttentionParams text_attn;
};

// Spatial-resampling baseline: N attention maps over the image tokens.
struct SpatialParams {
    Tensor map_weights;  // [D x N]
};

struct FusionParams {
    Tensor alpha;                 // gates the cross-attention branch
    Tensor beta;                  // gates the MLP branch
    std::vector<Tensor> lambdas;  // Weighted mode, one per iteration after the first
    nn::LayerNormParams query_norm;
    nn::LayerNormParams context_norm;
    nn::AttentionParams cross_attn;
    nn::MlpParams mlp;
    std::vector<nn::TransformerLayerParams> layers;  // total_layers, iteration-major
};

struct FusionOutput {
    Tensor features;
    OpCounter flops;
};

// Flatten [H x W x C] to [M x C], multiply by W_1, add position embeddings.
Tensor project_image(const Tensor& image, const ProjectionParams& params);
// Cross-attention with `latents` as queries over `inputs`; always [N x D].
Tensor latent_resample(const Tensor& inputs, const Tensor& latents, const nn::AttentionParams& params);
// softmax over tokens of (inputs * map_weights), transposed, times inputs.
Tensor spatial_resample(const Tensor& inputs, const SpatialParams& params);
// P = Ln(t) + tanh(alpha) Attn(Ln(t), Ln(f)); F = P + tanh(beta) Mlp(P).
Tensor gated_cross_fuse(const Tensor& t, const Tensor& f, const FusionParams& params);
// K rounds of gated_cross_fuse followed by total_layers/K transformer layers.
// The first round queries with t_N; later rounds with combine(F_i, t_N).
FusionOutput iterative_refine(const Tensor& t_latent, const Tensor& f_latent, const FusionConfig& config,
                              const FusionParams& params);

// Owns the parameters of one fusion strategy.
class FusionModel {
public:
    static FusionModel create(FusionKind kind, const FusionConfig& config, const ImageGeometry& geometry,
                              std::uint64_t seed);

    FusionOutput forward(const ModalityFeatures& features) const;

    FusionKind kind() const { return kind_; }
    const FusionConfig& config() const { return config_; }
    const ImageGeometry& geometry() const { return geometry_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    ProjectionParams& projection() { return projection_; }
    LatentBank& latents() { return bank_; }
    SpatialParams& spatial() { return spatial_; }
    FusionParams& fusion() { return fusion_; }
    std::vector<nn::TransformerLayerParams>& baseline_layers() { return baseline_layers_; }
    const ProjectionParams& projection() const { return projection_; }
    const LatentBank& latents() const { return bank_; }
    const SpatialParams& spatial() const { return spatial_; }
    const FusionParams& fusion() const { return fusion_; }
    const std::vector<nn::TransformerLayerParams>& baseline_layers() const { return baseline_layers_; }
    const nn::LayerNormParams& context_norm() const { return context_norm_; }

    // Throws DimensionError unless text is [L x D] and image matches the
    // model's grid geometry.
    void validate_inputs(const ModalityFeatures& features) const;

    // Rows of the fused representation for `text_tokens` text tokens.
    std::size_t output_rows(std::size_t text_tokens) const;

private:
    FusionModel() = default;

    FusionKind kind_ = FusionKind::Jar;
    FusionConfig config_;
    ImageGeometry geometry_;
    ParamStore store_;
    ProjectionParams projection_;
    LatentBank bank_;
    SpatialParams spatial_;
    FusionParams fusion_;
    nn::LayerNormParams context_norm_;                     // CrossAttn only
    std::vector<nn::TransformerLayerParams> baseline_layers_;  // Concat / CrossAttn
};

// The JAR pipeline: project, resample each modality once, refine.
FusionOutput jar_forward(const ModalityFeatures& features, const FusionModel& model);
// Baseline strategies; the model must have been created for `kind`.
FusionOutput baseline_forward(FusionKind kind, const ModalityFeatures& features, const FusionModel& model);

}  // namespace jar::fusion
