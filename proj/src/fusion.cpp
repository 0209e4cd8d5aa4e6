#include "jar/fusion.hpp"

#include <cmath>
#include <limits>

#include "jar/errors.hpp"
#include "jar/ops.hpp"
#include "jar/rng.hpp"

namespace jar::fusion {

namespace {

constexpr double kLatentInitStd = 0.02;
constexpr double kPositionInitStd = 0.02;

Tensor run_layers(Tensor x, std::span<const nn::TransformerLayerParams> layers) {
    for (const auto& layer : layers) x = nn::transformer_layer(x, layer);
    return x;
}

// Every mode evaluates tanh(gate) * F_i + c * t_N. None and Residual pin
// the gate fully open (tanh(+inf) == 1 exactly) with c = 0 and c = 1, so all
// modes share one op sequence and cost.
Tensor combine(const Tensor& previous, const Tensor& text_latents, std::size_t iteration, const FusionConfig& config,
               const FusionParams& params) {
    const bool weighted = config.combination == CombinationMode::Weighted;
    const Tensor gate = weighted ? params.lambdas.at(iteration - 1)
                                 : Tensor::scalar(std::numeric_limits<double>::infinity());
    const double text_coeff = config.combination == CombinationMode::None ? 0.0 : 1.0;
    return add(scale(previous, tanh(gate)), scale(text_latents, text_coeff));
}

void require_rows_width(const char* op, const Tensor& x, std::size_t width) {
    if (x.dim() != 2 || x.size(1) != width) {
        throw DimensionError(std::string(op) + ": " + shape_str(x.shape()) + " does not have width " +
                             std::to_string(width));
    }
}

}  // namespace

std::string_view to_string(CombinationMode mode) {
    switch (mode) {
        case CombinationMode::None: return "none";
        case CombinationMode::Residual: return "residual";
        case CombinationMode::Weighted: return "weighted";
    }
    return "?";
}

std::string_view to_string(ResampleMode mode) { return mode == ResampleMode::Latent ? "latent" : "spatial"; }

std::string_view to_string(FusionKind kind) {
    switch (kind) {
        case FusionKind::Jar: return "jar";
        case FusionKind::Concat: return "concat";
        case FusionKind::CrossAttn: return "crossattn";
        case FusionKind::Perceiver: return "perceiver";
        case FusionKind::Spatial: return "spatial";
    }
    return "?";
}

CombinationMode parse_combination_mode(std::string_view text) {
    for (auto mode : {CombinationMode::None, CombinationMode::Residual, CombinationMode::Weighted}) {
        if (text == to_string(mode)) return mode;
    }
    throw ConfigError("unknown combination mode '" + std::string(text) + "' (expected none, residual, weighted)");
}

ResampleMode parse_resample_mode(std::string_view text) {
    for (auto mode : {ResampleMode::Latent, ResampleMode::Spatial}) {
        if (text == to_string(mode)) return mode;
    }
    throw ConfigError("unknown resample mode '" + std::string(text) + "' (expected latent, spatial)");
}

FusionKind parse_fusion_kind(std::string_view text) {
    for (auto kind : kAllKinds) {
        if (text == to_string(kind)) return kind;
    }
    throw ConfigError("unknown fusion kind '" + std::string(text) +
                      "' (expected jar, concat, crossattn, perceiver, spatial)");
}

void FusionConfig::validate() const {
    if (latents == 0 || iterations == 0 || total_layers == 0 || width == 0 || heads == 0 || mlp_ratio == 0) {
        throw ConfigError("fusion config values must be positive");
    }
    if (width % heads != 0) {
        throw ConfigError("heads (" + std::to_string(heads) + ") must divide width (" + std::to_string(width) + ")");
    }
    if (total_layers % iterations != 0) {
        throw ConfigError("total_layers (" + std::to_string(total_layers) + ") must be divisible by iterations (" +
                          std::to_string(iterations) + ")");
    }
}

Tensor project_image(const Tensor& image, const ProjectionParams& params) {
    if (image.dim() != 3) throw DimensionError("project_image: expected [H x W x C], got " + shape_str(image.shape()));
    const std::size_t tokens = image.size(0) * image.size(1);
    const std::size_t channels = image.size(2);
    if (params.w1.size(0) != channels) {
        throw DimensionError("project_image: image has " + std::to_string(channels) + " channels, W_1 is " +
                             shape_str(params.w1.shape()));
    }
    Tensor projected = matmul(reshape(image, {tokens, channels}), params.w1);
    if (params.positions.defined()) {
        if (params.positions.size(0) != tokens) {
            throw DimensionError("project_image: position table " + shape_str(params.positions.shape()) +
                                 " does not cover " + std::to_string(tokens) + " tokens");
        }
        projected = add(projected, params.positions);
    }
    return projected;
}

Tensor latent_resample(const Tensor& inputs, const Tensor& latents, const nn::AttentionParams& params) {
    return nn::multi_head_attention(latents, inputs, params);
}

Tensor spatial_resample(const Tensor& inputs, const SpatialParams& params) {
    require_rows_width("spatial_resample", inputs, params.map_weights.size(0));
    const Tensor maps = softmax_rows(transpose(matmul(inputs, params.map_weights)));
    return matmul(maps, inputs);
}

Tensor gated_cross_fuse(const Tensor& t, const Tensor& f, const FusionParams& params) {
    if (t.shape() != f.shape()) {
        throw DimensionError("gated_cross_fuse: " + shape_str(t.shape()) + " vs " + shape_str(f.shape()));
    }
    const Tensor query = nn::layer_norm(t, params.query_norm);
    const Tensor context = nn::layer_norm(f, params.context_norm);
    const Tensor cross = add(query, scale(nn::multi_head_attention(query, context, params.cross_attn), tanh(params.alpha)));
    return add(cross, scale(nn::mlp_forward(cross, params.mlp), tanh(params.beta)));
}

FusionOutput iterative_refine(const Tensor& t_latent, const Tensor& f_latent, const FusionConfig& config,
                              const FusionParams& params) {
    config.validate();
    FusionOutput out;
    FlopScope scope(out.flops);
    const std::size_t per_iteration = config.layers_per_iteration();
    if (params.layers.size() != config.total_layers) {
        throw ConfigError("iterative_refine: " + std::to_string(params.layers.size()) + " layers for a budget of " +
                          std::to_string(config.total_layers));
    }
    Tensor current;
    for (std::size_t i = 0; i < config.iterations; ++i) {
        const Tensor query = i == 0 ? t_latent : combine(current, t_latent, i, config, params);
        const auto stack = std::span(params.layers).subspan(i * per_iteration, per_iteration);
        current = run_layers(gated_cross_fuse(query, f_latent, params), stack);
    }
    out.features = current;
    return out;
}

FusionModel FusionModel::create(FusionKind kind, const FusionConfig& config, const ImageGeometry& geometry,
                                std::uint64_t seed) {
    config.validate();
    if (geometry.height == 0 || geometry.width == 0 || geometry.channels == 0) {
        throw ConfigError("image geometry extents must be positive");
    }
    FusionModel model;
    model.config_ = config;
    if (kind == FusionKind::Jar && config.resample == ResampleMode::Spatial) kind = FusionKind::Spatial;
    if (kind == FusionKind::Spatial) model.config_.resample = ResampleMode::Spatial;
    model.kind_ = kind;
    model.geometry_ = geometry;

    Rng rng(seed);
    const std::size_t width = config.width;
    const std::size_t tokens = geometry.tokens();
    ParamStore& store = model.store_;

    model.projection_.w1 = store.add(
        "projection.w1",
        Tensor::randn({geometry.channels, width}, rng, 1.0 / std::sqrt(static_cast<double>(geometry.channels))));
    if (config.position_embedding) {
        model.projection_.positions = store.add("projection.positions", Tensor::randn({tokens, width}, rng, kPositionInitStd));
    }

    if (kind == FusionKind::Concat || kind == FusionKind::CrossAttn) {
        if (kind == FusionKind::CrossAttn) model.context_norm_ = nn::make_layer_norm(store, "crossattn.context_norm", width);
        for (std::size_t l = 0; l < config.total_layers; ++l) {
            model.baseline_layers_.push_back(nn::make_transformer_layer(store, "layer." + std::to_string(l), width,
                                                                        config.heads, config.mlp_ratio, rng));
        }
        return model;
    }

    if (kind == FusionKind::Spatial) {
        model.spatial_.map_weights = store.add(
            "spatial.map", Tensor::randn({width, config.latents}, rng, 1.0 / std::sqrt(static_cast<double>(width))));
    } else {
        model.bank_.image_latents = store.add("latents.image", Tensor::randn({config.latents, width}, rng, kLatentInitStd));
        model.bank_.image_attn = nn::make_attention(store, "resample.image", width, config.heads, rng);
    }
    model.bank_.text_latents = store.add("latents.text", Tensor::randn({config.latents, width}, rng, kLatentInitStd));
    model.bank_.text_attn = nn::make_attention(store, "resample.text", width, config.heads, rng);

    FusionParams& fp = model.fusion_;
    fp.alpha = store.add("fusion.alpha", Tensor::scalar(0.0));
    fp.beta = store.add("fusion.beta", Tensor::scalar(0.0));
    if (kind != FusionKind::Perceiver && config.combination == CombinationMode::Weighted) {
        for (std::size_t i = 1; i < config.iterations; ++i) {
            fp.lambdas.push_back(store.add("fusion.lambda." + std::to_string(i), Tensor::scalar(0.0)));
        }
    }
    fp.query_norm = nn::make_layer_norm(store, "fusion.query_norm", width);
    fp.context_norm = nn::make_layer_norm(store, "fusion.context_norm", width);
    fp.cross_attn = nn::make_attention(store, "fusion.cross_attn", width, config.heads, rng);
    fp.mlp = nn::make_mlp(store, "fusion.mlp", width, config.mlp_ratio, rng);
    for (std::size_t l = 0; l < config.total_layers; ++l) {
        fp.layers.push_back(nn::make_transformer_layer(store, "fusion.layer." + std::to_string(l), width, config.heads,
                                                       config.mlp_ratio, rng));
    }
    return model;
}

std::size_t FusionModel::output_rows(std::size_t text_tokens) const {
    switch (kind_) {
        case FusionKind::Concat: return text_tokens + geometry_.tokens();
        case FusionKind::CrossAttn: return text_tokens;
        default: return config_.latents;
    }
}

void FusionModel::validate_inputs(const ModalityFeatures& features) const {
    if (!features.text.defined() || !features.image.defined()) throw DimensionError("fusion input missing a modality");
    require_rows_width("fusion text", features.text, config_.width);
    const auto& shape = features.image.shape();
    if (shape.size() != 3 || shape[0] != geometry_.height || shape[1] != geometry_.width ||
        shape[2] != geometry_.channels) {
        throw DimensionError("fusion image " + shape_str(shape) + " does not match model geometry [" +
                             std::to_string(geometry_.height) + "x" + std::to_string(geometry_.width) + "x" +
                             std::to_string(geometry_.channels) + "]");
    }
}

FusionOutput FusionModel::forward(const ModalityFeatures& features) const {
    return kind_ == FusionKind::Jar ? jar_forward(features, *this) : baseline_forward(kind_, features, *this);
}

FusionOutput jar_forward(const ModalityFeatures& features, const FusionModel& model) {
    if (model.kind() != FusionKind::Jar) throw ConfigError("jar_forward: model was built for another fusion kind");
    model.validate_inputs(features);
    FusionOutput out;
    {
        FlopScope scope(out.flops);
        const auto& bank = model.latents();
        const Tensor projected = project_image(features.image, model.projection());
        const Tensor f_latent = latent_resample(projected, bank.image_latents, bank.image_attn);
        const Tensor t_latent = latent_resample(features.text, bank.text_latents, bank.text_attn);
        out.features = iterative_refine(t_latent, f_latent, model.config(), model.fusion()).features;
    }
    return out;
}

FusionOutput baseline_forward(FusionKind kind, const ModalityFeatures& features, const FusionModel& model) {
    if (model.kind() != kind) {
        throw ConfigError("baseline_forward: model was built for '" + std::string(to_string(model.kind())) +
                          "', not '" + std::string(to_string(kind)) + "'");
    }
    if (kind == FusionKind::Jar) return jar_forward(features, model);
    model.validate_inputs(features);
    const FusionConfig& config = model.config();
    FusionOutput out;
    FlopScope scope(out.flops);
    const Tensor projected = project_image(features.image, model.projection());

    switch (kind) {
        case FusionKind::Jar:
            break;
        case FusionKind::Concat: {
            const Tensor tokens[] = {features.text, projected};
            out.features = run_layers(concat_rows(tokens), model.baseline_layers());
            return out;
        }
        case FusionKind::CrossAttn: {
            const Tensor context = nn::layer_norm(projected, model.context_norm());
            Tensor x = features.text;
            for (const auto& layer : model.baseline_layers()) {
                x = add(x, nn::multi_head_attention(nn::layer_norm(x, layer.attn_norm), context, layer.attn));
                x = add(x, nn::mlp_forward(nn::layer_norm(x, layer.mlp_norm), layer.mlp));
            }
            out.features = x;
            return out;
        }
        case FusionKind::Perceiver: {
            // Both modalities are resampled again at every iteration, queried
            // by the current fused state.
            const auto& bank = model.latents();
            const auto& fp = model.fusion();
            const std::size_t per_iteration = config.layers_per_iteration();
            Tensor image_query = bank.image_latents;
            Tensor text_query = bank.text_latents;
            Tensor current;
            for (std::size_t i = 0; i < config.iterations; ++i) {
                const Tensor f_latent = latent_resample(projected, image_query, bank.image_attn);
                const Tensor t_latent = latent_resample(features.text, text_query, bank.text_attn);
                const auto stack = std::span(fp.layers).subspan(i * per_iteration, per_iteration);
                current = run_layers(gated_cross_fuse(t_latent, f_latent, fp), stack);
                image_query = current;
                text_query = current;
            }
            out.features = current;
            return out;
        }
        case FusionKind::Spatial: {
            const auto& bank = model.latents();
            const Tensor f_latent = spatial_resample(projected, model.spatial());
            const Tensor t_latent = latent_resample(features.text, bank.text_latents, bank.text_attn);
            out.features = iterative_refine(t_latent, f_latent, config, model.fusion()).features;
            return out;
        }
    }
    throw ConfigError("unknown fusion kind");
}

}  // namespace jar::fusion
