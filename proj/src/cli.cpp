#include "jar/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "jar/checkpoint.hpp"
#include "jar/errors.hpp"
#include "jar/format.hpp"
#include "jar/grad_check.hpp"
#include "jar/ops.hpp"

namespace jar::cli {

namespace fs = std::filesystem;
using fusion::FusionKind;

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split(std::string_view text, char sep) {
    std::vector<std::string> out;
    std::size_t begin = 0;
    for (;;) {
        const auto end = text.find(sep, begin);
        out.emplace_back(trim(text.substr(begin, end - begin)));
        if (end == std::string_view::npos) return out;
        begin = end + 1;
    }
}

std::uint64_t to_u64(std::string_view key, std::string_view value) {
    std::uint64_t v = 0;
    const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
    if (value.empty() || res.ec != std::errc{} || res.ptr != value.data() + value.size()) {
        throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key) +
                          ": expected a non-negative integer");
    }
    return v;
}

double to_f64(std::string_view key, std::string_view value) {
    double v = 0.0;
    const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
    if (value.empty() || res.ec != std::errc{} || res.ptr != value.data() + value.size() || !std::isfinite(v)) {
        throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key) + ": expected a number");
    }
    return v;
}

bool to_bool(std::string_view key, std::string_view value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key) + ": expected true or false");
}

using Setter = std::function<void(RunConfig&, std::string_view key, std::string_view value)>;

struct KeyDef {
    std::string help;
    Setter set;
};

template <typename T>
Setter size_field(T RunConfig::*outer, std::size_t T::*field) {
    return [=](RunConfig& c, std::string_view k, std::string_view v) { (c.*outer).*field = to_u64(k, v); };
}

template <typename T>
Setter double_field(T RunConfig::*outer, double T::*field) {
    return [=](RunConfig& c, std::string_view k, std::string_view v) { (c.*outer).*field = to_f64(k, v); };
}

Setter gc_model_size(std::size_t fusion::FusionConfig::*field) {
    return [=](RunConfig& c, std::string_view k, std::string_view v) { c.gradcheck.model.*field = to_u64(k, v); };
}

Setter gc_geometry(std::size_t fusion::ImageGeometry::*field) {
    return [=](RunConfig& c, std::string_view k, std::string_view v) { c.gradcheck.geometry.*field = to_u64(k, v); };
}

const std::map<std::string, KeyDef>& registry() {
    static const std::map<std::string, KeyDef> keys = [] {
        using fusion::FusionConfig;
        using tasks::TaskSpec;
        using tasks::TrainConfig;
        std::map<std::string, KeyDef> k;
        k["run.seed"] = {"random seed for data, initialization and sampling",
                         [](RunConfig& c, std::string_view key, std::string_view v) { c.seed = to_u64(key, v); }};
        k["run.out_dir"] = {"directory receiving every artifact",
                            [](RunConfig& c, std::string_view, std::string_view v) { c.out_dir = std::string(v); }};
        k["run.jobs"] = {"concurrent ablation cells",
                         [](RunConfig& c, std::string_view key, std::string_view v) { c.jobs = to_u64(key, v); }};

        k["model.kind"] = {"fusion strategy: jar, concat, crossattn, perceiver, spatial",
                           [](RunConfig& c, std::string_view, std::string_view v) { c.kind = fusion::parse_fusion_kind(v); }};
        k["model.latents"] = {"latent tokens N", size_field(&RunConfig::model, &FusionConfig::latents)};
        k["model.iterations"] = {"refinement rounds K", size_field(&RunConfig::model, &FusionConfig::iterations)};
        k["model.layers"] = {"transformer layers in total", size_field(&RunConfig::model, &FusionConfig::total_layers)};
        k["model.width"] = {"model width D", size_field(&RunConfig::model, &FusionConfig::width)};
        k["model.heads"] = {"attention heads", size_field(&RunConfig::model, &FusionConfig::heads)};
        k["model.mlp_ratio"] = {"MLP expansion ratio", size_field(&RunConfig::model, &FusionConfig::mlp_ratio)};
        k["model.combination"] = {"none, residual or weighted",
                                  [](RunConfig& c, std::string_view, std::string_view v) {
                                      c.model.combination = fusion::parse_combination_mode(v);
                                  }};
        k["model.resample"] = {"latent or spatial",
                               [](RunConfig& c, std::string_view, std::string_view v) {
                                   c.model.resample = fusion::parse_resample_mode(v);
                               }};
        k["model.position_embedding"] = {"add learned image position embeddings",
                                         [](RunConfig& c, std::string_view key, std::string_view v) {
                                             c.model.position_embedding = to_bool(key, v);
                                         }};

        k["task.kind"] = {"presence, counting, spatial-relation; a comma list trains a mixture",
                          [](RunConfig& c, std::string_view, std::string_view v) {
                              c.task_kinds.clear();
                              for (const auto& part : split(v, ',')) c.task_kinds.push_back(tasks::parse_task_kind(part));
                          }};
        k["task.grid_height"] = {"image grid rows", size_field(&RunConfig::task, &TaskSpec::grid_height)};
        k["task.grid_width"] = {"image grid columns", size_field(&RunConfig::task, &TaskSpec::grid_width)};
        k["task.channels"] = {"feature channels per cell", size_field(&RunConfig::task, &TaskSpec::channels)};
        k["task.object_types"] = {"distinct object types", size_field(&RunConfig::task, &TaskSpec::object_types)};
        k["task.max_distractors"] = {"upper bound on distractor objects",
                                     size_field(&RunConfig::task, &TaskSpec::max_distractors)};
        k["task.max_count"] = {"largest counting answer", size_field(&RunConfig::task, &TaskSpec::max_count)};
        k["task.noise"] = {"background noise stddev", double_field(&RunConfig::task, &TaskSpec::noise)};
        k["task.signature_seed"] = {"seed of the object channel signatures",
                                    [](RunConfig& c, std::string_view key, std::string_view v) {
                                        c.task.signature_seed = to_u64(key, v);
                                    }};

        k["train.steps"] = {"optimizer steps", size_field(&RunConfig::train, &TrainConfig::steps)};
        k["train.batch"] = {"samples per step", size_field(&RunConfig::train, &TrainConfig::batch)};
        k["train.learning_rate"] = {"Adam step size", double_field(&RunConfig::train, &TrainConfig::learning_rate)};
        k["train.beta1"] = {"Adam first-moment decay", double_field(&RunConfig::train, &TrainConfig::beta1)};
        k["train.beta2"] = {"Adam second-moment decay", double_field(&RunConfig::train, &TrainConfig::beta2)};
        k["train.epsilon"] = {"Adam epsilon", double_field(&RunConfig::train, &TrainConfig::epsilon)};
        k["train.eval_every"] = {"steps between evaluations", size_field(&RunConfig::train, &TrainConfig::eval_every)};
        k["train.eval_samples"] = {"held-out samples per task",
                                   size_field(&RunConfig::train, &TrainConfig::eval_samples)};
        k["train.target_accuracy"] = {"stop early at this eval accuracy (0 disables)",
                                      double_field(&RunConfig::train, &TrainConfig::target_accuracy)};
        k["train.ablation"] = {"none, image (zeroed images) or gate (alpha held at 0)",
                               [](RunConfig& c, std::string_view, std::string_view v) {
                                   c.train.ablation = tasks::parse_ablation(v);
                               }};

        k["sampler.decay"] = {"EMA decay of task losses",
                              [](RunConfig& c, std::string_view key, std::string_view v) {
                                  c.train.sampler.decay = to_f64(key, v);
                              }};
        k["sampler.floor"] = {"minimum weight per task",
                              [](RunConfig& c, std::string_view key, std::string_view v) {
                                  c.train.sampler.floor = to_f64(key, v);
                              }};
        k["sampler.refresh_every"] = {"loss updates between weight refreshes",
                                      [](RunConfig& c, std::string_view key, std::string_view v) {
                                          c.train.sampler.refresh_every = to_u64(key, v);
                                      }};

        using cost::ArchSpec;
        k["arch.kind"] = {"fusion kind of the cost-model base",
                          [](RunConfig& c, std::string_view, std::string_view v) { c.arch.kind = fusion::parse_fusion_kind(v); }};
        k["arch.width"] = {"cost-model width D", size_field(&RunConfig::arch, &ArchSpec::width)};
        k["arch.heads"] = {"cost-model heads", size_field(&RunConfig::arch, &ArchSpec::heads)};
        k["arch.layers"] = {"cost-model depth", size_field(&RunConfig::arch, &ArchSpec::total_layers)};
        k["arch.text_tokens"] = {"cost-model text tokens L", size_field(&RunConfig::arch, &ArchSpec::text_tokens)};
        k["arch.grid_height"] = {"cost-model grid rows", size_field(&RunConfig::arch, &ArchSpec::grid_height)};
        k["arch.grid_width"] = {"cost-model grid columns", size_field(&RunConfig::arch, &ArchSpec::grid_width)};
        k["arch.channels"] = {"cost-model image channels C", size_field(&RunConfig::arch, &ArchSpec::channels)};
        k["arch.latents"] = {"cost-model latents N", size_field(&RunConfig::arch, &ArchSpec::latents)};
        k["arch.iterations"] = {"cost-model rounds K", size_field(&RunConfig::arch, &ArchSpec::iterations)};
        k["arch.mlp_ratio"] = {"cost-model MLP ratio", size_field(&RunConfig::arch, &ArchSpec::mlp_ratio)};
        k["arch.combination"] = {"cost-model combination mode",
                                 [](RunConfig& c, std::string_view, std::string_view v) {
                                     c.arch.combination = fusion::parse_combination_mode(v);
                                 }};
        k["arch.position_embedding"] = {"cost-model position embeddings",
                                        [](RunConfig& c, std::string_view key, std::string_view v) {
                                            c.arch.position_embedding = to_bool(key, v);
                                        }};

        k["ablate.max_cells"] = {"largest accepted ablation grid", size_field(&RunConfig::ablate, &AblateSettings::max_cells)};
        k["ablate.steps"] = {"training steps per ablation cell", size_field(&RunConfig::ablate, &AblateSettings::steps)};
        k["ablate.eval_samples"] = {"held-out samples per ablation cell",
                                    size_field(&RunConfig::ablate, &AblateSettings::eval_samples)};

        k["gradcheck.kind"] = {"fusion kind to check",
                               [](RunConfig& c, std::string_view, std::string_view v) {
                                   c.gradcheck.kind = fusion::parse_fusion_kind(v);
                               }};
        k["gradcheck.latents"] = {"latents N", gc_model_size(&FusionConfig::latents)};
        k["gradcheck.iterations"] = {"rounds K", gc_model_size(&FusionConfig::iterations)};
        k["gradcheck.layers"] = {"transformer layers", gc_model_size(&FusionConfig::total_layers)};
        k["gradcheck.width"] = {"width D", gc_model_size(&FusionConfig::width)};
        k["gradcheck.heads"] = {"attention heads", gc_model_size(&FusionConfig::heads)};
        k["gradcheck.text_tokens"] = {"text tokens L",
                                      [](RunConfig& c, std::string_view key, std::string_view v) {
                                          c.gradcheck.text_tokens = to_u64(key, v);
                                      }};
        k["gradcheck.grid_height"] = {"image grid rows", gc_geometry(&fusion::ImageGeometry::height)};
        k["gradcheck.grid_width"] = {"image grid columns", gc_geometry(&fusion::ImageGeometry::width)};
        k["gradcheck.channels"] = {"image channels", gc_geometry(&fusion::ImageGeometry::channels)};
        k["gradcheck.step"] = {"finite-difference step h",
                               [](RunConfig& c, std::string_view key, std::string_view v) { c.gradcheck.step = to_f64(key, v); }};
        k["gradcheck.tolerance"] = {"relative error tolerance",
                                    [](RunConfig& c, std::string_view key, std::string_view v) {
                                        c.gradcheck.tolerance = to_f64(key, v);
                                    }};
        return k;
    }();
    return keys;
}

std::string keys_footer() {
    std::ostringstream out;
    out << "Global flags (before or after the subcommand):\n"
        << "  --seed UINT       random seed (default 0)\n"
        << "  --out-dir PATH    directory for every artifact (default: out)\n"
        << "  --jobs UINT       concurrent ablation cells (default 1)\n"
        << "  --config PATH     config file with [section] key = value lines\n\n"
        << "Config keys (file sections or --section.key VALUE overrides):\n";
    std::size_t width = 0;
    for (const auto& key : config_keys()) width = std::max(width, key.name.size());
    for (const auto& key : config_keys()) {
        out << "  --" << key.name << std::string(width - key.name.size() + 2, ' ') << key.help << '\n';
    }
    return out.str();
}

// Artifacts must stay inside the output directory.
fs::path artifact_path(const RunConfig& config, const std::string& name) {
    const fs::path relative(name);
    if (name.empty() || relative.is_absolute() || relative.has_parent_path() || name == "." || name == "..") {
        throw ConfigError("output name '" + name + "' must be a plain file name inside the output directory");
    }
    fs::create_directories(config.out_dir);
    return fs::path(config.out_dir) / relative;
}

std::ofstream open_csv(const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write '" + path.string() + "'");
    return out;
}

std::vector<std::uint64_t> parse_u64_list(std::string_view key, std::string_view text) {
    std::vector<std::uint64_t> out;
    if (trim(text).empty()) return out;
    for (const auto& part : split(text, ',')) out.push_back(to_u64(key, part));
    return out;
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& extras) {
    for (std::size_t i = 0; i < extras.size(); ++i) {
        const std::string& arg = extras[i];
        if (arg.rfind("--", 0) != 0 || arg.find('.') == std::string::npos) {
            throw ConfigError("unexpected argument '" + arg + "'");
        }
        const auto eq = arg.find('=');
        if (eq != std::string::npos) {
            apply_override(config, std::string_view(arg).substr(2, eq - 2), std::string_view(arg).substr(eq + 1));
        } else {
            if (i + 1 >= extras.size()) throw ConfigError("override '" + arg + "' needs a value");
            apply_override(config, std::string_view(arg).substr(2), extras[++i]);
        }
    }
}

// ---- subcommands ----

int cmd_train(const RunConfig& config, std::size_t dump_dataset, std::ostream& out) {
    const auto task_list = config.task_list();
    tasks::TrainConfig train = config.train;
    train.seed = config.seed;
    auto model = tasks::TaskModel::create(config.kind, config.model, task_list, config.seed);

    const auto log_path = artifact_path(config, "train_log.csv");
    const auto mixture_path = artifact_path(config, "mixture.csv");
    std::ofstream log = open_csv(log_path);
    std::ofstream mixture = open_csv(mixture_path);
    log << tasks::kLogCsvHeader << '\n';
    mixture << sampler::kTrajectoryCsvHeader << '\n';
    tasks::TrainHooks hooks;
    hooks.on_row = [&](const tasks::LogRow& row) { tasks::write_log_row(log, row); };
    hooks.on_mixture = [&](std::size_t step, const sampler::TaskMixState& state) {
        sampler::write_trajectory_rows(mixture, step, state);
    };
    const auto result = tasks::train(model, train, hooks);
    log.close();
    mixture.close();

    const auto checkpoint_path = artifact_path(config, "checkpoint.bin");
    save_checkpoint(checkpoint_path, model.params());
    out << "trained " << fusion::to_string(model.fusion().kind()) << " for " << result.log.size()
        << " steps: eval accuracy " << format_double(result.initial_accuracy) << " -> "
        << format_double(result.final_accuracy) << '\n';
    for (std::size_t t = 0; t < task_list.size(); ++t) {
        out << "  " << tasks::to_string(task_list[t].kind) << ": " << format_double(result.task_accuracy[t]) << '\n';
    }
    out << "wrote " << log_path.string() << ", " << mixture_path.string() << ", " << checkpoint_path.string() << '\n';
    if (dump_dataset > 0) {
        const auto dataset_path = artifact_path(config, "dataset.bin");
        tasks::save_dataset(dataset_path, tasks::generate(task_list.front(), dump_dataset, config.seed));
        out << "wrote " << dataset_path.string() << '\n';
    }
    return kSuccess;
}

int cmd_sweep(const RunConfig& config, const std::string& axis_name, const std::string& grid_text,
              const std::string& kinds_text, const std::string& output, std::ostream& out) {
    const auto axis = cost::parse_sweep_axis(axis_name);
    const auto grid = parse_u64_list("--grid", grid_text);
    if (grid.empty()) throw ConfigError("--grid must list at least one value");
    std::vector<FusionKind> kinds;
    for (const auto& part : split(kinds_text, ',')) kinds.push_back(fusion::parse_fusion_kind(part));
    const auto rows = cost::sweep(axis, grid, config.arch, kinds);
    if (output.empty()) {
        cost::write_sweep_csv(out, rows);
    } else {
        std::ofstream file = open_csv(artifact_path(config, output));
        cost::write_sweep_csv(file, rows);
    }
    return kSuccess;
}

struct AblateCell {
    std::string value;
    RunConfig config;
    cost::CostReport cost;
    double accuracy = 0.0;
};

constexpr std::string_view kAblateAxes[] = {"iterations", "tokens", "combination_mode", "resample_mode", "layers"};

void apply_ablate_value(RunConfig& cell, std::string_view axis, const std::string& value) {
    if (axis == "iterations") {
        cell.model.iterations = to_u64("iterations", value);
    } else if (axis == "tokens") {
        cell.model.latents = to_u64("tokens", value);
    } else if (axis == "layers") {
        cell.model.total_layers = to_u64("layers", value);
    } else if (axis == "combination_mode") {
        cell.model.combination = fusion::parse_combination_mode(value);
    } else {
        cell.model.resample = fusion::parse_resample_mode(value);
        cell.kind = cell.model.resample == fusion::ResampleMode::Spatial ? FusionKind::Spatial : FusionKind::Jar;
    }
}

cost::ArchSpec arch_of(const RunConfig& c) {
    const auto task = c.task_list().front();
    cost::ArchSpec s;
    s.width = c.model.width;
    s.heads = c.model.heads;
    s.total_layers = c.model.total_layers;
    s.text_tokens = task.question_length();
    s.grid_height = task.grid_height;
    s.grid_width = task.grid_width;
    s.channels = task.channels;
    s.latents = c.model.latents;
    s.iterations = c.model.iterations;
    s.mlp_ratio = c.model.mlp_ratio;
    s.kind = c.kind == FusionKind::Jar && c.model.resample == fusion::ResampleMode::Spatial ? FusionKind::Spatial : c.kind;
    s.combination = c.model.combination;
    s.position_embedding = c.model.position_embedding;
    return s;
}

int cmd_ablate(const RunConfig& config, const std::string& axis, const std::string& grid_text,
               const std::string& output, std::ostream& out) {
    if (std::find(std::begin(kAblateAxes), std::end(kAblateAxes), axis) == std::end(kAblateAxes)) {
        throw ConfigError("unknown ablation axis '" + axis +
                          "' (valid axes: iterations, tokens, combination_mode, resample_mode, layers)");
    }
    std::vector<std::string> values;
    if (!trim(grid_text).empty()) values = split(grid_text, ',');
    if (values.empty()) throw ConfigError("ablation grid is empty");
    if (values.size() > config.ablate.max_cells) {
        throw ConfigError("ablation grid has " + std::to_string(values.size()) + " cells, above the cap of " +
                          std::to_string(config.ablate.max_cells) + " (ablate.max_cells)");
    }

    // Every cell is validated before any training starts.
    std::vector<AblateCell> cells;
    for (const auto& value : values) {
        AblateCell cell{value, config, {}, 0.0};
        apply_ablate_value(cell.config, axis, value);
        cell.config.train.steps = config.ablate.steps;
        cell.config.train.eval_samples = config.ablate.eval_samples;
        cell.config.train.eval_every = std::min(cell.config.train.eval_every, config.ablate.steps);
        cell.config.train.seed = config.seed;
        cell.config.validate();
        cell.cost = cost::flops_total(arch_of(cell.config));
        artifact_path(config, "ablate_" + axis + "_" + value + ".csv");
        cells.push_back(std::move(cell));
    }

    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> failures(cells.size());
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            try {
                AblateCell& cell = cells[i];
                auto model = tasks::TaskModel::create(cell.config.kind, cell.config.model, cell.config.task_list(),
                                                      cell.config.seed);
                const auto result = tasks::train(model, cell.config.train);
                cell.accuracy = result.final_accuracy;
                std::ofstream log = open_csv(artifact_path(config, "ablate_" + axis + "_" + cell.value + ".csv"));
                tasks::write_log_csv(log, result.log);
            } catch (...) {
                failures[i] = std::current_exception();
            }
        }
    };
    const std::size_t jobs = std::max<std::size_t>(1, std::min(config.jobs, cells.size()));
    std::vector<std::thread> pool;
    for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (const auto& f : failures)
        if (f) std::rethrow_exception(f);

    std::ostringstream csv;
    csv << "axis,value,kind,flops,params,accuracy\n";
    for (const auto& cell : cells) {
        csv << axis << ',' << cell.value << ',' << fusion::to_string(arch_of(cell.config).kind) << ','
            << cell.cost.flops << ',' << cell.cost.params << ',' << format_double(cell.accuracy) << '\n';
    }
    if (output.empty()) {
        out << csv.str();
    } else {
        std::ofstream file = open_csv(artifact_path(config, output));
        file << csv.str();
    }
    return kSuccess;
}

std::string group_of(const std::string& name) {
    const auto dot = name.rfind('.');
    return dot == std::string::npos ? name : name.substr(0, dot);
}

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// A generic evaluation point. At initialization the gates are zero and the
// latents nearly coincide, so attention is almost uniform and the query/key
// gradients fall below the finite-difference noise floor.
void randomize_for_gradcheck(ParamStore& params, Rng& rng) {
    for (const auto& [name, t] : params) {
        Tensor handle = t;
        auto data = handle.mutable_data();
        if (name.rfind("latents.", 0) == 0 || ends_with(name, "positions")) {
            for (auto& v : data) v = rng.normal(0.0, 1.0);
        } else if (name == "fusion.alpha" || name == "fusion.beta" || name.rfind("fusion.lambda.", 0) == 0) {
            data[0] = rng.normal(0.0, 0.5);
        } else if (ends_with(name, ".gain")) {
            for (auto& v : data) v += rng.normal(0.0, 0.1);
        } else if (ends_with(name, "bias")) {
            for (auto& v : data) v = rng.normal(0.0, 0.1);
        }
    }
}

int cmd_gradcheck(const RunConfig& config, const std::string& corrupt, std::ostream& out, std::ostream& err) {
    const auto& gc = config.gradcheck;
    auto model = fusion::FusionModel::create(gc.kind, gc.model, gc.geometry, config.seed);
    Rng rng(config.seed + 1);
    randomize_for_gradcheck(model.params(), rng);
    const fusion::ModalityFeatures features{
        Tensor::randn({gc.text_tokens, gc.model.width}, rng, 1.0),
        Tensor::randn({gc.geometry.height, gc.geometry.width, gc.geometry.channels}, rng, 1.0)};
    const Tensor probe = Tensor::randn({model.output_rows(gc.text_tokens), gc.model.width}, rng, 1.0);
    auto loss = [&] { return sum(mul(model.forward(features).features, probe)); };

    struct Reset {
        ~Reset() { debug::corrupt_backward(""); }
    } reset;
    debug::corrupt_backward(corrupt);
    const auto report = grad_check(loss, model.params(), gc.step, gc.tolerance);

    std::map<std::string, const GradCheckEntry*> groups;
    std::vector<std::string> order;
    for (const auto& e : report.entries) {
        const auto g = group_of(e.name);
        auto [it, inserted] = groups.try_emplace(g, &e);
        if (inserted) order.push_back(g);
        if (e.max_rel_error > it->second->max_rel_error) it->second = &e;
    }
    out << "group,worst_parameter,max_rel_error\n";
    for (const auto& g : order) out << g << ',' << groups[g]->name << ',' << format_double(groups[g]->max_rel_error) << '\n';

    if (report.passed()) {
        const auto* worst = report.worst();
        out << "gradcheck passed: " << report.entries.size() << " parameters, worst relative error "
            << format_double(worst ? worst->max_rel_error : 0.0) << (worst ? " (" + worst->name + ")" : "") << '\n';
        return kSuccess;
    }
    for (const auto& e : report.entries) {
        if (e.failures == 0) continue;
        err << "gradcheck failed: parameter " << e.name << " has " << e.failures << " element(s) above tolerance "
            << format_double(gc.tolerance) << "; worst relative error " << format_double(e.max_rel_error)
            << " at index " << e.worst_index << " (analytic " << format_double(e.analytic) << ", numeric "
            << format_double(e.numeric) << ")\n";
    }
    for (const auto& op : failing_ops(config.seed)) {
        err << "gradcheck failed: backward of op '" << op << "' disagrees with finite differences\n";
    }
    return kCheckFailed;
}

}  // namespace

GradcheckSettings::GradcheckSettings() {
    model.latents = 8;
    model.iterations = 2;
    model.total_layers = 4;
    model.width = 16;
    model.heads = 2;
    model.mlp_ratio = 4;
}

RunConfig::RunConfig() {
    model.latents = 16;
    model.iterations = 2;
    model.total_layers = 4;
    model.width = 64;
    model.heads = 4;
    model.mlp_ratio = 4;
    train.learning_rate = 3e-3;
    train.eval_samples = 200;

    arch.width = 768;
    arch.heads = 12;
    arch.total_layers = 32;
    arch.text_tokens = 16;
    arch.grid_height = arch.grid_width = 14;
    arch.channels = 768;
    arch.latents = 64;
    arch.iterations = 4;
    arch.mlp_ratio = 4;
}

std::vector<tasks::TaskSpec> RunConfig::task_list() const {
    std::vector<tasks::TaskSpec> out;
    for (auto kind : task_kinds) {
        tasks::TaskSpec spec = task;
        spec.kind = kind;
        out.push_back(spec);
    }
    return out;
}

void RunConfig::validate() const {
    if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
    if (jobs == 0) throw ConfigError("jobs must be at least 1");
    if (task_kinds.empty()) throw ConfigError("task.kind must name at least one task");
    model.validate();
    for (const auto& spec : task_list()) {
        spec.validate();
        (void)tasks::generate(spec, 1, 0);  // surfaces infeasible grids early
    }
    train.validate();
    train.sampler.validate(task_kinds.size());
    if (train.ablation == tasks::Ablation::Gate && (kind == FusionKind::Concat || kind == FusionKind::CrossAttn)) {
        throw ConfigError("train.ablation = gate needs a model with a gated fusion block");
    }
    arch.validate();
    gradcheck.model.validate();
    if (gradcheck.text_tokens == 0 || gradcheck.geometry.tokens() == 0 || gradcheck.geometry.channels == 0) {
        throw ConfigError("gradcheck token counts must be positive");
    }
}

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> out;
        for (const auto& [name, def] : registry()) out.push_back({name, def.help});
        return out;
    }();
    return keys;
}

void apply_override(RunConfig& config, std::string_view key, std::string_view value) {
    const auto& keys = registry();
    const auto it = keys.find(std::string(key));
    if (it == keys.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
    it->second.set(config, key, trim(value));
}

void apply_config_text(RunConfig& config, std::string_view text, const std::string& origin) {
    std::string section;
    std::size_t line_no = 0;
    std::size_t begin = 0;
    while (begin <= text.size()) {
        auto end = text.find('\n', begin);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(begin, end - begin);
        begin = end + 1;
        ++line_no;
        const auto where = origin + ":" + std::to_string(line_no) + ": ";
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        try {
            if (line.front() == '[') {
                if (line.back() != ']') throw ConfigError("malformed section header");
                section = std::string(trim(line.substr(1, line.size() - 2)));
                const auto& keys = registry();
                const auto known = std::any_of(keys.begin(), keys.end(), [&](const auto& entry) {
                    return entry.first.rfind(section + ".", 0) == 0;
                });
                if (!known) throw ConfigError("unknown section [" + section + "]");
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string_view::npos) throw ConfigError("expected 'key = value'");
            if (section.empty()) throw ConfigError("key outside of a [section]");
            const auto key = trim(line.substr(0, eq));
            apply_override(config, section + "." + std::string(key), trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
}

void apply_config_file(RunConfig& config, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::ostringstream buffer;
    buffer << in.rdbuf();
    apply_config_text(config, buffer.str(), path);
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"jarfuse: multimodal fusion training, FLOPs sweeps, ablations and gradient checks"};
    app.require_subcommand(1);
    app.fallthrough();
    app.allow_extras();
    app.footer("Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 training divergence.");

    std::uint64_t seed = 0;
    std::string out_dir, config_path;
    std::size_t jobs = 0;
    auto* seed_opt = app.add_option("--seed", seed, "random seed (default 0)");
    auto* out_opt = app.add_option("--out-dir", out_dir, "directory for every artifact (default: out)");
    auto* jobs_opt = app.add_option("--jobs", jobs, "concurrent ablation cells (default 1)")->check(CLI::PositiveNumber);
    app.add_option("--config", config_path, "config file with [section] key = value lines");

    const std::string footer = keys_footer();
    auto* train = app.add_subcommand("train", "train a fusion model on the synthetic tasks");
    std::size_t dump_dataset = 0;
    train->add_option("--dump-dataset", dump_dataset, "also write N generated samples to dataset.bin");

    auto* sweep = app.add_subcommand("sweep", "analytical FLOPs, parameters and activation values along one axis");
    std::string sweep_axis, sweep_grid, sweep_kinds = "jar,concat,crossattn,perceiver,spatial", sweep_output;
    sweep->add_option("--axis", sweep_axis, "image_size, width, depth, iterations or tokens")->required();
    sweep->add_option("--grid", sweep_grid, "comma-separated axis values")->required();
    sweep->add_option("--kinds", sweep_kinds, "comma-separated fusion kinds")->capture_default_str();
    sweep->add_option("--output", sweep_output, "CSV file name inside --out-dir (default: stdout)");

    auto* ablate = app.add_subcommand("ablate", "train one reduced-budget model per grid value");
    std::string ablate_axis, ablate_grid, ablate_output;
    ablate->add_option("--axis", ablate_axis, "iterations, tokens, combination_mode, resample_mode or layers")
        ->required();
    ablate->add_option("--grid", ablate_grid, "comma-separated axis values")->required();
    ablate->add_option("--output", ablate_output, "CSV file name inside --out-dir (default: stdout)");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every model parameter");
    std::string corrupt;
    gradcheck->add_option("--corrupt-backward", corrupt, "test hook: scale the backward pass of this op by 1.5");

    for (auto* sub : {train, sweep, ablate, gradcheck}) {
        sub->allow_extras();
        sub->footer(footer);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kUsageError;
    }

    try {
        RunConfig config;
        if (!config_path.empty()) apply_config_file(config, config_path);
        apply_overrides(config, app.remaining(true));
        if (*seed_opt) config.seed = seed;
        if (*out_opt) config.out_dir = out_dir;
        if (*jobs_opt) config.jobs = jobs;
        config.validate();

        if (train->parsed()) return cmd_train(config, dump_dataset, out);
        if (sweep->parsed()) return cmd_sweep(config, sweep_axis, sweep_grid, sweep_kinds, sweep_output, out);
        if (ablate->parsed()) return cmd_ablate(config, ablate_axis, ablate_grid, ablate_output, out);
        const auto& gc = config.gradcheck;
        if (gc.text_tokens > kGradcheckTokenCap || gc.geometry.tokens() > kGradcheckTokenCap ||
            gc.model.latents > kGradcheckTokenCap) {
            throw ConfigError("gradcheck is limited to " + std::to_string(kGradcheckTokenCap) +
                              " text, image and latent tokens each");
        }
        return cmd_gradcheck(config, corrupt, out, err);
    } catch (const DivergenceError& e) {
        err << "error: " << e.what() << '\n';
        return kDiverged;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kUsageError;
    } catch (const GenerationError& e) {
        err << "error: " << e.what() << '\n';
        return kUsageError;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return kUsageError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kCheckFailed;
    }
}

}  // namespace jar::cli
