#include "jar/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>

#include "jar/checkpoint.hpp"
#include "jar/errors.hpp"
#include "jar/format.hpp"
#include "jar/ops.hpp"
#include "jar/rng.hpp"

namespace jar::tasks {

namespace {

constexpr double kEmbeddingInitStd = 1.0;
constexpr double kTextPositionInitStd = 0.02;

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    Rng rng(seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
    const std::uint64_t base = rng.next_u64();
    Rng mixed(base + index);
    return mixed.next_u64();
}

// Picks `count` distinct cells out of `cells`.
std::vector<std::size_t> distinct_cells(Rng& rng, std::size_t cells, std::size_t count) {
    std::vector<std::size_t> all(cells);
    std::iota(all.begin(), all.end(), 0);
    for (std::size_t i = 0; i < count; ++i) std::swap(all[i], all[i + rng.below(cells - i)]);
    all.resize(count);
    return all;
}

std::size_t other_type(Rng& rng, std::size_t types, std::span<const std::size_t> excluded) {
    for (;;) {
        const std::size_t t = rng.below(types);
        if (std::find(excluded.begin(), excluded.end(), t) == excluded.end()) return t;
    }
}

}  // namespace

std::string_view to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::Presence: return "presence";
        case TaskKind::Counting: return "counting";
        case TaskKind::SpatialRelation: return "spatial-relation";
    }
    return "?";
}

TaskKind parse_task_kind(std::string_view text) {
    for (auto kind : {TaskKind::Presence, TaskKind::Counting, TaskKind::SpatialRelation})
        if (text == to_string(kind)) return kind;
    throw ConfigError("unknown task '" + std::string(text) + "' (valid: presence, counting, spatial-relation)");
}

std::string_view to_string(Ablation ablation) {
    switch (ablation) {
        case Ablation::None: return "none";
        case Ablation::Image: return "image";
        case Ablation::Gate: return "gate";
    }
    return "?";
}

Ablation parse_ablation(std::string_view text) {
    for (auto a : {Ablation::None, Ablation::Image, Ablation::Gate})
        if (text == to_string(a)) return a;
    throw ConfigError("unknown ablation '" + std::string(text) + "' (valid: none, image, gate)");
}

std::size_t TaskSpec::classes() const { return kind == TaskKind::Counting ? max_count + 1 : 2; }

std::size_t TaskSpec::question_length() const { return kind == TaskKind::SpatialRelation ? 3 : 2; }

void TaskSpec::validate() const {
    if (grid_height == 0 || grid_width == 0 || channels == 0) throw ConfigError("task grid extents must be positive");
    if (object_types == 0) throw ConfigError("task needs at least one object type");
    if (classes() < 2) throw ConfigError("task needs at least two classes");
    if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("task noise must be finite and >= 0");
    if (kind == TaskKind::SpatialRelation && object_types < 2) {
        throw ConfigError("spatial-relation needs at least two object types");
    }
    if (kind != TaskKind::SpatialRelation && max_distractors > 0 && object_types < 2) {
        throw ConfigError("distractors need a second object type");
    }
}

std::vector<std::vector<double>> object_signatures(const TaskSpec& spec) {
    Rng rng(spec.signature_seed);
    std::vector<std::vector<double>> out(spec.object_types, std::vector<double>(spec.channels));
    for (auto& sig : out) {
        double norm = 0.0;
        do {
            norm = 0.0;
            for (auto& v : sig) {
                v = rng.normal();
                norm += v * v;
            }
        } while (norm == 0.0);
        norm = std::sqrt(norm);
        for (auto& v : sig) v /= norm;
    }
    return out;
}

std::vector<SyntheticSample> generate(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
    spec.validate();
    if (n == 0) throw InputError("generate: n must be at least 1");
    const std::size_t cells = spec.cells();
    std::size_t needed = spec.max_distractors;
    switch (spec.kind) {
        case TaskKind::Presence: needed += 1; break;
        case TaskKind::Counting: needed += spec.max_count; break;
        case TaskKind::SpatialRelation: needed += 2; break;
    }
    if (needed > cells) {
        throw GenerationError("task needs up to " + std::to_string(needed) + " objects but the grid has " +
                              std::to_string(cells) + " cells");
    }
    if (spec.kind == TaskKind::SpatialRelation && spec.grid_width < 2) {
        throw GenerationError("spatial-relation needs a grid at least two cells wide");
    }

    const auto signatures = object_signatures(spec);
    const std::size_t C = spec.channels;
    Rng rng(seed);
    std::vector<SyntheticSample> out;
    out.reserve(n);
    for (std::size_t s = 0; s < n; ++s) {
        std::vector<double> image(cells * C);
        for (auto& v : image) v = rng.normal(0.0, spec.noise);
        std::vector<bool> taken(cells, false);
        auto place_at = [&](std::size_t cell, std::size_t type) {
            taken[cell] = true;
            for (std::size_t c = 0; c < C; ++c) image[cell * C + c] += signatures[type][c];
        };
        auto place = [&](std::size_t type) {
            std::size_t cell = rng.below(cells);
            while (taken[cell]) cell = rng.below(cells);
            place_at(cell, type);
        };

        SyntheticSample sample;
        std::vector<std::size_t> excluded;
        switch (spec.kind) {
            case TaskKind::Presence: {
                const std::size_t target = rng.below(spec.object_types);
                sample.answer = rng.below(2);
                sample.question = {kAskPresence, kFirstObjectToken + target};
                excluded = {target};
                if (sample.answer == 1) place(target);
                break;
            }
            case TaskKind::Counting: {
                const std::size_t target = rng.below(spec.object_types);
                sample.answer = rng.below(spec.max_count + 1);
                sample.question = {kAskCount, kFirstObjectToken + target};
                excluded = {target};
                for (std::size_t i = 0; i < sample.answer; ++i) place(target);
                break;
            }
            case TaskKind::SpatialRelation: {
                const std::size_t a = rng.below(spec.object_types);
                std::size_t b = rng.below(spec.object_types - 1);
                if (b >= a) ++b;
                sample.answer = rng.below(2);
                sample.question = {kAskLeftOf, kFirstObjectToken + a, kFirstObjectToken + b};
                excluded = {a, b};
                // Distinct columns so "left of" is never ambiguous.
                const auto cols = distinct_cells(rng, spec.grid_width, 2);
                const std::size_t left = std::min(cols[0], cols[1]), right = std::max(cols[0], cols[1]);
                const std::size_t col_a = sample.answer == 1 ? left : right;
                const std::size_t col_b = sample.answer == 1 ? right : left;
                place_at(rng.below(spec.grid_height) * spec.grid_width + col_a, a);
                place_at(rng.below(spec.grid_height) * spec.grid_width + col_b, b);
                break;
            }
        }

        if (spec.object_types > excluded.size()) {
            const std::size_t distractors = rng.below(spec.max_distractors + 1);
            for (std::size_t d = 0; d < distractors; ++d) place(other_type(rng, spec.object_types, excluded));
        }

        sample.image = Tensor::from_data({spec.grid_height, spec.grid_width, C}, std::move(image));
        out.push_back(std::move(sample));
    }
    return out;
}


void save_dataset(const std::filesystem::path& path, std::span<const SyntheticSample> samples) {
    if (samples.empty()) throw InputError("save_dataset: no samples");
    const Shape image_shape = samples.front().image.shape();
    const std::size_t q = samples.front().question.size();
    std::vector<double> images, questions, answers;
    for (const auto& s : samples) {
        if (s.image.shape() != image_shape || s.question.size() != q) {
            throw DimensionError("save_dataset: samples must share image shape and question length");
        }
        images.insert(images.end(), s.image.data().begin(), s.image.data().end());
        for (auto id : s.question) questions.push_back(static_cast<double>(id));
        answers.push_back(static_cast<double>(s.answer));
    }
    Shape stacked{samples.size()};
    stacked.insert(stacked.end(), image_shape.begin(), image_shape.end());
    save_tensors(path, {{"images", Tensor::from_data(stacked, std::move(images))},
                        {"questions", Tensor::from_data({samples.size(), q}, std::move(questions))},
                        {"answers", Tensor::from_data({samples.size()}, std::move(answers))}});
}

std::vector<SyntheticSample> load_dataset(const std::filesystem::path& path) {
    const auto tensors = load_tensors(path);
    if (tensors.size() != 3 || tensors[0].first != "images" || tensors[1].first != "questions" ||
        tensors[2].first != "answers") {
        throw InputError("'" + path.string() + "' is not a dataset dump");
    }
    const Tensor& images = tensors[0].second;
    const Tensor& questions = tensors[1].second;
    const Tensor& answers = tensors[2].second;
    const std::size_t n = answers.numel();
    if (images.dim() != 4 || images.size(0) != n || questions.dim() != 2 || questions.size(0) != n) {
        throw InputError("'" + path.string() + "' has inconsistent dataset extents");
    }
    const Shape image_shape{images.size(1), images.size(2), images.size(3)};
    const std::size_t per_image = shape_numel(image_shape), q = questions.size(1);
    std::vector<SyntheticSample> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i].image = Tensor::from_data(
            image_shape, std::vector<double>(images.data().begin() + i * per_image,
                                             images.data().begin() + (i + 1) * per_image));
        for (std::size_t j = 0; j < q; ++j) out[i].question.push_back(static_cast<std::size_t>(questions.data()[i * q + j]));
        out[i].answer = static_cast<std::size_t>(answers.data()[i]);
    }
    return out;
}

TaskModel TaskModel::create(fusion::FusionKind kind, const fusion::FusionConfig& config,
                            std::span<const TaskSpec> tasks, std::uint64_t seed) {
    if (tasks.empty()) throw ConfigError("TaskModel needs at least one task");
    for (const auto& t : tasks) {
        t.validate();
        if (t.grid_height != tasks[0].grid_height || t.grid_width != tasks[0].grid_width ||
            t.channels != tasks[0].channels) {
            throw ConfigError("all tasks of a mixture must share the image grid");
        }
    }
    TaskModel model(fusion::FusionModel::create(kind, config, tasks[0].geometry(), seed));
    model.tasks_.assign(tasks.begin(), tasks.end());

    std::size_t vocab = 0, question = 0;
    for (const auto& t : tasks) {
        vocab = std::max(vocab, t.vocab());
        question = std::max(question, t.question_length());
    }
    const std::size_t D = config.width;
    Rng rng(derive_seed(seed, 7, 0));
    ParamStore& store = model.params();
    model.embedding_ = store.add("task.embedding", Tensor::randn({vocab, D}, rng, kEmbeddingInitStd));
    model.text_positions_ = store.add("task.text_positions", Tensor::randn({question, D}, rng, kTextPositionInitStd));
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const std::string prefix = "task.head." + std::to_string(i);
        model.head_weights_.push_back(store.add(
            prefix + ".weight", Tensor::randn({D, tasks[i].classes()}, rng, 1.0 / std::sqrt(static_cast<double>(D)))));
        model.head_biases_.push_back(store.add(prefix + ".bias", Tensor::zeros({tasks[i].classes()})));
    }
    return model;
}

TaskModel TaskModel::create(fusion::FusionKind kind, const fusion::FusionConfig& config, const TaskSpec& task,
                            std::uint64_t seed) {
    return create(kind, config, std::span(&task, 1), seed);
}

Tensor TaskModel::logits(const SyntheticSample& sample, std::size_t task, bool zero_image) const {
    if (task >= tasks_.size()) throw InputError("task index " + std::to_string(task) + " out of range");
    const std::size_t q = sample.question.size();
    if (q == 0 || q > text_positions_.size(0)) throw DimensionError("question length does not fit the model");
    for (auto id : sample.question)
        if (id >= embedding_.size(0)) throw InputError("question token " + std::to_string(id) + " outside vocabulary");
    std::vector<std::size_t> slots(q);
    std::iota(slots.begin(), slots.end(), 0);
    const Tensor text = add(gather_rows(embedding_, sample.question), gather_rows(text_positions_, slots));
    const Tensor image = zero_image ? Tensor::zeros(sample.image.shape()) : sample.image;
    const Tensor fused = fusion_.forward({text, image}).features;
    return add_row(matmul(mean_rows(fused), head_weights_[task]), head_biases_[task]);
}

std::size_t TaskModel::predict(const SyntheticSample& sample, std::size_t task, bool zero_image) const {
    const Tensor l = logits(sample, task, zero_image);
    const auto d = l.data();
    return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
}

void TrainConfig::validate() const {
    if (steps == 0 || batch == 0 || eval_every == 0 || eval_samples == 0) {
        throw ConfigError("steps, batch, eval_every and eval_samples must be positive");
    }
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
    if (!(target_accuracy >= 0.0 && target_accuracy <= 1.0)) throw ConfigError("target accuracy must lie in [0, 1]");
}

Adam::Adam(const ParamStore& params, const TrainConfig& config)
    : lr_(config.learning_rate), beta1_(config.beta1), beta2_(config.beta2), epsilon_(config.epsilon) {
    for (const auto& [name, t] : params) {
        m_.emplace_back(t.numel(), 0.0);
        v_.emplace_back(t.numel(), 0.0);
    }
}

void Adam::step(ParamStore& params, std::span<const std::string> frozen) {
    ++t_;
    const double correction1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double correction2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::size_t i = 0;
    for (const auto& [name, param] : params) {
        const std::size_t index = i++;
        if (std::find(frozen.begin(), frozen.end(), name) != frozen.end()) continue;
        Tensor t = param;
        if (!t.has_grad()) continue;
        auto value = t.mutable_data();
        const auto grad = t.grad();
        auto& m = m_[index];
        auto& v = v_[index];
        for (std::size_t k = 0; k < value.size(); ++k) {
            m[k] = beta1_ * m[k] + (1.0 - beta1_) * grad[k];
            v[k] = beta2_ * v[k] + (1.0 - beta2_) * grad[k] * grad[k];
            value[k] -= lr_ * (m[k] / correction1) / (std::sqrt(v[k] / correction2) + epsilon_);
        }
    }
}

double evaluate(const TaskModel& model, std::span<const SyntheticSample> samples, std::size_t task, bool zero_image) {
    if (samples.empty()) return 0.0;
    std::size_t correct = 0;
    for (const auto& s : samples) correct += model.predict(s, task, zero_image) == s.answer ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainResult train(TaskModel& model, const TrainConfig& config, const TrainHooks& hooks) {
    config.validate();
    const auto tasks = model.tasks();
    const std::size_t T = tasks.size();
    std::vector<std::string> frozen;
    if (config.ablation == Ablation::Gate) {
        if (!model.params().contains("fusion.alpha")) {
            throw ConfigError("gate ablation needs a model with a gated fusion block");
        }
        Tensor alpha = model.params().get("fusion.alpha");
        alpha.mutable_data()[0] = 0.0;
        frozen.push_back("fusion.alpha");
    }
    const bool zero_image = config.ablation == Ablation::Image;

    std::vector<std::vector<SyntheticSample>> eval_sets;
    for (std::size_t t = 0; t < T; ++t) eval_sets.push_back(generate(tasks[t], config.eval_samples, derive_seed(config.seed, 1, t)));
    auto evaluate_all = [&](std::size_t step, std::vector<double>* per_task) {
        double total = 0.0;
        try {
            for (std::size_t t = 0; t < T; ++t) {
                const double acc = evaluate(model, eval_sets[t], t, zero_image);
                if (per_task) per_task->push_back(acc);
                total += acc;
            }
        } catch (const ContractError& e) {
            throw DivergenceError(step, "evaluation failed at step " + std::to_string(step) + ": " + e.what());
        }
        return total / static_cast<double>(T);
    };

    TrainResult result;
    result.initial_accuracy = evaluate_all(0, nullptr);
    double accuracy = result.initial_accuracy;
    sampler::TaskMixState mixture(T, config.sampler);
    Adam optimizer(model.params(), config);
    std::uint64_t cumulative = 0;

    for (std::size_t step = 1; step <= config.steps; ++step) {
        std::vector<std::size_t> counts{config.batch};
        if (T > 1) counts = sampler::sample_batch_composition(mixture, config.batch, derive_seed(config.seed, 2, step));

        OpCounter forward;
        Tensor loss;
        std::vector<double> task_loss(T, -1.0);
        try {
            FlopScope scope(forward);
            for (std::size_t t = 0; t < T; ++t) {
                if (counts[t] == 0) continue;
                const auto batch = generate(tasks[t], counts[t], derive_seed(config.seed, 3, step * T + t));
                std::vector<Tensor> rows;
                std::vector<std::size_t> answers;
                for (const auto& s : batch) {
                    rows.push_back(model.logits(s, t, zero_image));
                    answers.push_back(s.answer);
                }
                const Tensor ce = cross_entropy(concat_rows(rows), answers);
                task_loss[t] = ce.item();
                const Tensor share = scale(ce, static_cast<double>(counts[t]) / static_cast<double>(config.batch));
                loss = loss.defined() ? add(loss, share) : share;
            }
        } catch (const ContractError& e) {
            throw DivergenceError(step, "training diverged at step " + std::to_string(step) + ": " + e.what());
        }
        if (!std::isfinite(loss.item())) {
            throw DivergenceError(step, "training diverged at step " + std::to_string(step) + ": loss is not finite");
        }
        model.params().zero_grad();
        loss.backward();
        optimizer.step(model.params(), frozen);
        cumulative += forward.total_flops;

        for (std::size_t t = 0; t < T; ++t)
            if (task_loss[t] >= 0.0) mixture.update_loss(t, task_loss[t]);

        const bool last = step == config.steps;
        if (step % config.eval_every == 0 || last) accuracy = evaluate_all(step, nullptr);
        const LogRow row{step, loss.item(), accuracy, cumulative};
        result.log.push_back(row);
        if (hooks.on_row) hooks.on_row(row);
        if (hooks.on_mixture) hooks.on_mixture(step, mixture);
        if (config.target_accuracy > 0.0 && accuracy >= config.target_accuracy) break;
    }
    result.final_accuracy = evaluate_all(result.log.back().step, &result.task_accuracy);
    return result;
}

TrainResult train(fusion::FusionKind kind, const fusion::FusionConfig& fusion, const TaskSpec& task,
                  const TrainConfig& config) {
    TaskModel model = TaskModel::create(kind, fusion, task, config.seed);
    return train(model, config);
}

void write_log_row(std::ostream& out, const LogRow& row) {
    out << row.step << ',' << format_double(row.loss) << ',' << format_double(row.eval_accuracy) << ','
        << row.cumulative_flops << '\n';
}

void write_log_csv(std::ostream& out, std::span<const LogRow> rows) {
    out << kLogCsvHeader << '\n';
    for (const auto& row : rows) write_log_row(out, row);
}

std::uint64_t flops_to_accuracy(std::span<const LogRow> rows, double accuracy) {
    for (const auto& row : rows)
        if (row.eval_accuracy >= accuracy) return row.cumulative_flops;
    return 0;
}

}  // namespace jar::tasks
