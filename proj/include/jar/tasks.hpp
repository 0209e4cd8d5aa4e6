#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

#include "jar/fusion.hpp"
#include "jar/sampler.hpp"
#include "jar/tensor.hpp"

namespace jar::tasks {

enum class TaskKind { Presence, Counting, SpatialRelation };

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view text);

// Question vocabulary: three query words followed by one token per object
// type.
inline constexpr std::size_t kAskPresence = 0;
inline constexpr std::size_t kAskCount = 1;
inline constexpr std::size_t kAskLeftOf = 2;
inline constexpr std::size_t kFirstObjectToken = 3;

struct TaskSpec {
    TaskKind kind = TaskKind::Presence;
    std::size_t grid_height = 8;
    std::size_t grid_width = 8;
    std::size_t channels = 16;
    std::size_t object_types = 4;
    std::size_t max_distractors = 3;
    std::size_t max_count = 3;  // counting answers 0..max_count
    double noise = 0.1;         // stddev of background noise on every cell
    std::uint64_t signature_seed = 1;

    std::size_t classes() const;
    std::size_t question_length() const;
    std::size_t vocab() const { return kFirstObjectToken + object_types; }
    std::size_t cells() const { return grid_height * grid_width; }
    fusion::ImageGeometry geometry() const { return {grid_height, grid_width, channels}; }
    // ConfigError on zero extents, fewer than two classes or an unusable
    // object vocabulary.
    void validate() const;
};

struct SyntheticSample {
    Tensor image;                       // [H x W x C]
    std::vector<std::size_t> question;  // token ids
    std::size_t answer = 0;
};

// Unit-norm channel vector of each object type; fixed by signature_seed.
std::vector<std::vector<double>> object_signatures(const TaskSpec& spec);

// n i.i.d. samples. Throws GenerationError if the objects a sample may need
// do not fit on the grid.
std::vector<SyntheticSample> generate(const TaskSpec& spec, std::size_t n, std::uint64_t seed);

// Dataset dump in the checkpoint format: "images" [n x H x W x C],
// "questions" [n x Q], "answers" [n].
void save_dataset(const std::filesystem::path& path, std::span<const SyntheticSample> samples);
std::vector<SyntheticSample> load_dataset(const std::filesystem::path& path);

// A fusion model plus token embeddings and one linear head per task.
class TaskModel {
public:
    static TaskModel create(fusion::FusionKind kind, const fusion::FusionConfig& config,
                            std::span<const TaskSpec> tasks, std::uint64_t seed);
    static TaskModel create(fusion::FusionKind kind, const fusion::FusionConfig& config, const TaskSpec& task,
                            std::uint64_t seed);

    // [1 x classes] logits of `task` for one sample.
    Tensor logits(const SyntheticSample& sample, std::size_t task = 0, bool zero_image = false) const;
    std::size_t predict(const SyntheticSample& sample, std::size_t task = 0, bool zero_image = false) const;

    fusion::FusionModel& fusion() { return fusion_; }
    const fusion::FusionModel& fusion() const { return fusion_; }
    ParamStore& params() { return fusion_.params(); }
    const ParamStore& params() const { return fusion_.params(); }
    std::span<const TaskSpec> tasks() const { return tasks_; }

private:
    explicit TaskModel(fusion::FusionModel model) : fusion_(std::move(model)) {}

    fusion::FusionModel fusion_;
    std::vector<TaskSpec> tasks_;
    Tensor embedding_;        // [V x D]
    Tensor text_positions_;   // [Q_max x D]
    std::vector<Tensor> head_weights_;  // [D x A_t]
    std::vector<Tensor> head_biases_;   // [A_t]
};

enum class Ablation {
    None,
    Image,  // every image is replaced by zeros
    Gate,   // alpha stays at 0, so no image information reaches the output
};

std::string_view to_string(Ablation ablation);
Ablation parse_ablation(std::string_view text);

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch = 16;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;
    std::size_t eval_every = 50;
    std::size_t eval_samples = 256;
    Ablation ablation = Ablation::None;
    // Stop once eval accuracy reaches this value; 0 disables.
    double target_accuracy = 0.0;
    sampler::SamplerConfig sampler;

    void validate() const;
};

class Adam {
public:
    Adam(const ParamStore& params, const TrainConfig& config);
    // Applies one update from the accumulated gradients. Parameters named in
    // `frozen` are left untouched.
    void step(ParamStore& params, std::span<const std::string> frozen = {});

private:
    double lr_, beta1_, beta2_, epsilon_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

inline constexpr std::string_view kLogCsvHeader = "step,loss,eval_acc,cum_flops";

struct LogRow {
    std::size_t step = 0;
    double loss = 0.0;
    double eval_accuracy = 0.0;  // most recent evaluation
    std::uint64_t cumulative_flops = 0;  // forward FLOPs of all training steps so far
};

struct TrainResult {
    std::vector<LogRow> log;
    double initial_accuracy = 0.0;
    double final_accuracy = 0.0;
    std::vector<double> task_accuracy;  // final, per task
};

struct TrainHooks {
    std::function<void(const LogRow&)> on_row;
    std::function<void(std::size_t step, const sampler::TaskMixState&)> on_mixture;
};

// Minimizes the batch-mean softmax cross-entropy. With several tasks each
// batch is composed by the loss-proportional sampler. Throws DivergenceError
// on a non-finite loss.
TrainResult train(TaskModel& model, const TrainConfig& config, const TrainHooks& hooks = {});
TrainResult train(fusion::FusionKind kind, const fusion::FusionConfig& fusion, const TaskSpec& task,
                  const TrainConfig& config);

// Fraction of argmax predictions equal to the answer.
double evaluate(const TaskModel& model, std::span<const SyntheticSample> samples, std::size_t task = 0,
                bool zero_image = false);

void write_log_csv(std::ostream& out, std::span<const LogRow> rows);
void write_log_row(std::ostream& out, const LogRow& row);

// Cumulative forward FLOPs at the first logged evaluation reaching
// `accuracy`; 0 if never reached.
std::uint64_t flops_to_accuracy(std::span<const LogRow> rows, double accuracy);

}  // namespace jar::tasks
