#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

namespace jar::sampler {

inline constexpr std::string_view kTrajectoryCsvHeader = "step,task,ema_loss,weight";

// w_s = L_s / sum(L), then floor projection. All-zero losses fall back to
// uniform weights. Throws InputError on negative or non-finite losses and
// ConfigError if tasks * floor > 1.
std::vector<double> compute_weights(std::span<const double> losses, double floor = 0.0);

// Raises every weight below `floor` to it and rescales the others so the
// total stays 1; repeats until no weight is below the floor.
std::vector<double> project_floor(std::span<const double> weights, double floor);

struct SamplerConfig {
    double decay = 0.99;  // gamma
    double floor = 0.0;   // per-task minimum weight
    std::size_t refresh_every = 1;  // steps between weight recomputations

    void validate(std::size_t tasks) const;
};

class TaskMixState {
public:
    TaskMixState(std::size_t tasks, SamplerConfig config = {});

    // ema <- decay * ema + (1 - decay) * loss. A task's first observation
    // seeds its average directly.
    void update_loss(std::size_t task, double loss);
    // Recomputes weights from the current averages. Called by update_loss
    // every `refresh_every` updates.
    void refresh();

    std::size_t tasks() const { return ema_.size(); }
    const SamplerConfig& config() const { return config_; }
    std::span<const double> ema_losses() const { return ema_; }
    std::span<const double> weights() const { return weights_; }
    bool observed(std::size_t task) const { return observed_.at(task); }

private:
    SamplerConfig config_;
    std::vector<double> ema_;
    std::vector<bool> observed_;
    std::vector<double> weights_;
    std::size_t updates_ = 0;
};

// Per-task sample counts summing to `batch`. With a positive floor every
// task first receives max(1, floor(floor * batch)) samples; the rest are a
// multinomial draw from the weight mass left above those minimums.
std::vector<std::size_t> sample_batch_composition(std::span<const double> weights, double floor, std::size_t batch,
                                                  std::uint64_t seed);
std::vector<std::size_t> sample_batch_composition(const TaskMixState& state, std::size_t batch, std::uint64_t seed);

// One row per task.
void write_trajectory_rows(std::ostream& out, std::size_t step, const TaskMixState& state);

}  // namespace jar::sampler
