#include "jar/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>

#include "jar/errors.hpp"
#include "jar/format.hpp"
#include "jar/rng.hpp"

namespace jar::sampler {

namespace {

void check_floor(std::size_t tasks, double floor) {
    if (!(floor >= 0.0) || !std::isfinite(floor)) throw ConfigError("sampler floor must be a finite value >= 0");
    if (static_cast<double>(tasks) * floor > 1.0 + 1e-12) {
        throw ConfigError("sampler floor " + format_double(floor) + " is infeasible for " + std::to_string(tasks) +
                          " tasks");
    }
}

}  // namespace

std::vector<double> project_floor(std::span<const double> weights, double floor) {
    check_floor(weights.size(), floor);
    std::vector<double> out(weights.begin(), weights.end());
    if (floor == 0.0) return out;
    std::vector<bool> clamped(out.size(), false);
    for (;;) {
        std::size_t n_clamped = 0;
        double free_mass = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (clamped[i]) {
                ++n_clamped;
            } else {
                free_mass += weights[i];
            }
        }
        const double remaining = 1.0 - static_cast<double>(n_clamped) * floor;
        bool changed = false;
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (clamped[i]) {
                out[i] = floor;
                continue;
            }
            out[i] = free_mass > 0.0 ? weights[i] * (remaining / free_mass) : 0.0;
            if (out[i] < floor) {
                clamped[i] = true;
                changed = true;
            }
        }
        if (!changed) return out;
    }
}

std::vector<double> compute_weights(std::span<const double> losses, double floor) {
    if (losses.empty()) throw InputError("compute_weights: at least one task required");
    double total = 0.0;
    for (double l : losses) {
        if (!std::isfinite(l) || l < 0.0) throw InputError("task losses must be finite and non-negative");
        total += l;
    }
    std::vector<double> w(losses.size());
    if (total == 0.0) {
        std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(losses.size()));
    } else {
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = losses[i] / total;
    }
    return project_floor(w, floor);
}

void SamplerConfig::validate(std::size_t tasks) const {
    if (!(decay >= 0.0 && decay < 1.0)) throw ConfigError("sampler decay must lie in [0, 1)");
    if (refresh_every == 0) throw ConfigError("sampler refresh_every must be positive");
    if (tasks == 0) throw ConfigError("sampler needs at least one task");
    check_floor(tasks, floor);
}

TaskMixState::TaskMixState(std::size_t tasks, SamplerConfig config)
    : config_(config), ema_(tasks, 0.0), observed_(tasks, false) {
    config_.validate(tasks);
    refresh();
}

void TaskMixState::update_loss(std::size_t task, double loss) {
    if (task >= ema_.size()) throw InputError("task id " + std::to_string(task) + " out of range");
    if (!std::isfinite(loss) || loss < 0.0) throw InputError("observed loss must be finite and non-negative");
    ema_[task] = observed_[task] ? config_.decay * ema_[task] + (1.0 - config_.decay) * loss : loss;
    observed_[task] = true;
    if (++updates_ % config_.refresh_every == 0) refresh();
}

void TaskMixState::refresh() {
    // Tasks without observations count as the hardest observed task.
    double hardest = 0.0;
    for (std::size_t i = 0; i < ema_.size(); ++i)
        if (observed_[i]) hardest = std::max(hardest, ema_[i]);
    std::vector<double> losses(ema_.size());
    for (std::size_t i = 0; i < ema_.size(); ++i) losses[i] = observed_[i] ? ema_[i] : hardest;
    weights_ = compute_weights(losses, config_.floor);
}

std::vector<std::size_t> sample_batch_composition(std::span<const double> weights, double floor, std::size_t batch,
                                                  std::uint64_t seed) {
    check_floor(weights.size(), floor);
    const std::size_t tasks = weights.size();
    std::vector<std::size_t> counts(tasks, 0);
    if (floor > 0.0) {
        if (batch < tasks) {
            throw ConfigError("batch size " + std::to_string(batch) + " cannot honour floors for " +
                              std::to_string(tasks) + " tasks");
        }
        const auto minimum =
            std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(floor * static_cast<double>(batch))));
        std::fill(counts.begin(), counts.end(), minimum);
    }
    const std::size_t reserved = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    if (reserved > batch) throw ConfigError("floor minimums exceed the batch size");
    const std::size_t rest = batch - reserved;
    if (rest == 0) return counts;

    std::vector<double> residual(tasks);
    for (std::size_t i = 0; i < tasks; ++i)
        residual[i] = std::max(0.0, weights[i] * static_cast<double>(batch) - static_cast<double>(counts[i]));
    double total = std::accumulate(residual.begin(), residual.end(), 0.0);
    if (total <= 0.0) {
        residual.assign(weights.begin(), weights.end());
        total = std::accumulate(residual.begin(), residual.end(), 0.0);
    }

    Rng rng(seed);
    for (std::size_t draw = 0; draw < rest; ++draw) {
        double u = rng.uniform() * total;
        std::size_t pick = tasks - 1;
        for (std::size_t i = 0; i < tasks; ++i) {
            if (u < residual[i]) {
                pick = i;
                break;
            }
            u -= residual[i];
        }
        while (residual[pick] == 0.0 && pick > 0) --pick;  // rounding at the upper end
        ++counts[pick];
    }
    return counts;
}

std::vector<std::size_t> sample_batch_composition(const TaskMixState& state, std::size_t batch, std::uint64_t seed) {
    return sample_batch_composition(state.weights(), state.config().floor, batch, seed);
}

void write_trajectory_rows(std::ostream& out, std::size_t step, const TaskMixState& state) {
    for (std::size_t t = 0; t < state.tasks(); ++t) {
        out << step << ',' << t << ',' << format_double(state.ema_losses()[t]) << ','
            << format_double(state.weights()[t]) << '\n';
    }
}

}  // namespace jar::sampler
