#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "jar/param_store.hpp"

namespace jar {

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t failures = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 0.0;

    bool passed() const;
    // Entry with the largest relative error; nullptr when empty.
    const GradCheckEntry* worst() const;
};

// Compares backprop gradients of the scalar `loss` against central
// differences (f(x+h) - f(x-h)) / 2h for every element of every parameter.
// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
// Throws DeterminismError when two evaluations at the same point differ.
GradCheckReport grad_check(const std::function<Tensor()>& loss, ParamStore& params, double h = 1e-5,
                           double tolerance = 1e-4);

// Gradient-checks each differentiable op in isolation on small random
// inputs. Returns the names of ops whose backward disagrees, checking the
// reduction ops (sum, then mul) first since every other probe relies on them.
std::vector<std::string> failing_ops(std::uint64_t seed = 0, double tolerance = 1e-5);

}  // namespace jar
