#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace jar {

// FLOP convention shared by the instrumented ops and the closed-form cost
// model. A multiply-add is two FLOPs; plain elementwise arithmetic and tanh
// are one FLOP per element.
namespace flop_cost {
inline constexpr std::uint64_t kMultiplyAdd = 2;
inline constexpr std::uint64_t kElementwise = 1;
inline constexpr std::uint64_t kTanh = 1;
inline constexpr std::uint64_t kGelu = 8;
inline constexpr std::uint64_t kSoftmax = 5;
inline constexpr std::uint64_t kLayerNorm = 8;
}  // namespace flop_cost

// Accumulates FLOPs and produced activation values for one pass.
//
// `activation_values` counts every value an op writes that would have to be
// kept alive for the backward pass. Pure data movement (reshape, transpose,
// slicing, concatenation) is treated as a view and counts nothing.
struct OpCounter {
    std::uint64_t total_flops = 0;
    std::uint64_t activation_values = 0;
    std::map<std::string, std::uint64_t> per_op_kind;

    void record(const std::string& op, std::uint64_t flops, std::uint64_t values) {
        total_flops += flops;
        activation_values += values;
        per_op_kind[op] += flops;
    }

    void merge(const OpCounter& other) {
        total_flops += other.total_flops;
        activation_values += other.activation_values;
        for (const auto& [op, flops] : other.per_op_kind) per_op_kind[op] += flops;
    }

    std::uint64_t flops_of(const std::string& op) const {
        auto it = per_op_kind.find(op);
        return it == per_op_kind.end() ? 0 : it->second;
    }
};

// Routes op accounting on the current thread into `counter` for the scope's
// lifetime. Scopes nest and every open scope sees every record, so an outer
// counter totals what inner ones measured.
class FlopScope {
public:
    explicit FlopScope(OpCounter& counter);
    ~FlopScope();
    FlopScope(const FlopScope&) = delete;
    FlopScope& operator=(const FlopScope&) = delete;
};

namespace detail {
void record_op(const char* op, std::uint64_t flops, std::uint64_t values);
}

}  // namespace jar
