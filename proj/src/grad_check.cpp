#include "jar/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "jar/errors.hpp"
#include "jar/ops.hpp"
#include "jar/rng.hpp"

namespace jar {

bool GradCheckReport::passed() const {
    return std::ranges::all_of(entries, [](const GradCheckEntry& e) { return e.failures == 0; });
}

const GradCheckEntry* GradCheckReport::worst() const {
    if (entries.empty()) return nullptr;
    return &*std::ranges::max_element(entries, {}, &GradCheckEntry::max_rel_error);
}

GradCheckReport grad_check(const std::function<Tensor()>& loss, ParamStore& params, double h, double tolerance) {
    if (!(h > 0.0 && h <= 1e-2)) throw ContractError("grad_check: step h must lie in (0, 1e-2]");

    params.zero_grad();
    const Tensor value = loss();
    value.backward();
    const double repeat = loss().item();
    if (value.item() != repeat) {
        throw DeterminismError("grad_check: loss changed between identical evaluations");
    }

    GradCheckReport report;
    report.tolerance = tolerance;
    for (const auto& [name, param] : params) {
        Tensor handle = param;
        std::vector<double> analytic(handle.numel(), 0.0);
        if (handle.has_grad()) std::ranges::copy(handle.grad(), analytic.begin());

        GradCheckEntry entry;
        entry.name = name;
        auto values = handle.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double plus = loss().item();
            values[i] = saved - h;
            const double minus = loss().item();
            values[i] = saved;
            const double numeric = (plus - minus) / (2.0 * h);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
            const double rel = std::abs(analytic[i] - numeric) / denom;
            if (!(rel <= tolerance)) ++entry.failures;
            const double ranked = std::isnan(rel) ? INFINITY : rel;
            if (i == 0 || ranked > entry.max_rel_error) {
                entry.max_rel_error = ranked;
                entry.worst_index = i;
                entry.analytic = analytic[i];
                entry.numeric = numeric;
            }
        }
        report.entries.push_back(entry);
    }
    params.zero_grad();
    return report;
}

namespace {

using Loss = std::function<Tensor()>;
// Registers parameters in the store and returns a loss over them.
using OpProbe = std::function<Loss(ParamStore&, Rng&)>;

Tensor param(ParamStore& store, Rng& rng, Shape shape, double offset = 0.0) {
    Tensor t = Tensor::randn(std::move(shape), rng, 1.0);
    for (auto& v : t.mutable_data()) v += offset;
    return store.add("p" + std::to_string(store.size()), t);
}

// loss = sum(op(params) * fixed random weights)
template <typename Op>
OpProbe weighted(std::vector<Shape> shapes, Op op) {
    return [shapes = std::move(shapes), op](ParamStore& store, Rng& rng) -> Loss {
        std::vector<Tensor> inputs;
        for (const auto& shape : shapes) inputs.push_back(param(store, rng, shape));
        const Tensor weights = Tensor::randn(op(inputs).shape(), rng, 1.0);
        return [inputs, weights, op] { return sum(mul(op(inputs), weights)); };
    };
}

using Inputs = const std::vector<Tensor>&;

std::vector<std::pair<std::string, OpProbe>> op_probes() {
    std::vector<std::pair<std::string, OpProbe>> probes;
    probes.emplace_back("sum", [](ParamStore& s, Rng& r) -> Loss {
        const Tensor x = param(s, r, {2, 3});
        return [x] { return sum(x); };
    });
    probes.emplace_back("mul", [](ParamStore& s, Rng& r) -> Loss {
        const Tensor x = param(s, r, {2, 3}), y = param(s, r, {2, 3});
        return [x, y] { return sum(mul(x, y)); };
    });
    probes.emplace_back("matmul", weighted({{2, 3}, {3, 4}}, [](Inputs in) { return matmul(in[0], in[1]); }));
    probes.emplace_back("transpose", weighted({{2, 3}}, [](Inputs in) { return transpose(in[0]); }));
    probes.emplace_back("reshape", weighted({{2, 3}}, [](Inputs in) { return reshape(in[0], {3, 2}); }));
    probes.emplace_back("add", weighted({{2, 3}, {2, 3}}, [](Inputs in) { return add(in[0], in[1]); }));
    probes.emplace_back("add_row", weighted({{2, 3}, {3}}, [](Inputs in) { return add_row(in[0], in[1]); }));
    probes.emplace_back("scale", weighted({{2, 3}, {1}}, [](Inputs in) { return scale(in[0], in[1]); }));
    probes.emplace_back("tanh", weighted({{2, 3}}, [](Inputs in) { return tanh(in[0]); }));
    probes.emplace_back("gelu", weighted({{2, 3}}, [](Inputs in) { return gelu(in[0]); }));
    probes.emplace_back("softmax", weighted({{2, 3}}, [](Inputs in) { return softmax_rows(in[0]); }));
    probes.emplace_back("layer_norm",
                        weighted({{2, 4}, {4}, {4}}, [](Inputs in) { return layer_norm(in[0], in[1], in[2]); }));
    probes.emplace_back("slice", weighted({{2, 4}}, [](Inputs in) { return slice_cols(in[0], 1, 3); }));
    probes.emplace_back("concat", weighted({{2, 3}, {1, 3}}, [](Inputs in) { return concat_rows(in); }));
    probes.emplace_back("mean_rows", weighted({{3, 2}}, [](Inputs in) { return mean_rows(in[0]); }));
    probes.emplace_back("gather", weighted({{3, 2}}, [](Inputs in) {
        const std::size_t ids[] = {2, 0, 2};
        return gather_rows(in[0], ids);
    }));
    probes.emplace_back("cross_entropy", [](ParamStore& s, Rng& r) -> Loss {
        const Tensor logits = param(s, r, {2, 3});
        return [logits] {
            const std::size_t labels[] = {1, 0};
            return cross_entropy(logits, labels);
        };
    });
    return probes;
}

}  // namespace

std::vector<std::string> failing_ops(std::uint64_t seed, double tolerance) {
    std::vector<std::string> failing;
    for (const auto& [name, build] : op_probes()) {
        Rng rng(seed);
        ParamStore store;
        const Loss loss = build(store, rng);
        if (!grad_check(loss, store, 1e-6, tolerance).passed()) {
            failing.push_back(name);
            // A broken reduction would taint every later probe.
            if (name == "sum" || name == "mul") break;
        }
    }
    return failing;
}

}  // namespace jar
