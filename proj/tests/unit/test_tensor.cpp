#include <doctest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <functional>
#include <vector>

#include "jar/checkpoint.hpp"
#include "jar/errors.hpp"
#include "jar/flops.hpp"
#include "jar/grad_check.hpp"
#include "jar/ops.hpp"
#include "jar/param_store.hpp"

using namespace jar;

namespace {

Tensor weighted_sum(const Tensor& x, const Tensor& weights) { return sum(mul(x, weights)); }

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("matmul examples") {
    const Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    const Tensor col = Tensor::from_data({2, 1}, {3, 5});
    CHECK(values(matmul(eye, col)) == std::vector<double>{3, 5});

    const Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    const Tensor b = Tensor::from_data({2, 1}, {5, 6});
    CHECK(values(matmul(a, b)) == std::vector<double>{17, 39});

    OpCounter counter;
    {
        FlopScope scope(counter);
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({3, 4}));
    }
    CHECK(counter.total_flops == 48);
    CHECK(counter.flops_of("matmul") == 48);
}

TEST_CASE("matmul rejects mismatched inner extents and names both shapes") {
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string what = e.what();
        CHECK(what.find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("softmax examples") {
    auto uniform = softmax_rows(Tensor::from_data({1, 3}, {0, 0, 0}));
    for (double v : uniform.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    auto saturated = softmax_rows(Tensor::from_data({1, 3}, {1000, 0, 0}));
    CHECK(saturated.data()[0] == doctest::Approx(1.0));
    CHECK(saturated.data()[1] < 1e-300);

    // e^1 / (e^1 + e^2) evaluated by hand
    auto pair = softmax_rows(Tensor::from_data({1, 2}, {1, 2}));
    CHECK(std::abs(pair.data()[0] - 0.26894) < 1e-5);
    CHECK(std::abs(pair.data()[1] - 0.73106) < 1e-5);

    CHECK_THROWS_AS(softmax_rows(Tensor::from_data({1, 2}, {NAN, 0})), ContractError);
}

TEST_CASE("softmax rows sum to one for random finite inputs") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t rows = 1 + rng.below(6), cols = 1 + rng.below(40);
        const double spread = std::pow(10.0, rng.uniform(-2.0, 3.0));
        const auto y = softmax_rows(Tensor::randn({rows, cols}, rng, spread));
        for (std::size_t r = 0; r < rows; ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                CHECK(y.at(r, c) >= 0.0);
                total += y.at(r, c);
            }
            CHECK(std::abs(total - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("layer_norm examples") {
    const Tensor ones = Tensor::full({4}, 1.0), zeros = Tensor::zeros({4});
    const auto flat = layer_norm(Tensor::full({1, 4}, 3.5), ones, zeros);
    for (double v : flat.data()) CHECK(v == 0.0);

    const auto y = layer_norm(Tensor::from_data({1, 2}, {1, 3}), Tensor::full({2}, 1.0), Tensor::zeros({2}));
    CHECK(std::abs(y.data()[0] + 1.0) < 1e-4);
    CHECK(std::abs(y.data()[1] - 1.0) < 1e-4);

    Rng rng(3);
    const Tensor bias = Tensor::from_data({4}, {0.5, -1, 2, 0});
    const auto collapsed = layer_norm(Tensor::randn({3, 4}, rng, 1.0), Tensor::zeros({4}), bias);
    for (std::size_t i = 0; i < collapsed.numel(); ++i) CHECK(collapsed.data()[i] == bias.data()[i % 4]);

    CHECK_THROWS_AS(layer_norm(Tensor::zeros({2, 3}), ones, zeros), DimensionError);
}

TEST_CASE("backward examples") {
    Tensor x = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
    sum(x).backward();
    CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1, 1, 1});

    Tensor v = Tensor::from_data({2}, {1, 2}, true);
    sum(mul(v, v)).backward();
    CHECK(std::vector<double>(v.grad().begin(), v.grad().end()) == std::vector<double>{2, 4});

    CHECK_THROWS_AS(add(v, v).backward(), ContractError);
}

TEST_CASE("gradients accumulate over fan-out") {
    Tensor x = Tensor::from_data({1, 3}, {0.5, -1, 2}, true);
    const Tensor y = add(x, mul(x, x));
    sum(add(y, x)).backward();
    for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 + 2.0 * x.data()[i]));
}

TEST_CASE("grad_check examples") {
    ParamStore store;
    Tensor theta = store.add("theta", Tensor::scalar(3.0));
    auto report = grad_check([&] { return mul(theta, theta); }, store, 1e-5, 1e-6);
    REQUIRE(report.entries.size() == 1);
    CHECK(report.entries[0].analytic == doctest::Approx(6.0));
    CHECK(std::abs(report.entries[0].numeric - 6.0) < 1e-8);
    CHECK(report.passed());

    // Closed form for softmax cross-entropy: d/dz = softmax(z) - onehot.
    ParamStore logits_store;
    Tensor logits = logits_store.add("logits", Tensor::from_data({1, 3}, {0.3, -1.2, 2.0}));
    const std::size_t label[] = {1};
    cross_entropy(logits, label).backward();
    double total = 0.0;
    for (double z : logits.data()) total += std::exp(z);
    for (std::size_t j = 0; j < 3; ++j) {
        const double expected = std::exp(logits.data()[j]) / total - (j == 1 ? 1.0 : 0.0);
        CHECK(std::abs(logits.grad()[j] - expected) < 1e-15);
    }
    auto ce_report = grad_check([&] { return cross_entropy(logits, label); }, logits_store, 1e-5, 1e-6);
    CHECK(ce_report.passed());
    CHECK(ce_report.worst()->max_rel_error < 1e-6);
}

TEST_CASE("grad_check rejects bad steps and nondeterministic losses") {
    ParamStore store;
    Tensor theta = store.add("theta", Tensor::scalar(1.0));
    CHECK_THROWS_AS(grad_check([&] { return mul(theta, theta); }, store, 0.0), ContractError);
    CHECK_THROWS_AS(grad_check([&] { return mul(theta, theta); }, store, 0.1), ContractError);
    int calls = 0;
    CHECK_THROWS_AS(grad_check([&] { return scale(theta, static_cast<double>(++calls)); }, store), DeterminismError);
}

TEST_CASE("every differentiable op passes a random-input gradient check at 1e-5") {
    Rng rng(2024);
    ParamStore store;
    Tensor a = store.add("a", Tensor::randn({3, 4}, rng, 1.0));
    Tensor b = store.add("b", Tensor::randn({3, 4}, rng, 1.0));
    Tensor w = store.add("w", Tensor::randn({4, 5}, rng, 1.0));
    Tensor row = store.add("row", Tensor::randn({4}, rng, 1.0));
    Tensor s = store.add("s", Tensor::scalar(0.7));
    Tensor table = store.add("table", Tensor::randn({6, 4}, rng, 1.0));
    const Tensor r34 = Tensor::randn({3, 4}, rng, 1.0);
    const Tensor r35 = Tensor::randn({3, 5}, rng, 1.0);
    const Tensor r43 = Tensor::randn({4, 3}, rng, 1.0);
    const Tensor r14 = Tensor::randn({1, 4}, rng, 1.0);
    const Tensor r65 = Tensor::randn({6, 5}, rng, 1.0);
    const std::size_t ids[] = {2, 0, 2};
    const std::size_t labels[] = {4, 0, 2};

    const std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
        {"matmul", [&] { return weighted_sum(matmul(a, w), r35); }},
        {"transpose", [&] { return weighted_sum(transpose(a), r43); }},
        {"reshape", [&] { return weighted_sum(reshape(a, {4, 3}), r43); }},
        {"add", [&] { return weighted_sum(add(a, b), r34); }},
        {"mul", [&] { return weighted_sum(mul(a, b), r34); }},
        {"add_row", [&] { return weighted_sum(add_row(a, row), r34); }},
        {"scale", [&] { return weighted_sum(scale(a, s), r34); }},
        {"tanh", [&] { return weighted_sum(tanh(a), r34); }},
        {"gelu", [&] { return weighted_sum(gelu(a), r34); }},
        {"softmax", [&] { return weighted_sum(softmax_rows(a), r34); }},
        {"layer_norm", [&] { return weighted_sum(layer_norm(a, row, add_row(Tensor::zeros({4}), row)), r34); }},
        {"slice_concat", [&] {
             const Tensor parts[] = {slice_cols(a, 2, 4), slice_cols(b, 0, 1), slice_cols(a, 0, 2)};
             const Tensor rows[] = {concat_cols(parts), concat_cols(parts)};
             return weighted_sum(concat_rows(rows), r65);
         }},
        {"mean_rows", [&] { return weighted_sum(mean_rows(a), r14); }},
        {"gather", [&] { return weighted_sum(gather_rows(table, ids), r34); }},
        {"cross_entropy", [&] { return cross_entropy(matmul(a, w), labels); }},
    };
    for (const auto& [name, loss] : cases) {
        CAPTURE(name);
        const auto report = grad_check(loss, store, 1e-5, 1e-5);
        for (const auto& entry : report.entries) {
            CAPTURE(entry.name);
            CHECK(entry.failures == 0);
        }
    }
}

TEST_CASE("FLOP accounting composes and replays exactly") {
    Rng rng(1);
    const Tensor x = Tensor::randn({5, 8}, rng, 1.0);
    const Tensor w = Tensor::randn({8, 8}, rng, 1.0);
    const Tensor g = Tensor::full({8}, 1.0), z = Tensor::zeros({8});
    auto composite = [&] { return softmax_rows(layer_norm(matmul(x, w), g, z)); };

    OpCounter once;
    {
        FlopScope scope(once);
        composite();
    }
    std::uint64_t by_kind = 0;
    for (const auto& [op, flops] : once.per_op_kind) by_kind += flops;
    CHECK(once.total_flops == by_kind);
    CHECK(once.total_flops == 2 * 5 * 8 * 8 + 8 * 40 + 5 * 40);

    OpCounter twice;
    {
        FlopScope scope(twice);
        composite();
        composite();
    }
    CHECK(twice.total_flops == 2 * once.total_flops);
    CHECK(twice.activation_values == 2 * once.activation_values);
}

TEST_CASE("nested FlopScopes both observe inner ops") {
    OpCounter outer, inner;
    FlopScope a(outer);
    matmul(Tensor::zeros({1, 2}), Tensor::zeros({2, 1}));
    {
        FlopScope b(inner);
        matmul(Tensor::zeros({1, 2}), Tensor::zeros({2, 1}));
    }
    CHECK(inner.total_flops == 4);
    CHECK(outer.total_flops == 8);
}

TEST_CASE("matmul is associative within 1e-9 on bounded entries") {
    Rng rng(77);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t m = 1 + rng.below(8), k = 1 + rng.below(8), n = 1 + rng.below(8), p = 1 + rng.below(8);
        auto bounded = [&](std::size_t r, std::size_t c) {
            std::vector<double> v(r * c);
            for (auto& e : v) e = rng.uniform(-1e3, 1e3);
            return Tensor::from_data({r, c}, v);
        };
        const Tensor A = bounded(m, k), B = bounded(k, n), C = bounded(n, p);
        const Tensor left = matmul(matmul(A, B), C), right = matmul(A, matmul(B, C));
        for (std::size_t i = 0; i < left.numel(); ++i) {
            const double scale_ref = std::max(1.0, std::abs(left.data()[i]));
            CHECK(std::abs(left.data()[i] - right.data()[i]) / scale_ref <= 1e-9);
        }
    }
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(Tensor::zeros({0, 3}), DimensionError);
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    sum(scale(x, 2.0)).backward();
    CHECK(x.grad().size() == x.numel());
    CHECK(x.shape() == Shape{2, 3});
}

TEST_CASE("param store keeps insertion order and unique names") {
    ParamStore store;
    store.add("b", Tensor::zeros({2}));
    store.add("a", Tensor::zeros({3}));
    CHECK(store.entries()[0].first == "b");
    CHECK(store.entries()[1].first == "a");
    CHECK(store.total_values() == 5);
    CHECK(store.get("a").requires_grad());
    CHECK_THROWS_AS(store.add("a", Tensor::zeros({1})), ConfigError);
    CHECK_THROWS_AS(store.add("has space", Tensor::zeros({1})), ConfigError);
}

TEST_CASE("checkpoint round-trips values bit-exactly") {
    Rng rng(9);
    ParamStore store;
    store.add("w", Tensor::randn({3, 5}, rng, 1.0));
    store.add("bias", Tensor::from_data({2}, {-0.0, 1e-300}));
    store.add("cube", Tensor::randn({2, 2, 2}, rng, 100.0));
    const auto path = std::filesystem::temp_directory_path() / "jar_ckpt_roundtrip.bin";
    save_checkpoint(path, store);

    ParamStore restored;
    restored.add("w", Tensor::zeros({3, 5}));
    restored.add("bias", Tensor::zeros({2}));
    restored.add("cube", Tensor::zeros({2, 2, 2}));
    load_checkpoint(path, restored);
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto a = store.entries()[i].second.data(), b = restored.entries()[i].second.data();
        for (std::size_t j = 0; j < a.size(); ++j) {
            CHECK(std::bit_cast<std::uint64_t>(a[j]) == std::bit_cast<std::uint64_t>(b[j]));
        }
    }

    ParamStore wrong;
    wrong.add("w", Tensor::zeros({5, 3}));
    wrong.add("bias", Tensor::zeros({2}));
    wrong.add("cube", Tensor::zeros({2, 2, 2}));
    CHECK_THROWS_AS(load_checkpoint(path, wrong), InputError);
    std::filesystem::remove(path);
}

TEST_CASE("op fault localization names exactly the corrupted op") {
    CHECK(jar::failing_ops().empty());
    for (const char* op : {"gelu", "matmul", "layer_norm", "sum", "mul"}) {
        CAPTURE(op);
        jar::debug::corrupt_backward(op);
        const auto failing = jar::failing_ops();
        jar::debug::corrupt_backward("");
        CHECK(failing == std::vector<std::string>{op});
    }
}
