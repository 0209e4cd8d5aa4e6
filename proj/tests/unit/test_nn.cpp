#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "jar/errors.hpp"
#include "jar/grad_check.hpp"
#include "jar/nn.hpp"
#include "jar/ops.hpp"
#include "oracle.hpp"

using namespace jar;

namespace {

struct Fixture {
    ParamStore store;
    Rng rng;
    explicit Fixture(std::uint64_t seed) : rng(seed) {}
};

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& order) {
    const std::size_t cols = x.size(1);
    std::vector<double> out;
    for (auto r : order) out.insert(out.end(), x.data().begin() + r * cols, x.data().begin() + (r + 1) * cols);
    return Tensor::from_data(x.shape(), out);
}

}  // namespace

TEST_CASE("attention with a single key/value token broadcasts its projection") {
    Fixture f(1);
    auto params = nn::make_attention(f.store, "attn", 8, 2, f.rng);
    const Tensor queries = Tensor::randn({5, 8}, f.rng, 1.0);
    const Tensor kv = Tensor::randn({1, 8}, f.rng, 1.0);
    const Tensor out = nn::multi_head_attention(queries, kv, params);
    const auto expected = oracle::mm(oracle::mm(oracle::from(kv), oracle::from(params.value)), oracle::from(params.output));
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(out.at(r, c) - expected(0, c)) < 1e-12);
}

TEST_CASE("orthogonal queries attend uniformly") {
    Fixture f(2);
    auto params = nn::make_attention(f.store, "attn", 4, 1, f.rng);
    const Tensor eye = Tensor::from_data({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
    for (Tensor* w : {&params.query, &params.key, &params.value, &params.output})
        std::ranges::copy(eye.data(), w->mutable_data().begin());
    const Tensor queries = Tensor::from_data({1, 4}, {0, 0, 0, 1});
    const Tensor kv = Tensor::from_data({3, 4}, {1, 0, 0, 0, 0, 2, 0, 0, 3, -1, 0, 0});
    const Tensor out = nn::multi_head_attention(queries, kv, params);
    CHECK(out.at(0, 0) == doctest::Approx(4.0 / 3.0).epsilon(1e-14));
    CHECK(out.at(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
    CHECK(out.at(0, 3) == 0.0);
}

TEST_CASE("attention matches the dense loop oracle") {
    for (std::size_t heads : {1u, 2u, 4u}) {
        CAPTURE(heads);
        Fixture f(3 + heads);
        auto params = nn::make_attention(f.store, "attn", 4, heads, f.rng);
        const Tensor queries = Tensor::randn({2, 4}, f.rng, 1.0);
        const Tensor kv = Tensor::randn({3, 4}, f.rng, 1.0);
        const auto expected =
            oracle::attention(oracle::from(queries), oracle::from(kv), oracle::from(params.query),
                              oracle::from(params.key), oracle::from(params.value), oracle::from(params.output), heads);
        CHECK(oracle::max_abs_diff(expected, nn::multi_head_attention(queries, kv, params)) < 1e-10);
    }
}

TEST_CASE("attention output shape follows the query count only") {
    Fixture f(4);
    auto params = nn::make_attention(f.store, "attn", 8, 4, f.rng);
    for (std::size_t q : {1u, 3u, 17u})
        for (std::size_t m : {1u, 5u, 64u}) {
            const auto out = nn::multi_head_attention(Tensor::randn({q, 8}, f.rng, 1.0), Tensor::randn({m, 8}, f.rng, 1.0), params);
            CHECK(out.shape() == Shape{q, 8});
        }
    CHECK_THROWS_AS(nn::multi_head_attention(Tensor::zeros({2, 8}), Tensor::zeros({2, 6}), params), DimensionError);
    CHECK_THROWS_AS(nn::make_attention(f.store, "bad", 8, 3, f.rng), ConfigError);
}

TEST_CASE("attention is invariant to key/value row order") {
    Fixture f(5);
    auto params = nn::make_attention(f.store, "attn", 8, 2, f.rng);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t m = 2 + f.rng.below(10);
        const Tensor queries = Tensor::randn({3, 8}, f.rng, 1.0);
        const Tensor kv = Tensor::randn({m, 8}, f.rng, 1.0);
        std::vector<std::size_t> order(m);
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = m - 1; i > 0; --i) std::swap(order[i], order[f.rng.below(i + 1)]);
        const auto a = nn::multi_head_attention(queries, kv, params);
        const auto b = nn::multi_head_attention(queries, permute_rows(kv, order), params);
        for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) <= 1e-12);
    }
}

TEST_CASE("mlp examples") {
    Fixture f(6);
    auto params = nn::make_mlp(f.store, "mlp", 4, 4, f.rng);
    nn::fill(params.expand, 0.0);
    nn::fill(params.contract, 0.0);
    const auto zero = nn::mlp_forward(Tensor::randn({3, 4}, f.rng, 1.0), params);
    for (double v : zero.data()) CHECK(v == 0.0);

    auto unit = nn::make_mlp(f.store, "unit", 1, 1, f.rng);
    nn::fill(unit.expand, 1.0);
    nn::fill(unit.contract, 1.0);
    CHECK(nn::mlp_forward(Tensor::zeros({1, 1}), unit).item() == 0.0);

    auto random = nn::make_mlp(f.store, "rand", 4, 4, f.rng);
    for (Tensor* b : {&random.expand_bias, &random.contract_bias})
        for (auto& v : b->mutable_data()) v = f.rng.normal();
    const Tensor x = Tensor::randn({2, 4}, f.rng, 1.0);
    const auto expected = oracle::mlp(oracle::from(x), oracle::from(random.expand), oracle::vec(random.expand_bias),
                                      oracle::from(random.contract), oracle::vec(random.contract_bias));
    CHECK(oracle::max_abs_diff(expected, nn::mlp_forward(x, random)) < 1e-12);
    CHECK_THROWS_AS(nn::mlp_forward(Tensor::zeros({2, 3}), random), DimensionError);
}

TEST_CASE("transformer layer with zeroed weights is the identity") {
    Fixture f(7);
    auto layer = nn::make_transformer_layer(f.store, "layer", 8, 2, 4, f.rng);
    nn::zero_weights(layer);
    for (std::size_t q : {1u, 16u, 64u}) {
        const Tensor x = Tensor::randn({q, 8}, f.rng, 1.0);
        const Tensor y = nn::transformer_layer(x, layer);
        REQUIRE(y.shape() == Shape{q, 8});
        for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
    }
}

TEST_CASE("transformer layer matches a pre-norm loop oracle") {
    Fixture f(8);
    auto layer = nn::make_transformer_layer(f.store, "layer", 8, 2, 4, f.rng);
    for (auto& [name, t] : f.store) {
        Tensor handle = t;
        for (auto& v : handle.mutable_data()) v += 0.1 * f.rng.normal();
    }
    const Tensor x = Tensor::randn({5, 8}, f.rng, 1.0);
    const auto X = oracle::from(x);
    const auto ln1 = oracle::layer_norm(X, oracle::vec(layer.attn_norm.gain), oracle::vec(layer.attn_norm.bias));
    const auto h = oracle::plus(X, oracle::attention(ln1, ln1, oracle::from(layer.attn.query), oracle::from(layer.attn.key),
                                                     oracle::from(layer.attn.value), oracle::from(layer.attn.output), 2));
    const auto ln2 = oracle::layer_norm(h, oracle::vec(layer.mlp_norm.gain), oracle::vec(layer.mlp_norm.bias));
    const auto expected = oracle::plus(h, oracle::mlp(ln2, oracle::from(layer.mlp.expand), oracle::vec(layer.mlp.expand_bias),
                                                      oracle::from(layer.mlp.contract), oracle::vec(layer.mlp.contract_bias)));
    CHECK(oracle::max_abs_diff(expected, nn::transformer_layer(x, layer)) < 1e-10);
}

TEST_CASE("transformer layer gradients match finite differences") {
    Fixture f(9);
    auto layer = nn::make_transformer_layer(f.store, "layer", 8, 2, 4, f.rng);
    for (auto& [name, t] : f.store) {
        Tensor handle = t;
        for (auto& v : handle.mutable_data()) v += 0.1 * f.rng.normal();
    }
    Tensor x = f.store.add("input", Tensor::randn({4, 8}, f.rng, 1.0));
    const Tensor probe = Tensor::randn({4, 8}, f.rng, 1.0);
    const auto report = grad_check([&] { return sum(mul(nn::transformer_layer(x, layer), probe)); }, f.store, 1e-5, 1e-4);
    for (const auto& e : report.entries) {
        CAPTURE(e.name);
        CAPTURE(e.max_rel_error);
        CHECK(e.failures == 0);
    }
}
