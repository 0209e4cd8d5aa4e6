#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "jar/errors.hpp"
#include "jar/tasks.hpp"

using namespace jar;
using namespace jar::tasks;
using fusion::FusionKind;

namespace {

// Which object type sits in each cell of a noise-free image, or -1.
std::vector<int> decode_cells(const SyntheticSample& s, const TaskSpec& spec) {
    const auto signatures = object_signatures(spec);
    const std::size_t C = spec.channels;
    std::vector<int> out(spec.cells(), -1);
    for (std::size_t cell = 0; cell < spec.cells(); ++cell) {
        for (std::size_t t = 0; t < signatures.size(); ++t) {
            bool match = true;
            for (std::size_t c = 0; c < C; ++c) match = match && s.image.data()[cell * C + c] == signatures[t][c];
            if (match) out[cell] = static_cast<int>(t);
        }
    }
    return out;
}

fusion::FusionConfig tiny_fusion() {
    fusion::FusionConfig c;
    c.latents = 4;
    c.iterations = 2;
    c.total_layers = 2;
    c.width = 8;
    c.heads = 2;
    c.mlp_ratio = 2;
    return c;
}

TaskSpec tiny_task(TaskKind kind = TaskKind::Presence) {
    TaskSpec s;
    s.kind = kind;
    s.grid_height = s.grid_width = 3;
    s.channels = 4;
    return s;
}

TrainConfig tiny_train(std::size_t steps = 3) {
    TrainConfig t;
    t.steps = steps;
    t.batch = 4;
    t.eval_every = 2;
    t.eval_samples = 8;
    t.seed = 5;
    return t;
}

}  // namespace

TEST_CASE("generated answers follow the generator rule") {
    for (auto kind : {TaskKind::Presence, TaskKind::Counting, TaskKind::SpatialRelation}) {
        CAPTURE(to_string(kind));
        TaskSpec spec;
        spec.kind = kind;
        spec.noise = 0.0;
        const auto samples = generate(spec, 300, 41);
        for (const auto& s : samples) {
            const auto cells = decode_cells(s, spec);
            CHECK(s.question.size() == spec.question_length());
            const int target = static_cast<int>(s.question[1] - kFirstObjectToken);
            if (kind == TaskKind::Presence) {
                const bool present = std::find(cells.begin(), cells.end(), target) != cells.end();
                CHECK(s.answer == (present ? 1u : 0u));
            } else if (kind == TaskKind::Counting) {
                CHECK(s.answer == static_cast<std::size_t>(std::count(cells.begin(), cells.end(), target)));
            } else {
                const int other = static_cast<int>(s.question[2] - kFirstObjectToken);
                REQUIRE(std::count(cells.begin(), cells.end(), target) == 1);
                REQUIRE(std::count(cells.begin(), cells.end(), other) == 1);
                const auto col = [&](int type) {
                    return static_cast<std::size_t>(std::find(cells.begin(), cells.end(), type) - cells.begin()) %
                           spec.grid_width;
                };
                CHECK(s.answer == (col(target) < col(other) ? 1u : 0u));
            }
        }
    }
}

TEST_CASE("counting covers every answer including three") {
    TaskSpec spec;
    spec.kind = TaskKind::Counting;
    spec.noise = 0.0;
    const auto samples = generate(spec, 200, 42);
    std::vector<int> seen(spec.classes(), 0);
    for (const auto& s : samples) ++seen[s.answer];
    for (int v : seen) CHECK(v > 0);
}

TEST_CASE("presence labels are balanced over 10k samples") {
    TaskSpec spec;
    spec.grid_height = spec.grid_width = 2;
    spec.channels = 2;
    const auto samples = generate(spec, 10000, 43);
    double positive = 0;
    for (const auto& s : samples) positive += static_cast<double>(s.answer);
    CHECK(positive / 10000.0 >= 0.45);
    CHECK(positive / 10000.0 <= 0.55);
}

TEST_CASE("generation is reproducible and validated") {
    const auto a = generate(TaskSpec{}, 5, 44), b = generate(TaskSpec{}, 5, 44);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(a[i].answer == b[i].answer);
        CHECK(a[i].question == b[i].question);
        CHECK(std::equal(a[i].image.data().begin(), a[i].image.data().end(), b[i].image.data().begin()));
    }
    TaskSpec crowded;
    crowded.grid_height = crowded.grid_width = 1;
    CHECK_THROWS_AS(generate(crowded, 1, 1), GenerationError);
    CHECK_THROWS_AS(generate(TaskSpec{}, 0, 1), InputError);
    TaskSpec one_type;
    one_type.object_types = 1;
    CHECK_THROWS_AS(generate(one_type, 1, 1), ConfigError);
    CHECK_THROWS_AS(parse_task_kind("colour"), ConfigError);
}

TEST_CASE("dataset dump round trip") {
    const auto samples = generate(tiny_task(TaskKind::SpatialRelation), 6, 45);
    const auto path = std::filesystem::temp_directory_path() / "jar_dataset_test.bin";
    save_dataset(path, samples);
    const auto back = load_dataset(path);
    REQUIRE(back.size() == samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        CHECK(back[i].answer == samples[i].answer);
        CHECK(back[i].question == samples[i].question);
        CHECK(back[i].image.shape() == samples[i].image.shape());
        CHECK(std::equal(back[i].image.data().begin(), back[i].image.data().end(), samples[i].image.data().begin()));
    }
    std::filesystem::remove(path);
}

TEST_CASE("task models produce class logits for every fusion kind") {
    const auto samples = generate(tiny_task(TaskKind::Counting), 2, 46);
    for (auto kind : fusion::kAllKinds) {
        CAPTURE(fusion::to_string(kind));
        const auto model = TaskModel::create(kind, tiny_fusion(), tiny_task(TaskKind::Counting), 1);
        CHECK(model.logits(samples[0]).shape() == Shape{1, 4});
        CHECK(model.predict(samples[1]) < 4);
    }
}

TEST_CASE("evaluate examples") {
    const TaskSpec spec = tiny_task();
    auto model = TaskModel::create(FusionKind::Jar, tiny_fusion(), spec, 2);
    const auto eval = generate(spec, 400, 47);
    const double chance = evaluate(model, eval);
    CHECK(std::abs(chance - 0.5) <= 3.0 * std::sqrt(0.25 / 400.0));
    CHECK(evaluate(model, eval) == chance);

    // A head bias that dominates every logit memorizes a single answer.
    const auto one = std::span(eval).first(1);
    Tensor bias = model.params().get("task.head.0.bias");
    bias.mutable_data()[one[0].answer] = 1e6;
    CHECK(evaluate(model, one) == 1.0);
}

TEST_CASE("zero learning rate leaves accuracy unchanged") {
    TrainConfig t = tiny_train(4);
    t.learning_rate = 0.0;
    const auto result = train(FusionKind::Jar, tiny_fusion(), tiny_task(), t);
    CHECK(result.final_accuracy == result.initial_accuracy);
}

TEST_CASE("training log rows, CSV format and determinism") {
    const TrainConfig t = tiny_train(5);
    const auto a = train(FusionKind::Jar, tiny_fusion(), tiny_task(), t);
    const auto b = train(FusionKind::Jar, tiny_fusion(), tiny_task(), t);
    REQUIRE(a.log.size() == 5);
    std::ostringstream csv_a, csv_b;
    write_log_csv(csv_a, a.log);
    write_log_csv(csv_b, b.log);
    CHECK(csv_a.str() == csv_b.str());
    CHECK(csv_a.str().rfind("step,loss,eval_acc,cum_flops\n1,", 0) == 0);

    // Every step costs the same forward FLOPs.
    const auto per_step = a.log[0].cumulative_flops;
    CHECK(per_step > 0);
    for (const auto& row : a.log) CHECK(row.cumulative_flops == per_step * row.step);
}

TEST_CASE("flops_to_accuracy picks the first qualifying row") {
    const std::vector<LogRow> rows{{1, 0.7, 0.5, 10}, {2, 0.6, 0.8, 20}, {3, 0.5, 0.9, 30}};
    CHECK(flops_to_accuracy(rows, 0.75) == 20);
    CHECK(flops_to_accuracy(rows, 0.95) == 0);
}

TEST_CASE("training errors") {
    auto model = TaskModel::create(FusionKind::Jar, tiny_fusion(), tiny_task(), 3);
    Tensor embedding = model.params().get("task.embedding");
    TrainHooks poison;
    poison.on_row = [&](const LogRow&) {
        std::fill(embedding.mutable_data().begin(), embedding.mutable_data().end(), NAN);
    };
    try {
        train(model, tiny_train(), poison);
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(e.step() == 2);
    }

    TrainConfig gate = tiny_train();
    gate.ablation = Ablation::Gate;
    CHECK_THROWS_AS(train(FusionKind::Concat, tiny_fusion(), tiny_task(), gate), ConfigError);
    TrainConfig bad = tiny_train();
    bad.batch = 0;
    CHECK_THROWS_AS(train(FusionKind::Jar, tiny_fusion(), tiny_task(), bad), ConfigError);
}

TEST_CASE("gate ablation keeps alpha at zero") {
    auto model = TaskModel::create(FusionKind::Jar, tiny_fusion(), tiny_task(), 4);
    TrainConfig t = tiny_train();
    t.ablation = Ablation::Gate;
    train(model, t);
    CHECK(model.params().get("fusion.alpha").item() == 0.0);
    CHECK(model.params().get("fusion.beta").item() != 0.0);
}

TEST_CASE("first Adam step moves each weight by the learning rate against its gradient sign") {
    ParamStore store;
    Tensor w = store.add("w", Tensor::from_data({3}, {1.0, -2.0, 0.5}));
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    Adam adam(store, cfg);
    const std::vector<double> g{0.3, -4.0, 0.0};
    std::copy(g.begin(), g.end(), w.mutable_grad().begin());
    adam.step(store);
    for (std::size_t i = 0; i < 3; ++i) {
        const double expected = (i == 0 ? 1.0 : i == 1 ? -2.0 : 0.5) - 0.1 * g[i] / (std::abs(g[i]) + 1e-8);
        CHECK(std::abs(w.data()[i] - expected) < 1e-15);
    }
}

TEST_CASE("multi-task training routes batches through the sampler") {
    const TaskSpec mix[] = {tiny_task(TaskKind::Presence), tiny_task(TaskKind::Counting)};
    auto model = TaskModel::create(FusionKind::Jar, tiny_fusion(), mix, 6);
    TrainConfig t = tiny_train(4);
    t.sampler.floor = 0.25;
    std::size_t calls = 0;
    TrainHooks hooks;
    hooks.on_mixture = [&](std::size_t, const sampler::TaskMixState& state) {
        ++calls;
        CHECK(state.tasks() == 2);
        CHECK(std::abs(state.weights()[0] + state.weights()[1] - 1.0) < 1e-12);
        CHECK(state.weights()[0] >= 0.25);
    };
    const auto result = train(model, t, hooks);
    CHECK(calls == 4);
    CHECK(result.task_accuracy.size() == 2);

    TaskSpec other = tiny_task();
    other.grid_width = 4;
    const TaskSpec mismatched[] = {tiny_task(), other};
    CHECK_THROWS_AS(TaskModel::create(FusionKind::Jar, tiny_fusion(), mismatched, 1), ConfigError);
}
