#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "jar/cli.hpp"
#include "jar/costmodel.hpp"
#include "jar/errors.hpp"
#include "jar/fusion.hpp"
#include "jar/sampler.hpp"
#include "jar/tasks.hpp"

namespace py = pybind11;
using namespace jar;
using fusion::FusionKind;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor::from_data(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
    Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

py::dict report_dict(const cost::CostReport& r) {
    py::dict d;
    d["flops"] = r.flops;
    d["params"] = r.params;
    d["peak_values"] = r.peak_activation_values;
    return d;
}

cost::ArchSpec make_spec(FusionKind kind, std::uint64_t width, std::uint64_t heads, std::uint64_t layers,
                         std::uint64_t text_tokens, std::uint64_t grid_height, std::uint64_t grid_width,
                         std::uint64_t channels, std::uint64_t latents, std::uint64_t iterations, std::uint64_t mlp_ratio,
                         fusion::CombinationMode combination, bool position_embedding) {
    cost::ArchSpec s;
    s.kind = kind;
    s.width = width;
    s.heads = heads;
    s.total_layers = layers;
    s.text_tokens = text_tokens;
    s.grid_height = grid_height;
    s.grid_width = grid_width;
    s.channels = channels;
    s.latents = latents;
    s.iterations = iterations;
    s.mlp_ratio = mlp_ratio;
    s.combination = combination;
    s.position_embedding = position_embedding;
    return s;
}

#define JAR_SPEC_ARGS                                                                                               \
    py::arg("kind") = "jar", py::arg("width") = 768, py::arg("heads") = 12, py::arg("layers") = 32,                 \
    py::arg("text_tokens") = 16, py::arg("grid_height") = 14, py::arg("grid_width") = 14, py::arg("channels") = 768, \
    py::arg("latents") = 64, py::arg("iterations") = 4, py::arg("mlp_ratio") = 4, py::arg("combination") = "weighted", \
    py::arg("position_embedding") = true

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "JAR multimodal fusion, FLOPs cost model and loss-proportional task sampler";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
    py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
    py::register_exception<GenerationError>(m, "GenerationError", PyExc_ValueError);
    py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);

    m.def(
        "flops_total",
        [](const std::string& kind, std::uint64_t width, std::uint64_t heads, std::uint64_t layers,
           std::uint64_t text_tokens, std::uint64_t grid_height, std::uint64_t grid_width, std::uint64_t channels,
           std::uint64_t latents, std::uint64_t iterations, std::uint64_t mlp_ratio, const std::string& combination,
           bool position_embedding) {
            return report_dict(cost::flops_total(make_spec(fusion::parse_fusion_kind(kind), width, heads, layers,
                                                           text_tokens, grid_height, grid_width, channels, latents,
                                                           iterations, mlp_ratio,
                                                           fusion::parse_combination_mode(combination),
                                                           position_embedding)));
        },
        JAR_SPEC_ARGS, "Analytical forward FLOPs, parameter count and activation values of one architecture.");

    m.def(
        "sweep",
        [](const std::string& axis, const std::vector<std::uint64_t>& grid, const std::vector<std::string>& kinds) {
            std::vector<FusionKind> parsed;
            for (const auto& k : kinds) parsed.push_back(fusion::parse_fusion_kind(k));
            std::ostringstream csv;
            cost::write_sweep_csv(csv, cost::sweep(cost::parse_sweep_axis(axis), grid, cost::ArchSpec{}, parsed));
            return csv.str();
        },
        py::arg("axis"), py::arg("grid"), py::arg("kinds") = std::vector<std::string>{"jar", "concat"},
        "Sweep CSV over one axis of the default architecture.");

    m.def(
        "compute_weights",
        [](const std::vector<double>& losses, double floor) { return sampler::compute_weights(losses, floor); },
        py::arg("losses"), py::arg("floor") = 0.0, "Loss-proportional task weights with an optional per-task floor.");
    m.def(
        "sample_batch_composition",
        [](const std::vector<double>& weights, double floor, std::size_t batch, std::uint64_t seed) {
            return sampler::sample_batch_composition(weights, floor, batch, seed);
        },
        py::arg("weights"), py::arg("floor"), py::arg("batch"), py::arg("seed"));

    py::class_<fusion::FusionModel>(m, "FusionModel")
        .def(py::init([](const std::string& kind, std::size_t latents, std::size_t iterations, std::size_t layers,
                         std::size_t width, std::size_t heads, std::size_t mlp_ratio, std::size_t grid_height,
                         std::size_t grid_width, std::size_t channels, const std::string& combination,
                         std::uint64_t seed) {
                 fusion::FusionConfig c;
                 c.latents = latents;
                 c.iterations = iterations;
                 c.total_layers = layers;
                 c.width = width;
                 c.heads = heads;
                 c.mlp_ratio = mlp_ratio;
                 c.combination = fusion::parse_combination_mode(combination);
                 return fusion::FusionModel::create(fusion::parse_fusion_kind(kind), c,
                                                    {grid_height, grid_width, channels}, seed);
             }),
             py::arg("kind") = "jar", py::arg("latents") = 8, py::arg("iterations") = 2, py::arg("layers") = 4,
             py::arg("width") = 16, py::arg("heads") = 2, py::arg("mlp_ratio") = 4, py::arg("grid_height") = 4,
             py::arg("grid_width") = 4, py::arg("channels") = 8, py::arg("combination") = "weighted",
             py::arg("seed") = 0)
        .def(
            "forward",
            [](const fusion::FusionModel& model, const Array& text, const Array& image) {
                const auto out = model.forward({to_tensor(text), to_tensor(image)});
                return py::make_tuple(to_array(out.features), out.flops.total_flops);
            },
            py::arg("text"), py::arg("image"), "Fused features and the FLOPs recorded during the pass.")
        .def_property_readonly("kind", [](const fusion::FusionModel& m) { return std::string(fusion::to_string(m.kind())); })
        .def("parameter_count", [](const fusion::FusionModel& m) { return m.params().total_values(); });

    m.def(
        "generate",
        [](const std::string& kind, std::size_t n, std::uint64_t seed, std::size_t grid) {
            tasks::TaskSpec spec;
            spec.kind = tasks::parse_task_kind(kind);
            spec.grid_height = spec.grid_width = grid;
            const auto samples = tasks::generate(spec, n, seed);
            Array images({n, grid, grid, spec.channels});
            py::array_t<std::int64_t> questions({n, spec.question_length()});
            py::array_t<std::int64_t> answers(static_cast<py::ssize_t>(n));
            double* img = images.mutable_data();
            auto q = questions.mutable_unchecked<2>();
            auto a = answers.mutable_unchecked<1>();
            for (std::size_t i = 0; i < n; ++i) {
                img = std::copy(samples[i].image.data().begin(), samples[i].image.data().end(), img);
                for (std::size_t j = 0; j < samples[i].question.size(); ++j)
                    q(i, j) = static_cast<std::int64_t>(samples[i].question[j]);
                a(i) = static_cast<std::int64_t>(samples[i].answer);
            }
            return py::make_tuple(images, questions, answers);
        },
        py::arg("kind") = "presence", py::arg("n") = 16, py::arg("seed") = 0, py::arg("grid") = 8,
        "Synthetic samples as (images, questions, answers) arrays.");

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::vector<std::string> full{"jarfuse"};
            full.insert(full.end(), args.begin(), args.end());
            std::vector<const char*> argv;
            for (const auto& a : full) argv.push_back(a.c_str());
            std::ostringstream out, err;
            int code;
            {
                py::gil_scoped_release release;
                code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs a jarfuse command line; returns (exit_code, stdout, stderr).");
}
