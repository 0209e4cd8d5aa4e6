#include "jar/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "jar/errors.hpp"

namespace jar {

namespace {

constexpr const char* kMagic = "JARCKPT 1";

void write_le(std::ostream& out, double value) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(value);
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    out.write(bytes, 8);
}

double read_le(std::istream& in) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    if (!in) throw InputError("checkpoint payload truncated");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

}  // namespace

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write checkpoint " + path.string());
    out << kMagic << '\n' << tensors.size() << '\n';
    for (const auto& [name, tensor] : tensors) {
        out << name << ' ' << tensor.dim();
        for (auto extent : tensor.shape()) out << ' ' << extent;
        out << '\n';
    }
    out << "END\n";
    for (const auto& [name, tensor] : tensors) {
        for (double v : tensor.data()) write_le(out, v);
    }
    if (!out) throw InputError("failed while writing checkpoint " + path.string());
}

NamedTensors load_tensors(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open checkpoint " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kMagic) throw InputError(path.string() + ": bad checkpoint magic");
    if (!std::getline(in, line)) throw InputError(path.string() + ": missing tensor count");
    const std::size_t count = std::stoull(line);

    std::vector<std::pair<std::string, Shape>> header;
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(in, line)) throw InputError(path.string() + ": header ended early");
        std::istringstream fields(line);
        std::string name;
        std::size_t rank = 0;
        if (!(fields >> name >> rank)) throw InputError(path.string() + ": malformed header line '" + line + "'");
        Shape shape(rank);
        for (auto& extent : shape) {
            if (!(fields >> extent)) throw InputError(path.string() + ": malformed header line '" + line + "'");
        }
        header.emplace_back(std::move(name), std::move(shape));
    }
    if (!std::getline(in, line) || line != "END") throw InputError(path.string() + ": missing END marker");

    NamedTensors tensors;
    for (auto& [name, shape] : header) {
        std::vector<double> values(shape_numel(shape));
        for (auto& v : values) v = read_le(in);
        tensors.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(values)));
    }
    if (in.peek() != std::char_traits<char>::eof()) throw InputError(path.string() + ": trailing bytes after payload");
    return tensors;
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params) {
    save_tensors(path, NamedTensors(params.begin(), params.end()));
}

void load_checkpoint(const std::filesystem::path& path, ParamStore& params) {
    const NamedTensors loaded = load_tensors(path);
    if (loaded.size() != params.size()) {
        throw InputError(path.string() + ": holds " + std::to_string(loaded.size()) + " tensors, model has " +
                         std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        const auto& [name, value] = loaded[i];
        Tensor dst = params.entries()[i].second;
        if (params.entries()[i].first != name || dst.shape() != value.shape()) {
            throw InputError(path.string() + ": tensor '" + name + "' does not match model parameter '" +
                             params.entries()[i].first + "'");
        }
        std::ranges::copy(value.data(), dst.mutable_data().begin());
    }
}

}  // namespace jar
