#include "jar/param_store.hpp"

#include <algorithm>

#include "jar/errors.hpp"

namespace jar {

Tensor ParamStore::add(const std::string& name, Tensor value) {
    if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
        throw ConfigError("parameter name '" + name + "' must be non-empty and free of whitespace");
    }
    if (index_.contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    value.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, value);
    return value;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[it->second].second;
}

std::size_t ParamStore::total_values() const {
    std::size_t total = 0;
    for (const auto& [name, tensor] : entries_) total += tensor.numel();
    return total;
}

void ParamStore::zero_grad() {
    for (auto& [name, tensor] : entries_) tensor.zero_grad();
}

void ParamStore::copy_values_from(const ParamStore& other) {
    if (other.size() != size()) throw DimensionError("copy_values_from: parameter counts differ");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        auto& [name, dst] = entries_[i];
        const auto& [other_name, src] = other.entries_[i];
        if (name != other_name || dst.shape() != src.shape()) {
            throw DimensionError("copy_values_from: mismatch at '" + name + "' vs '" + other_name + "'");
        }
        std::ranges::copy(src.data(), dst.mutable_data().begin());
    }
}

}  // namespace jar
