#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "jar/tensor.hpp"

namespace jar {

// Named trainable tensors in insertion order.
class ParamStore {
public:
    using Entry = std::pair<std::string, Tensor>;

    // Registers `value` (marked requires_grad) and returns a handle sharing
    // its storage. Names must be unique.
    Tensor add(const std::string& name, Tensor value);

    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.contains(name); }

    std::size_t size() const { return entries_.size(); }
    std::size_t total_values() const;
    const std::vector<Entry>& entries() const { return entries_; }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    void zero_grad();
    // Overwrites values from a store with identical names and shapes.
    void copy_values_from(const ParamStore& other);

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace jar
