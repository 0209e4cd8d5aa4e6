#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "jar/param_store.hpp"

// Checkpoint layout (see docs/checkpoint.md):
//
//   JARCKPT 1\n
//   <tensor count>\n
//   <name> <rank> <extent>...\n      one line per tensor, in order
//   END\n
//   <little-endian float64 payload, tensors concatenated in header order>
namespace jar {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params);
// Loads values into `params`; names and shapes must match exactly.
void load_checkpoint(const std::filesystem::path& path, ParamStore& params);

}  // namespace jar
