#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "clner/num/tensor.hpp"

namespace clner::num {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Flat parameter archive. All integers and floats are little-endian:
//
//   magic      8 bytes  "CLNRCKPT"
//   version    u32      1
//   count      u64      number of entries
//   entries, in write order:
//     name_len u32, name bytes (UTF-8, no terminator)
//     rank     u32, dims u64[rank]
//     values   f64[product(dims)], row-major
void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

// Copies archived values into same-named parameters. Every parameter must be
// present with an identical shape; extra archive entries are an error too.
void restore_parameters(const NamedTensors& archive, const NamedTensors& params);

}  // namespace clner::num
