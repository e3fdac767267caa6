#pragma once

#include <string>
#include <utility>
#include <vector>

#include "focc/nn.hpp"

namespace focc {

// Checkpoint container: magic "FOCKPT1\n", then per entry
//   u32 LE name length, UTF-8 name, u32 LE rank, u32 LE extents[rank],
//   f64 LE values (row-major).
// Entries appear in registry order; buffers (running stats) are included.

void save_checkpoint(const std::string &path, const ParamRegistry &reg);

// Fills registry tensors from the file. Every record must match a registry
// entry by name and shape. With allow_missing_params=false every registry
// entry must be present in the file.
size_t load_checkpoint(const std::string &path, ParamRegistry &reg,
                       bool allow_missing_params = false);

// Raw listing for inspection tools.
std::vector<std::pair<std::string, Tensor>> read_checkpoint_entries(const std::string &path);

}  // namespace focc
