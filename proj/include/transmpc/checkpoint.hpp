#pragma once

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "transmpc/tensor.hpp"

namespace transmpc {

// Single-file container for named tensor collections. On disk:
//   [8-byte magic][u64 little-endian manifest size][manifest JSON][payload]
// The manifest lists entry name, shape, and byte offset into the payload;
// payloads are raw little-endian 64-bit floats. Round-trips are bit-exact.
struct Checkpoint {
  std::vector<std::pair<std::string, ad::Tensor>> entries;
  std::string meta_json = "{}";  // free-form metadata manifest

  const ad::Tensor* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace transmpc
