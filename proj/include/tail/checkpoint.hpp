#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "tail/tensor.hpp"

namespace tail {

using TensorMap = std::map<std::string, Tensor>;

inline constexpr int kFormatVersion = 1;

// Hex SHA-256 over (name, shape, little-endian f64 bytes) in sorted name order.
std::string digest(const TensorMap& tensors);

// A tensor directory holds manifest.json and tensors.bin. `meta` is merged
// into the manifest; `tensor_meta` adds fields to individual tensor entries.
void save_tensors(const std::filesystem::path& dir, const TensorMap& tensors, const nlohmann::json& meta = {},
                  const std::map<std::string, nlohmann::json>& tensor_meta = {});

struct LoadedTensors {
  TensorMap tensors;
  nlohmann::json manifest;
};

// Throws DataError on missing files, bad manifests, unsupported versions or
// truncated data.
LoadedTensors load_tensors(const std::filesystem::path& dir);

}  // namespace tail
