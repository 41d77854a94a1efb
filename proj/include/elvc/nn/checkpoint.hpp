#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "elvc/nn/parameters.hpp"

namespace elvc::nn {

/// Versioned checkpoint container:
///   "ELVCCKPT" | u32 version | u64 header bytes | JSON header | tensor payload
/// The JSON header carries caller metadata under "meta" and the tensor table
/// (name, rows, cols, byte offset) under "tensors". Payload is little-endian float64.
struct Checkpoint {
  nlohmann::json meta;
  std::map<std::string, Matrix> tensors;
};

constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store, const nlohmann::json& meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace elvc::nn
