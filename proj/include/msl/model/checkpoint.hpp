#pragma once

#include "msl/model/model.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace msl::model {

// ".mslc": "MSLC", u32 version, u32 tensor count, then per tensor
// {u16 name length, UTF-8 name, u32 ndim, dims, f32 data}. Text metadata
// rides along as tensors named "meta:<key>" holding one f32 per byte.
struct Checkpoint {
  std::map<std::string, std::string> metadata;
  std::vector<NamedParam<float>> tensors;

  const Tensor<float>* find(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kConfigKey = "config";

std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Model parameters plus the config record.
Checkpoint make_checkpoint(const MslModel<float>& model);
MslModel<float> model_from_checkpoint(const Checkpoint& checkpoint);

// FNV-1a 64 of the encoded bytes, as 16 hex digits.
std::string content_hash(std::string_view bytes);

}  // namespace msl::model
