#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "retiscreen/micro_cnn.hpp"

namespace retiscreen::dl {

inline constexpr std::uint16_t kCheckpointVersion = 1;

// Layout (all integers little-endian):
//   "RSCK" | u16 version | u32 json_len | json (config, training meta, provenance)
//   | u32 param_count | per param: u16 name_len, name, u8 rank, u32 dims[rank], f32 values[]
std::vector<std::uint8_t> encode_checkpoint(const MicroCnnModel& model, const nlohmann::json& provenance = {});
MicroCnnModel decode_checkpoint(std::span<const std::uint8_t> bytes, nlohmann::json* provenance = nullptr);

void save_checkpoint(const MicroCnnModel& model, const std::filesystem::path& path,
                     const nlohmann::json& provenance = {});
MicroCnnModel load_checkpoint(const std::filesystem::path& path, nlohmann::json* provenance = nullptr);

}  // namespace retiscreen::dl
