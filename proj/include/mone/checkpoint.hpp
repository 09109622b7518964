#pragma once

// Checkpoint layout:
//   bytes 0..7   magic "MONECKPT"
//   bytes 8..15  header length L, unsigned 64-bit little-endian
//   next L bytes UTF-8 JSON header:
//                {"format":"mone-checkpoint","version":1,"dtype":"f64",
//                 "model":{...},"tensors":[{"name":..,"shape":[..]},..],
//                 "metadata":{..}}
//   remainder    tensor payloads in header order, IEEE-754 binary64 little-endian

#include "mone/model.hpp"

#include <filesystem>
#include <nlohmann/json.hpp>

namespace mone {

inline constexpr int kCheckpointVersion = 1;

nlohmann::json model_config_to_json(const ModelConfig& config);
/// Rejects unknown keys; missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

struct Checkpoint {
    ModelParams params;
    nlohmann::json metadata = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const nlohmann::json& metadata = nlohmann::json::object());
/// Throws FormatError on bad magic, version, dtype or truncated payloads.
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace mone
