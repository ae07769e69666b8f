#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "lorashear/model.hpp"

namespace lorashear {

inline constexpr char kCheckpointMagic[4] = {'L', 'S', 'H', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary checkpoint: see docs/checkpoint_format.md for the byte layout.
std::string serialize_checkpoint(const LoraModel& model);
LoraModel deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const LoraModel& model, const std::filesystem::path& path);
LoraModel load_checkpoint(const std::filesystem::path& path);

}  // namespace lorashear
