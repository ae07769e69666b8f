#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "lorashear/model.hpp"

namespace lorashear {

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

// Hash of the serialized checkpoint, covering every tensor and all metadata.
std::string model_hash(const LoraModel& model);

}  // namespace lorashear
