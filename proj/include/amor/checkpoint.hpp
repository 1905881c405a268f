#pragma once

#include <filesystem>

#include "amor/model.hpp"
#include "json.hpp"

namespace amor {

inline constexpr int kCheckpointVersion = 1;

/// JSON blob {version, config, params: [{name, shape, data}]}. Doubles are
/// written with round-trip precision, so save/load is bit-exact.
nlohmann::json checkpoint_to_json(const Model& model);
Model checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace amor
