#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ffkv/model.hpp"

namespace ffkv {

inline constexpr char kCheckpointMagic[4] = {'F', 'F', 'K', 'V'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Tensor stored beside the model weights (optimizer state and the like).
struct ExtraTensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;
    bool operator==(const ExtraTensor&) const = default;
};

struct Checkpoint {
    ModelConfig config;
    ModelWeights weights;
    nlohmann::json metadata = nlohmann::json::object();
    std::map<std::string, ExtraTensor> extras;

    Model model() const { return Model(config, weights); }
};

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

/// Writes through a temporary file and renames, so a crash never leaves a
/// half-written checkpoint under the final name.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelWeights& weights,
                     const nlohmann::json& metadata = nlohmann::json::object(),
                     const std::map<std::string, ExtraTensor>& extras = {});

/// Throws CheckpointError with a message naming the offending tensor or field.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ffkv
