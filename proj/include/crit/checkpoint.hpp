#pragma once

#include <string>

#include <json.hpp>

#include "crit/nn.hpp"

namespace crit {

inline constexpr int kCheckpointFormatVersion = 1;

/// Parameters of one trained model plus the metadata needed to rebuild it.
struct ModelBundle {
    std::string stage;            // "stage1", "stage2", "stage3", "baseline-cbs", ...
    nlohmann::json architecture;  // model-specific descriptor
    std::string config_hash;
    nlohmann::json metrics = nlohmann::json::object();
    nn::ParamStore params;
};

struct CheckpointLoadOptions {
    std::string expected_config_hash;  // empty: accept any
    bool force = false;                // load despite a hash mismatch
};

/// Layout: "CRITCKPT" | u32 format version | u64 header length | header JSON |
/// parameter blocks as little-endian float64 in header order. The header
/// records the sha256 of the payload.
void checkpoint_save(const ModelBundle& bundle, const std::string& path);
ModelBundle checkpoint_load(const std::string& path, const CheckpointLoadOptions& options = {});

/// Serialized bytes (what checkpoint_save writes).
std::string checkpoint_bytes(const ModelBundle& bundle);

}  // namespace crit
