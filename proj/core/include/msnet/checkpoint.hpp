#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "msnet/train.hpp"

namespace msnet {

void to_json(nlohmann::json& j, const ArchConfig& a);
void from_json(const nlohmann::json& j, ArchConfig& a);

enum class CheckpointContent {
  kModel,      // parameters and running statistics
  kResumable,  // plus optimizer moments, iteration counter and loss history
};

/// One JSON manifest line (tensor names, shapes, byte offsets) followed by the
/// raw little-endian f64 payload. Written atomically.
void save_checkpoint(const TrainRun& run, const std::filesystem::path& path, CheckpointContent content);

/// Rebuilds the run, including the iteration counter and loss history.
/// Model-only checkpoints come back with empty optimizer
/// state. A stripped MS-Net checkpoint loads without auxiliary branches and
/// can only be used for inference.
TrainRun load_checkpoint(const std::filesystem::path& path);

/// Overwrites `target`'s tensors from a checkpoint. Throws DimensionError when
/// the checkpoint was written for a different architecture.
void load_model_into(ModelParams& target, const std::filesystem::path& path);

}  // namespace msnet
