#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mmtumor/data.hpp"
#include "mmtumor/metrics.hpp"
#include "mmtumor/model.hpp"

namespace mmtumor {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything stored next to the weights.
struct CheckpointInfo {
  ScalerParams scaler = ScalerParams::identity();
  int fold = 0;
  int best_epoch = 0;
  std::string feature_mode = "shipped";
  // extraction settings used when feature_mode is "regenerated"
  int feature_levels = 32;
  int tamura_max_k = 5;
  std::vector<std::string> validation_ids;
  FoldMetrics metrics;
};

/// Binary container: magic line, version, a JSON header (spec, scaler, info,
/// tensor table), then the raw tensor data as little-endian doubles.
void save_checkpoint(const std::filesystem::path& path, Model& model, const CheckpointInfo& info);

struct LoadedCheckpoint {
  Model model;
  CheckpointInfo info;
};

/// Throws LoadError on a missing or malformed file and SchemaError when the
/// tensor table disagrees with the stored spec.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mmtumor
