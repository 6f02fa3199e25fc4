#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mmtumor/data.hpp"
#include "mmtumor/features.hpp"
#include "mmtumor/metrics.hpp"
#include "mmtumor/model.hpp"
#include "mmtumor/training.hpp"

namespace mmtumor {

enum class FeatureMode { Shipped, Regenerated };
enum class StandardizeScope { Global, PerFold };

std::string to_string(FeatureMode m);
std::string to_string(StandardizeScope s);
FeatureMode parse_feature_mode(const std::string& text);
StandardizeScope parse_standardize_scope(const std::string& text);

/// Defaults give the standard protocol: balanced classes, global
/// standardization after balancing, stratified 10-fold CV, Adam at 1e-3,
/// batch 32, at most 100 epochs, early stopping (1e-4, 5).
struct RunConfig {
  std::filesystem::path image_dir = "data/images";
  std::filesystem::path features_table = "data/features.csv";
  std::string id_column = "id";
  std::string label_column = "label";
  FeatureMode feature_mode = FeatureMode::Shipped;
  bool balance = true;
  /// Balance first, then fit the global scaler on the balanced set.
  bool balance_before_standardize = true;
  StandardizeScope standardize = StandardizeScope::Global;
  int folds = 10;
  std::uint64_t seed = 0;
  FeatureConfig features;
  ModelSpec model;
  TrainConfig train;

  // Runtime settings; they do not change results.
  std::filesystem::path out_dir = "run";
  int parallel_folds = 1;
  bool force = false;
  bool quiet = false;

  void validate() const;
};

/// Overrides fields from TOML-style `key = value` text with optional
/// `[section]` headers. Unknown keys are a ConfigError.
void apply_config(RunConfig& cfg, std::istream& in, const std::string& source = "config");
RunConfig load_run_config(const std::filesystem::path& path);

/// Complete, commented config text; parsing it back yields the same
/// config. Runtime settings are only included when asked for.
std::string render_config(const RunConfig& cfg, bool include_runtime = true);

/// Loaded, optionally balanced and globally standardized data plus folds.
struct PreparedData {
  Dataset dataset;
  ScalerParams global_scaler = ScalerParams::identity();
  std::vector<FoldSplit> folds;
};

PreparedData prepare_data(const RunConfig& cfg);

/// Trains one fold and writes `<out>/fold_<i>/` (history.jsonl,
/// checkpoint.mmt, metrics.json).
FoldMetrics run_fold(const RunConfig& cfg, const PreparedData& data, int fold_index);

/// The full protocol. Completed folds of an interrupted run with the same
/// protocol are reused; a finished run or a different protocol in `out_dir`
/// is refused unless `force` is set, which recomputes everything.
CvReport run_cv(const RunConfig& cfg);

/// Trains a single fold of the protocol (1-based index).
FoldMetrics train_fold_cmd(const RunConfig& cfg, int fold_index);

/// Rebuilds report.csv, report.json and plotdata.csv from the fold
/// directories under `out_dir`.
CvReport assemble_report(const std::filesystem::path& out_dir, int folds);

struct ExtractSummary {
  std::size_t processed = 0;
  std::size_t failed = 0;
};

/// Writes `id[,label],<13 features>` for every image in the directory, sorted
/// by id. Labels are included when a label table is given. Unreadable images
/// are counted and skipped.
ExtractSummary extract_features_cmd(const std::filesystem::path& image_dir,
                                    const std::filesystem::path& out_table,
                                    const FeatureConfig& cfg,
                                    const std::optional<std::filesystem::path>& labels = {},
                                    bool quiet = false);

/// Loads a checkpoint and evaluates it on the dataset named by `cfg`,
/// restricted to the checkpoint's validation ids when `validation_only`.
FoldMetrics evaluate_cmd(const std::filesystem::path& checkpoint, const RunConfig& cfg,
                         bool validation_only);

}  // namespace mmtumor
