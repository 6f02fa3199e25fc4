#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mmtumor/features.hpp"
#include "mmtumor/image.hpp"

namespace mmtumor {

enum class Label : int { Healthy = 0, Ill = 1 };

/// Images are shared and immutable, so dataset copies stay cheap.
struct Sample {
  std::string id;
  std::shared_ptr<const GrayImage> image;
  FeatureVector features;
  Label label = Label::Healthy;
};

struct ClassCounts {
  std::size_t healthy = 0;
  std::size_t ill = 0;

  std::size_t total() const noexcept { return healthy + ill; }
  std::size_t of(Label l) const noexcept { return l == Label::Ill ? ill : healthy; }
  friend bool operator==(const ClassCounts&, const ClassCounts&) = default;
};

/// Immutable after construction; ids are unique.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::vector<Sample> samples);

  const std::vector<Sample>& samples() const noexcept { return samples_; }
  const Sample& operator[](std::size_t i) const { return samples_[i]; }
  std::size_t size() const noexcept { return samples_.size(); }
  bool empty() const noexcept { return samples_.empty(); }
  const ClassCounts& class_counts() const noexcept { return counts_; }

  /// Index of the sample with this id, or size() when absent.
  std::size_t find(const std::string& id) const;

  /// Copy keeping only the given indices, in the order given.
  Dataset subset(const std::vector<std::size_t>& indices) const;

  /// Copy with the feature vectors replaced (one per sample, same order).
  Dataset with_features(const std::vector<FeatureVector>& features) const;

 private:
  std::vector<Sample> samples_;
  ClassCounts counts_;
  std::map<std::string, std::size_t> index_;
};

struct DatasetSchema {
  std::string id_column = "id";
  std::string label_column = "label";
  /// Header names of the 13 feature columns, canonical order. Matching is
  /// case-insensitive and treats spaces, dashes and underscores alike.
  std::array<std::string, kFeatureCount> feature_columns = default_feature_columns();
  /// When false the table needs only id and label; features are left zero
  /// (to be regenerated from the images).
  bool features_required = true;
  std::size_t image_height = 240;
  std::size_t image_width = 240;

  static std::array<std::string, kFeatureCount> default_feature_columns();
};

/// Reads the comma-separated feature table and the matching `<id>.<ext>`
/// images. Row order is preserved.
Dataset load_dataset(const std::filesystem::path& image_dir,
                     const std::filesystem::path& features_table,
                     const DatasetSchema& schema = {});

/// Reads only the id and label columns of a table.
std::map<std::string, Label> read_labels(const std::filesystem::path& table,
                                         const DatasetSchema& schema = {});

/// Drops uniformly chosen majority-class samples until both classes have
/// the minority count. Survivors keep their original order.
Dataset balance_classes(const Dataset& ds, std::uint64_t seed);

struct ScalerParams {
  std::array<double, kFeatureCount> mean{};
  std::array<double, kFeatureCount> stddev{};

  static ScalerParams identity();
  friend bool operator==(const ScalerParams&, const ScalerParams&) = default;
};

/// Fits population mean/deviation per feature column.
ScalerParams fit_scaler(const Dataset& ds);
FeatureVector apply_scaler(const FeatureVector& features, const ScalerParams& params);
Dataset apply_scaler(const Dataset& ds, const ScalerParams& params);

struct Standardized {
  Dataset dataset;
  ScalerParams params;
};
Standardized standardize_features(const Dataset& ds);

struct FoldSplit {
  int fold_index = 0;  // 1-based
  std::vector<std::size_t> train;  // dataset indices, ascending
  std::vector<std::size_t> validation;
};

/// Stratified k-fold partition. Each class is shuffled with the seeded
/// generator and dealt round-robin; the next class continues where the
/// previous one stopped, so fold sizes also differ by at most one.
std::vector<FoldSplit> stratified_kfold(const Dataset& ds, int k, std::uint64_t seed);

/// Audit manifest: `id,label,fold` with fold = the fold whose validation set
/// holds the sample (0 when no split is given).
void write_manifest(const std::filesystem::path& path, const Dataset& ds,
                    const std::vector<FoldSplit>& folds);

/// Lower-cases and maps ' ', '-' to '_'.
std::string normalize_column_name(std::string_view name);

}  // namespace mmtumor
