#include "mmtumor/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

#include "mmtumor/errors.hpp"
#include "mmtumor/rng.hpp"

namespace mmtumor {

Dataset::Dataset(std::vector<Sample> samples) : samples_(std::move(samples)) {
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    const Sample& s = samples_[i];
    if (!index_.emplace(s.id, i).second) throw SchemaError("duplicate sample id '" + s.id + "'");
    if (s.label == Label::Ill) {
      ++counts_.ill;
    } else if (s.label == Label::Healthy) {
      ++counts_.healthy;
    } else {
      throw SchemaError("sample '" + s.id + "' has a label outside {0, 1}");
    }
  }
}

std::size_t Dataset::find(const std::string& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? samples_.size() : it->second;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  std::vector<Sample> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(samples_.at(i));
  return Dataset(std::move(out));
}

Dataset Dataset::with_features(const std::vector<FeatureVector>& features) const {
  if (features.size() != samples_.size()) {
    throw ShapeError("feature count " + std::to_string(features.size()) +
                     " does not match dataset size " + std::to_string(samples_.size()));
  }
  std::vector<Sample> out = samples_;
  for (std::size_t i = 0; i < out.size(); ++i) out[i].features = features[i];
  return Dataset(std::move(out));
}

std::array<std::string, kFeatureCount> DatasetSchema::default_feature_columns() {
  std::array<std::string, kFeatureCount> cols;
  for (std::size_t i = 0; i < kFeatureCount; ++i) cols[i] = std::string(kFeatureNames[i]);
  return cols;
}

std::string normalize_column_name(std::string_view name) {
  std::string out;
  out.reserve(name.size());
  for (char c : name) {
    if (c == ' ' || c == '-') {
      out.push_back('_');
    } else {
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  return out;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string_view rest(line);
  while (true) {
    const auto comma = rest.find(',');
    cells.emplace_back(trim(rest.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    rest.remove_prefix(comma + 1);
  }
  return cells;
}

bool parse_double(std::string_view s, double& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

std::size_t require_column(const std::vector<std::string>& header, const std::string& name,
                           const std::filesystem::path& table) {
  const std::string wanted = normalize_column_name(name);
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (normalize_column_name(header[i]) == wanted) return i;
  }
  throw SchemaError(table.string() + ": missing column '" + name + "'");
}

// stem -> image files with that stem
std::unordered_map<std::string, std::vector<std::filesystem::path>> index_images(
    const std::filesystem::path& dir) {
  std::unordered_map<std::string, std::vector<std::filesystem::path>> out;
  std::error_code ec;
  std::filesystem::directory_iterator it(dir, ec);
  if (ec) throw LoadError("cannot open image directory " + dir.string() + ": " + ec.message());
  for (const auto& entry : it) {
    if (!entry.is_regular_file() || !has_image_extension(entry.path())) continue;
    out[entry.path().stem().string()].push_back(entry.path());
  }
  return out;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& image_dir,
                     const std::filesystem::path& features_table, const DatasetSchema& schema) {
  std::ifstream in(features_table);
  if (!in) throw LoadError("cannot open feature table " + features_table.string());

  std::string line;
  if (!std::getline(in, line)) throw SchemaError(features_table.string() + ": missing header row");
  const std::vector<std::string> header = split_csv_line(line);

  const std::size_t id_col = require_column(header, schema.id_column, features_table);
  const std::size_t label_col = require_column(header, schema.label_column, features_table);
  std::array<std::size_t, kFeatureCount> feature_cols{};
  if (schema.features_required) {
    for (std::size_t f = 0; f < kFeatureCount; ++f) {
      feature_cols[f] = require_column(header, schema.feature_columns[f], features_table);
    }
  }

  const auto images = index_images(image_dir);
  std::vector<Sample> samples;
  std::unordered_map<std::string, std::size_t> seen;

  std::size_t row = 1;  // header is row 1
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const std::vector<std::string> cells = split_csv_line(line);
    auto cell = [&](std::size_t col, const std::string& name) -> const std::string& {
      if (col >= cells.size() || cells[col].empty()) {
        throw ParseError(features_table.string() + ": row " + std::to_string(row) +
                         ", column '" + name + "': missing value");
      }
      return cells[col];
    };

    Sample s;
    s.id = cell(id_col, schema.id_column);
    if (!seen.emplace(s.id, row).second) {
      throw SchemaError(features_table.string() + ": duplicate id '" + s.id + "' at row " +
                        std::to_string(row));
    }

    const std::string& label = cell(label_col, schema.label_column);
    double label_value = 0.0;
    if (!parse_double(label, label_value) || (label_value != 0.0 && label_value != 1.0)) {
      throw ParseError(features_table.string() + ": row " + std::to_string(row) + ", column '" +
                       schema.label_column + "': label '" + label + "' is not 0 or 1");
    }
    s.label = label_value == 1.0 ? Label::Ill : Label::Healthy;

    if (schema.features_required) {
      for (std::size_t f = 0; f < kFeatureCount; ++f) {
        const std::string& text = cell(feature_cols[f], schema.feature_columns[f]);
        if (!parse_double(text, s.features[f])) {
          throw ParseError(features_table.string() + ": row " + std::to_string(row) +
                           ", column '" + schema.feature_columns[f] + "': '" + text +
                           "' is not a finite number");
        }
      }
    }

    const auto hit = images.find(s.id);
    if (hit == images.end()) {
      throw LoadError("no image file for id '" + s.id + "' in " + image_dir.string());
    }
    if (hit->second.size() > 1) {
      throw SchemaError("id '" + s.id + "' matches " + std::to_string(hit->second.size()) +
                        " image files");
    }
    auto image = read_gray_image(hit->second.front());
    if (!image) throw LoadError("cannot decode image for id '" + s.id + "'");
    if (image->height != schema.image_height || image->width != schema.image_width) {
      throw SchemaError("image for id '" + s.id + "' is " + std::to_string(image->height) + "x" +
                        std::to_string(image->width) + ", expected " +
                        std::to_string(schema.image_height) + "x" +
                        std::to_string(schema.image_width));
    }
    s.image = std::make_shared<const GrayImage>(std::move(*image));
    samples.push_back(std::move(s));
  }
  return Dataset(std::move(samples));
}

std::map<std::string, Label> read_labels(const std::filesystem::path& table,
                                         const DatasetSchema& schema) {
  std::ifstream in(table);
  if (!in) throw LoadError("cannot open label table " + table.string());
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(table.string() + ": missing header row");
  const std::vector<std::string> header = split_csv_line(line);
  const std::size_t id_col = require_column(header, schema.id_column, table);
  const std::size_t label_col = require_column(header, schema.label_column, table);

  std::map<std::string, Label> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const std::vector<std::string> cells = split_csv_line(line);
    double value = 0.0;
    if (std::max(id_col, label_col) >= cells.size() || cells[id_col].empty() ||
        !parse_double(cells[label_col], value) || (value != 0.0 && value != 1.0)) {
      throw ParseError(table.string() + ": row " + std::to_string(row) + " needs an id and a 0/1 label");
    }
    if (!out.emplace(cells[id_col], value == 1.0 ? Label::Ill : Label::Healthy).second) {
      throw SchemaError(table.string() + ": duplicate id '" + cells[id_col] + "' at row " +
                        std::to_string(row));
    }
  }
  return out;
}

Dataset balance_classes(const Dataset& ds, std::uint64_t seed) {
  const ClassCounts& counts = ds.class_counts();
  if (counts.healthy == 0 || counts.ill == 0) {
    throw BalanceError("cannot balance: class counts are healthy=" +
                       std::to_string(counts.healthy) + ", ill=" + std::to_string(counts.ill));
  }
  if (counts.healthy == counts.ill) return ds;

  const Label majority = counts.healthy > counts.ill ? Label::Healthy : Label::Ill;
  const std::size_t keep = std::min(counts.healthy, counts.ill);

  std::vector<std::size_t> majority_idx;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds[i].label == majority) majority_idx.push_back(i);
  }
  Rng rng(seed);
  std::shuffle(majority_idx.begin(), majority_idx.end(), rng);

  std::vector<bool> dropped(ds.size(), false);
  for (std::size_t i = keep; i < majority_idx.size(); ++i) dropped[majority_idx[i]] = true;

  std::vector<std::size_t> survivors;
  survivors.reserve(2 * keep);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!dropped[i]) survivors.push_back(i);
  }
  return ds.subset(survivors);
}

ScalerParams ScalerParams::identity() {
  ScalerParams p;
  p.mean.fill(0.0);
  p.stddev.fill(1.0);
  return p;
}

ScalerParams fit_scaler(const Dataset& ds) {
  if (ds.empty()) throw StandardizationError("cannot fit a scaler on an empty dataset");
  const auto n = static_cast<double>(ds.size());
  ScalerParams p;
  for (std::size_t f = 0; f < kFeatureCount; ++f) {
    double sum = 0.0;
    for (const Sample& s : ds.samples()) sum += s.features[f];
    const double mean = sum / n;
    double ss = 0.0;
    for (const Sample& s : ds.samples()) {
      const double d = s.features[f] - mean;
      ss += d * d;
    }
    const double sd = std::sqrt(ss / n);
    if (!(sd > 0.0)) {
      throw StandardizationError("feature '" + std::string(kFeatureNames[f]) +
                                 "' has zero variance");
    }
    p.mean[f] = mean;
    p.stddev[f] = sd;
  }
  return p;
}

FeatureVector apply_scaler(const FeatureVector& features, const ScalerParams& params) {
  FeatureVector out;
  for (std::size_t f = 0; f < kFeatureCount; ++f) {
    out[f] = (features[f] - params.mean[f]) / params.stddev[f];
  }
  return out;
}

Dataset apply_scaler(const Dataset& ds, const ScalerParams& params) {
  std::vector<FeatureVector> scaled;
  scaled.reserve(ds.size());
  for (const Sample& s : ds.samples()) scaled.push_back(apply_scaler(s.features, params));
  return ds.with_features(scaled);
}

Standardized standardize_features(const Dataset& ds) {
  ScalerParams params = fit_scaler(ds);
  return {apply_scaler(ds, params), params};
}

std::vector<FoldSplit> stratified_kfold(const Dataset& ds, int k, std::uint64_t seed) {
  if (k < 2) throw PartitionError("k must be at least 2, got " + std::to_string(k));
  const ClassCounts& counts = ds.class_counts();
  const auto uk = static_cast<std::size_t>(k);
  if (counts.healthy < uk || counts.ill < uk) {
    throw PartitionError("each class needs at least k=" + std::to_string(k) +
                         " samples (healthy=" + std::to_string(counts.healthy) +
                         ", ill=" + std::to_string(counts.ill) + ")");
  }

  Rng rng(seed);
  std::vector<std::size_t> fold_of(ds.size());
  std::size_t position = 0;
  for (Label c : {Label::Healthy, Label::Ill}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds[i].label == c) members.push_back(i);
    }
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t i : members) fold_of[i] = position++ % uk;
  }

  std::vector<FoldSplit> folds(uk);
  for (std::size_t f = 0; f < uk; ++f) folds[f].fold_index = static_cast<int>(f + 1);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t f = 0; f < uk; ++f) {
      (fold_of[i] == f ? folds[f].validation : folds[f].train).push_back(i);
    }
  }
  return folds;
}

void write_manifest(const std::filesystem::path& path, const Dataset& ds,
                    const std::vector<FoldSplit>& folds) {
  std::vector<int> fold_of(ds.size(), 0);
  for (const FoldSplit& f : folds) {
    for (std::size_t i : f.validation) fold_of.at(i) = f.fold_index;
  }
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write manifest " + path.string());
  out << "id,label,fold\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds[i].id << ',' << static_cast<int>(ds[i].label) << ',' << fold_of[i] << '\n';
  }
}

}  // namespace mmtumor
