#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "mmtumor/image.hpp"

namespace mmtumor {

inline constexpr std::size_t kFeatureCount = 13;

/// Canonical feature order: five first-order, eight second-order.
enum class Feature : std::size_t {
  Mean,
  Variance,
  StandardDeviation,
  Skewness,
  Kurtosis,
  Entropy,
  Contrast,
  Energy,
  Dissimilarity,
  Correlation,
  Coarseness,
  Asm,
  Homogeneity,
};

inline constexpr std::array<std::string_view, kFeatureCount> kFeatureNames = {
    "mean",          "variance",    "standard_deviation", "skewness",   "kurtosis",
    "entropy",       "contrast",    "energy",             "dissimilarity",
    "correlation",   "coarseness",  "asm",                "homogeneity",
};

struct FeatureVector {
  std::array<double, kFeatureCount> values{};

  double& operator[](Feature f) { return values[static_cast<std::size_t>(f)]; }
  double operator[](Feature f) const { return values[static_cast<std::size_t>(f)]; }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  bool all_finite() const;

  friend bool operator==(const FeatureVector&, const FeatureVector&) = default;
};

struct QuantizedImage {
  std::size_t height = 0;
  std::size_t width = 0;
  int levels = 0;
  std::vector<int> cells;

  int at(std::size_t y, std::size_t x) const { return cells[y * width + x]; }
};

/// Pixel displacement (dy, dx) between the two members of a co-occurring pair.
struct Offset {
  int dy = 0;
  int dx = 0;
};

/// Normalized symmetric gray-level co-occurrence matrix.
struct Glcm {
  int levels = 0;
  Offset offset;
  std::vector<double> p;  // levels x levels, row-major

  double at(int i, int j) const { return p[static_cast<std::size_t>(i * levels + j)]; }
};

struct FirstOrderStats {
  double mean = 0.0;
  double variance = 0.0;
  double standard_deviation = 0.0;
  double skewness = 0.0;
  double kurtosis = 0.0;  // Pearson (normal distribution -> 3)
};

struct GlcmStats {
  double entropy = 0.0;
  double contrast = 0.0;
  double energy = 0.0;
  double dissimilarity = 0.0;
  double correlation = 0.0;
  double angular_second_moment = 0.0;
  double homogeneity = 0.0;
};

/// 0, 45, 90 and 135 degrees at distance 1.
inline const std::vector<Offset> kDefaultOffsets = {{0, 1}, {-1, 1}, {-1, 0}, {-1, -1}};

struct FeatureConfig {
  int levels = 32;
  int tamura_max_k = 5;
  std::vector<Offset> offsets = kDefaultOffsets;
  // Required image size; 0 accepts any size.
  std::size_t expected_height = 0;
  std::size_t expected_width = 0;
};

/// floor(pixel * levels / 256), clamped to [0, levels - 1].
QuantizedImage quantize(const GrayImage& image, int levels);

/// Population moments. A constant image yields zero skewness and kurtosis.
FirstOrderStats first_order(const GrayImage& image);

/// Counts every in-bounds pair (p, p + offset) into both (i, j) and (j, i),
/// then normalizes to unit mass.
Glcm compute_glcm(const QuantizedImage& q, Offset offset);

/// Haralick statistics. Entropy uses the natural log with 0 ln 0 = 0;
/// correlation is defined as 1 when the marginal deviations vanish.
GlcmStats glcm_features(const Glcm& g);

/// Tamura coarseness: for every pixel whose widest comparison window fits in
/// the image, picks the scale 2^k (1 <= k <= max_k) with the largest
/// horizontal or vertical average difference and averages 2^k over those
/// pixels. Needs at least 2^(max_k + 1) pixels per dimension.
double tamura_coarseness(const GrayImage& image, int max_k);

/// Differences within this margin count as ties in the Tamura scale search.
inline constexpr double kTamuraTieTolerance = 1e-9;

FeatureVector extract_feature_vector(const GrayImage& image, const FeatureConfig& cfg = {});

}  // namespace mmtumor
