// Synthetic data and scratch directories for the tests.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "mmtumor/data.hpp"
#include "mmtumor/features.hpp"
#include "mmtumor/image.hpp"
#include "mmtumor/pipeline.hpp"
#include "mmtumor/rng.hpp"

namespace support {

namespace fs = std::filesystem;
using namespace mmtumor;

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("mmtumor_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline GrayImage random_image(std::size_t h, std::size_t w, Rng& rng, int max_value = 255) {
  std::uniform_int_distribution<int> px(0, max_value);
  GrayImage img;
  img.height = h;
  img.width = w;
  img.pixels.resize(h * w);
  for (double& v : img.pixels) v = px(rng);
  return img;
}

inline GrayImage constant_image(std::size_t h, std::size_t w, double value) {
  GrayImage img;
  img.height = h;
  img.width = w;
  img.pixels.assign(h * w, value);
  return img;
}

// Dim noisy background; `blob` adds a bright disk at a random position.
inline GrayImage blob_image(std::size_t size, bool blob, Rng& rng) {
  std::normal_distribution<double> noise(30.0, 8.0);
  GrayImage img = constant_image(size, size, 0.0);
  for (double& v : img.pixels) v = std::round(std::clamp(noise(rng), 0.0, 255.0));
  if (!blob) return img;
  const double s = static_cast<double>(size);
  std::uniform_real_distribution<double> radius(s / 8, s / 5);
  const double r = radius(rng);
  std::uniform_real_distribution<double> centre(r + 1, s - r - 1);
  const double cy = centre(rng), cx = centre(rng);
  std::normal_distribution<double> bright(200.0, 15.0);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      if (dy * dy + dx * dx <= r * r) img.pixels[y * size + x] = std::round(std::clamp(bright(rng), 0.0, 255.0));
    }
  }
  return img;
}

struct SyntheticSet {
  fs::path images;
  fs::path table;
  std::size_t size = 0;
};

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// n scans (half with a blob, labelled ill), PNGs named scan_NNN.png, and a
/// table with id and label (plus the 13 features when `with_features`).
inline SyntheticSet write_blob_dataset(const fs::path& dir, std::size_t n, std::size_t size, std::uint64_t seed,
                                       bool with_features, const FeatureConfig& fc = {}) {
  SyntheticSet set{dir / "images", dir / "features.csv", size};
  fs::create_directories(set.images);
  Rng rng(seed);
  std::ofstream table(set.table);
  table << "id,label";
  if (with_features)
    for (auto name : kFeatureNames) table << "," << name;
  table << "\n";
  for (std::size_t i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "scan_%03zu", i);
    const bool ill = i % 2 == 1;
    const GrayImage img = blob_image(size, ill, rng);
    write_gray_image(set.images / (std::string(id) + ".png"), img);
    table << id << "," << (ill ? 1 : 0);
    if (with_features) {
      const FeatureVector f = extract_feature_vector(img, fc);
      for (std::size_t k = 0; k < kFeatureCount; ++k) table << "," << fmt(f[k]);
    }
    table << "\n";
  }
  return set;
}

/// Small image head for fast end-to-end runs on 64x64 scans.
inline ModelSpec smoke_spec(std::size_t size) {
  ModelSpec s;
  s.image_height = size;
  s.image_width = size;
  s.image_channels = 1;
  s.image_head.initial_features = 8;
  s.image_head.growth_rate = 4;
  s.image_head.block_layers = {2, 2};
  s.image_head.bottleneck_width = 2;
  s.tabular_widths = {16, 8};
  s.classifier_widths = {32, 16};
  return s;
}

inline RunConfig smoke_config(const SyntheticSet& set, const fs::path& out) {
  RunConfig cfg;
  cfg.image_dir = set.images;
  cfg.features_table = set.table;
  cfg.feature_mode = FeatureMode::Regenerated;
  cfg.folds = 3;
  cfg.seed = 7;
  cfg.features.tamura_max_k = 4;
  cfg.model = smoke_spec(set.size);
  cfg.train.max_epochs = 30;
  cfg.train.batch_size = 16;
  cfg.out_dir = out;
  cfg.quiet = true;
  return cfg;
}

/// Labels only; images are left empty.
inline Dataset label_dataset(std::size_t healthy, std::size_t ill, Rng& rng) {
  std::vector<Label> labels(healthy, Label::Healthy);
  labels.insert(labels.end(), ill, Label::Ill);
  std::shuffle(labels.begin(), labels.end(), rng);
  std::vector<Sample> samples(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    samples[i].id = "s" + std::to_string(i);
    samples[i].label = labels[i];
  }
  return Dataset(std::move(samples));
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace support
