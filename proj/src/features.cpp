#include "mmtumor/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "mmtumor/errors.hpp"

namespace mmtumor {

bool FeatureVector::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

QuantizedImage quantize(const GrayImage& image, int levels) {
  if (levels < 2) {
    throw ParameterError("quantization needs at least 2 levels, got " + std::to_string(levels));
  }
  QuantizedImage q;
  q.height = image.height;
  q.width = image.width;
  q.levels = levels;
  q.cells.resize(image.pixels.size());
  const double top = levels - 1;
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const double level = std::floor(image.pixels[i] * levels / 256.0);
    q.cells[i] = static_cast<int>(std::clamp(level, 0.0, top));
  }
  return q;
}

FirstOrderStats first_order(const GrayImage& image) {
  if (image.empty()) throw ParameterError("first-order statistics of an empty image");

  const auto n = static_cast<double>(image.pixels.size());
  double sum = 0.0;
  for (double v : image.pixels) sum += v;
  const double mean = sum / n;

  double m2 = 0.0;
  for (double v : image.pixels) {
    const double d = v - mean;
    m2 += d * d;
  }
  FirstOrderStats s;
  s.mean = mean;
  s.variance = m2 / n;
  s.standard_deviation = std::sqrt(s.variance);
  if (s.standard_deviation == 0.0) return s;

  double m3 = 0.0;
  double m4 = 0.0;
  for (double v : image.pixels) {
    const double z = (v - mean) / s.standard_deviation;
    const double z2 = z * z;
    m3 += z2 * z;
    m4 += z2 * z2;
  }
  s.skewness = m3 / n;
  s.kurtosis = m4 / n;
  return s;
}

Glcm compute_glcm(const QuantizedImage& q, Offset offset) {
  if (offset.dy == 0 && offset.dx == 0) throw ParameterError("GLCM offset must be non-zero");
  const auto ady = static_cast<std::size_t>(std::abs(offset.dy));
  const auto adx = static_cast<std::size_t>(std::abs(offset.dx));
  if (ady >= q.height || adx >= q.width) {
    throw ParameterError("GLCM offset (" + std::to_string(offset.dy) + ", " +
                         std::to_string(offset.dx) + ") does not fit a " +
                         std::to_string(q.height) + "x" + std::to_string(q.width) + " image");
  }

  const auto levels = static_cast<std::size_t>(q.levels);
  std::vector<double> counts(levels * levels, 0.0);

  // Rows/columns whose partner stays in bounds.
  const std::size_t y0 = offset.dy < 0 ? ady : 0;
  const std::size_t y1 = offset.dy > 0 ? q.height - ady : q.height;
  const std::size_t x0 = offset.dx < 0 ? adx : 0;
  const std::size_t x1 = offset.dx > 0 ? q.width - adx : q.width;

  double total = 0.0;
  for (std::size_t y = y0; y < y1; ++y) {
    const std::size_t py = y + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(offset.dy));
    for (std::size_t x = x0; x < x1; ++x) {
      const std::size_t px = x + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(offset.dx));
      const auto i = static_cast<std::size_t>(q.at(y, x));
      const auto j = static_cast<std::size_t>(q.at(py, px));
      counts[i * levels + j] += 1.0;
      counts[j * levels + i] += 1.0;
      total += 2.0;
    }
  }

  Glcm g;
  g.levels = q.levels;
  g.offset = offset;
  g.p = std::move(counts);
  for (double& v : g.p) v /= total;
  return g;
}

GlcmStats glcm_features(const Glcm& g) {
  const int levels = g.levels;
  if (levels < 1 || g.p.size() != static_cast<std::size_t>(levels * levels)) {
    throw ParameterError("GLCM storage does not match its level count");
  }
  double mass = 0.0;
  for (double v : g.p) {
    if (!(v >= 0.0)) throw ParameterError("GLCM has a negative or NaN entry");
    mass += v;
  }
  if (std::abs(mass - 1.0) > 1e-9) {
    throw ParameterError("GLCM is not normalized (sum = " + std::to_string(mass) + ")");
  }

  GlcmStats s;
  double mu_x = 0.0;
  double mu_y = 0.0;
  for (int i = 0; i < levels; ++i) {
    for (int j = 0; j < levels; ++j) {
      const double p = g.at(i, j);
      mu_x += i * p;
      mu_y += j * p;
    }
  }
  double var_x = 0.0;
  double var_y = 0.0;
  double cov = 0.0;
  for (int i = 0; i < levels; ++i) {
    for (int j = 0; j < levels; ++j) {
      const double p = g.at(i, j);
      if (p == 0.0) continue;
      const double d = i - j;
      s.contrast += d * d * p;
      s.dissimilarity += std::abs(d) * p;
      s.homogeneity += p / (1.0 + d * d);
      s.angular_second_moment += p * p;
      s.entropy -= p * std::log(p);
      var_x += (i - mu_x) * (i - mu_x) * p;
      var_y += (j - mu_y) * (j - mu_y) * p;
      cov += (i - mu_x) * (j - mu_y) * p;
    }
  }
  s.energy = std::sqrt(s.angular_second_moment);
  const double denom = std::sqrt(var_x) * std::sqrt(var_y);
  s.correlation = denom < 1e-12 ? 1.0 : cov / denom;
  return s;
}

namespace {

// (H+1) x (W+1) summed-area table.
class IntegralImage {
 public:
  explicit IntegralImage(const GrayImage& img) : w_(img.width + 1), sums_((img.height + 1) * w_) {
    for (std::size_t y = 0; y < img.height; ++y) {
      double row = 0.0;
      for (std::size_t x = 0; x < img.width; ++x) {
        row += img.at(y, x);
        sums_[(y + 1) * w_ + x + 1] = sums_[y * w_ + x + 1] + row;
      }
    }
  }

  // Sum over rows [y0, y1), columns [x0, x1).
  double box(std::size_t y0, std::size_t x0, std::size_t y1, std::size_t x1) const {
    return sums_[y1 * w_ + x1] - sums_[y0 * w_ + x1] - sums_[y1 * w_ + x0] + sums_[y0 * w_ + x0];
  }

 private:
  std::size_t w_;
  std::vector<double> sums_;
};

}  // namespace

double tamura_coarseness(const GrayImage& image, int max_k) {
  if (max_k < 1 || max_k > 20) {
    throw ParameterError("Tamura max_k must be in [1, 20], got " + std::to_string(max_k));
  }
  const std::size_t reach = std::size_t{1} << max_k;
  if (image.height < 2 * reach || image.width < 2 * reach) {
    throw ParameterError("image " + std::to_string(image.height) + "x" +
                         std::to_string(image.width) + " too small for Tamura max_k " +
                         std::to_string(max_k));
  }

  const IntegralImage sat(image);
  // A_k at (y, x): mean over rows [y - h, y + h), cols [x - h, x + h), h = 2^(k-1).
  auto window_mean = [&](std::size_t y, std::size_t x, std::size_t h) {
    return sat.box(y - h, x - h, y + h, x + h) / static_cast<double>(4 * h * h);
  };

  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t y = reach; y + reach <= image.height; ++y) {
    for (std::size_t x = reach; x + reach <= image.width; ++x) {
      double best = -1.0;
      int best_k = 1;
      for (int k = 1; k <= max_k; ++k) {
        const std::size_t h = std::size_t{1} << (k - 1);
        const double horizontal = std::abs(window_mean(y, x + h, h) - window_mean(y, x - h, h));
        const double vertical = std::abs(window_mean(y + h, x, h) - window_mean(y - h, x, h));
        const double e = std::max(horizontal, vertical);
        if (k == 1 || e > best + kTamuraTieTolerance) {
          best = e;
          best_k = k;
        }
      }
      total += static_cast<double>(std::size_t{1} << best_k);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

FeatureVector extract_feature_vector(const GrayImage& image, const FeatureConfig& cfg) {
  if ((cfg.expected_height && image.height != cfg.expected_height) ||
      (cfg.expected_width && image.width != cfg.expected_width)) {
    throw ParameterError("image is " + std::to_string(image.height) + "x" +
                         std::to_string(image.width) + ", expected " +
                         std::to_string(cfg.expected_height) + "x" +
                         std::to_string(cfg.expected_width));
  }
  if (cfg.offsets.empty()) throw ParameterError("feature config has no GLCM offsets");

  FeatureVector f;
  const FirstOrderStats fo = first_order(image);
  f[Feature::Mean] = fo.mean;
  f[Feature::Variance] = fo.variance;
  f[Feature::StandardDeviation] = fo.standard_deviation;
  f[Feature::Skewness] = fo.skewness;
  f[Feature::Kurtosis] = fo.kurtosis;

  const QuantizedImage q = quantize(image, cfg.levels);
  GlcmStats avg;
  for (const Offset& off : cfg.offsets) {
    const GlcmStats s = glcm_features(compute_glcm(q, off));
    avg.entropy += s.entropy;
    avg.contrast += s.contrast;
    avg.energy += s.energy;
    avg.dissimilarity += s.dissimilarity;
    avg.correlation += s.correlation;
    avg.angular_second_moment += s.angular_second_moment;
    avg.homogeneity += s.homogeneity;
  }
  const auto n = static_cast<double>(cfg.offsets.size());
  f[Feature::Entropy] = avg.entropy / n;
  f[Feature::Contrast] = avg.contrast / n;
  f[Feature::Energy] = avg.energy / n;
  f[Feature::Dissimilarity] = avg.dissimilarity / n;
  f[Feature::Correlation] = avg.correlation / n;
  f[Feature::Asm] = avg.angular_second_moment / n;
  f[Feature::Homogeneity] = avg.homogeneity / n;
  f[Feature::Coarseness] = tamura_coarseness(image, cfg.tamura_max_k);
  return f;
}

}  // namespace mmtumor
