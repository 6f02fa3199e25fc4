#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace mmtumor {

/// Row-major grayscale intensity grid, nominally in [0, 255].
struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  GrayImage() = default;
  GrayImage(std::size_t h, std::size_t w, double fill = 0.0)
      : height(h), width(w), pixels(h * w, fill) {}

  bool empty() const noexcept { return pixels.empty(); }
  double& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

/// ITU-R BT.601 luma.
constexpr double luminance(double r, double g, double b) noexcept {
  return 0.299 * r + 0.587 * g + 0.114 * b;
}

/// Decodes a PNG/JPEG/BMP file and converts it to grayscale with
/// `luminance`. Returns nullopt when the file cannot be decoded.
std::optional<GrayImage> read_gray_image(const std::filesystem::path& path);

/// Writes an 8-bit single-channel image (values rounded and clamped).
void write_gray_image(const std::filesystem::path& path, const GrayImage& image);

bool has_image_extension(const std::filesystem::path& path);

}  // namespace mmtumor
