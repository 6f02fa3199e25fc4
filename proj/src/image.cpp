#include "mmtumor/image.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "mmtumor/errors.hpp"

namespace mmtumor {

std::optional<GrayImage> read_gray_image(const std::filesystem::path& path) {
  cv::Mat raw;
  try {
    raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception&) {
    return std::nullopt;
  }
  if (raw.empty()) return std::nullopt;

  cv::Mat img;
  if (raw.depth() == CV_8U) {
    img = raw;
  } else if (raw.depth() == CV_16U) {
    raw.convertTo(img, CV_8U, 1.0 / 257.0);
  } else {
    return std::nullopt;
  }

  GrayImage out(static_cast<std::size_t>(img.rows), static_cast<std::size_t>(img.cols));
  const int channels = img.channels();
  for (int y = 0; y < img.rows; ++y) {
    const auto* row = img.ptr<unsigned char>(y);
    for (int x = 0; x < img.cols; ++x) {
      const unsigned char* px = row + static_cast<std::ptrdiff_t>(x) * channels;
      double v = 0.0;
      if (channels == 1 || channels == 2) {
        v = px[0];
      } else {
        // OpenCV stores BGR(A)
        v = luminance(px[2], px[1], px[0]);
      }
      out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = v;
    }
  }
  return out;
}

void write_gray_image(const std::filesystem::path& path, const GrayImage& image) {
  cv::Mat img(static_cast<int>(image.height), static_cast<int>(image.width), CV_8UC1);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const double v = std::clamp(std::round(image.at(y, x)), 0.0, 255.0);
      img.at<unsigned char>(static_cast<int>(y), static_cast<int>(x)) =
          static_cast<unsigned char>(v);
    }
  }
  if (!cv::imwrite(path.string(), img)) {
    throw LoadError("failed to write image " + path.string());
  }
}

bool has_image_extension(const std::filesystem::path& path) {
  static constexpr std::array<std::string_view, 6> kExt = {".png", ".jpg", ".jpeg",
                                                           ".bmp", ".tif", ".tiff"};
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return std::find(kExt.begin(), kExt.end(), ext) != kExt.end();
}

}  // namespace mmtumor
