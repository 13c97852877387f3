#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace petduet {

/// RGB image, row-major height x width x 3, channel values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0.0f) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  /// Mirror around the vertical axis.
  Image flipped_horizontally() const;
};

/// 8-bit RGB PNG round trip. Quantization is round-to-nearest.
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

/// Packs to / unpacks from 8-bit RGB.
std::vector<std::uint8_t> to_bytes(const Image& image);
Image from_bytes(int height, int width, const std::vector<std::uint8_t>& rgb);

}  // namespace petduet
