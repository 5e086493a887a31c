#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace retiscreen {

/// 8-bit interleaved RGB image.
struct RawImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // width·height·3, row-major

  RawImage() = default;
  RawImage(int w, int h);

  std::uint8_t& at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  bool empty() const { return width == 0 || height == 0; }

  friend bool operator==(const RawImage&, const RawImage&) = default;
};

/// Returns the left-right mirror of an image.
RawImage mirror_horizontal(const RawImage& image);

/// Reads a PNG or binary PPM (P6, maxval 255), chosen by file signature.
/// Throws DataError on unreadable or unsupported files.
RawImage read_image(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const RawImage& image);
void write_ppm(const std::filesystem::path& path, const RawImage& image);

/// Single-channel 8-bit PNG (used for lesion masks).
void write_gray8_png(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& gray);
std::vector<std::uint8_t> read_gray8_png(const std::filesystem::path& path, int& width, int& height);

/// Single-channel 16-bit PNG (raw evidence maps).
void write_gray16_png(const std::filesystem::path& path, int width, int height,
                      const std::vector<std::uint16_t>& gray);

}  // namespace retiscreen
