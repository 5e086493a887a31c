#include "retiscreen/image.hpp"

#include <png.h>

#include <cctype>
#include <cstring>
#include <string>

#include "retiscreen/file_util.hpp"

namespace retiscreen {
namespace {

// PNG encoding goes through memory so the final write can be atomic.
std::vector<std::uint8_t> encode_png(png_image& image, const void* buffer, png_int_32 row_stride) {
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, buffer, row_stride, nullptr))
    throw DataError(std::string("PNG encode failed: ") + image.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, buffer, row_stride, nullptr))
    throw DataError(std::string("PNG encode failed: ") + image.message);
  out.resize(size);
  return out;
}

std::vector<std::uint8_t> decode_png(const std::vector<std::uint8_t>& bytes, std::uint32_t format, int& width,
                                     int& height, const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw DataError("cannot decode PNG " + path.string() + ": " + image.message);
  image.format = format;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  width = static_cast<int>(image.width);
  height = static_cast<int>(image.height);
  return pixels;
}

RawImage read_ppm(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
  std::size_t pos = 2;
  auto next_token = [&]() -> long {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    long value = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      value = value * 10 + (bytes[pos++] - '0');
      any = true;
      if (value > (1L << 24)) throw DataError("PPM header value too large in " + path.string());
    }
    if (!any) throw DataError("malformed PPM header in " + path.string());
    return value;
  };
  const long w = next_token();
  const long h = next_token();
  const long maxval = next_token();
  if (maxval != 255) throw DataError("only 8-bit PPM (maxval 255) is supported: " + path.string());
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw DataError("malformed PPM header in " + path.string());
  ++pos;
  if (w <= 0 || h <= 0) throw DataError("invalid PPM dimensions in " + path.string());
  RawImage image(static_cast<int>(w), static_cast<int>(h));
  if (bytes.size() - pos < image.rgb.size()) throw DataError("truncated PPM pixel data in " + path.string());
  std::memcpy(image.rgb.data(), bytes.data() + pos, image.rgb.size());
  return image;
}

}  // namespace

RawImage::RawImage(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

RawImage mirror_horizontal(const RawImage& image) {
  RawImage out(image.width, image.height);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(image.width - 1 - x, y, c) = image.at(x, y, c);
  return out;
}

RawImage read_image(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) {
    RawImage image;
    image.rgb = decode_png(bytes, PNG_FORMAT_RGB, image.width, image.height, path);
    return image;
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return read_ppm(bytes, path);
  throw DataError("unsupported image format (expected PNG or binary PPM): " + path.string());
}

void write_png(const std::filesystem::path& path, const RawImage& image) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  write_file_atomic(path, encode_png(png, image.rgb.data(), 0));
}

void write_ppm(const std::filesystem::path& path, const RawImage& image) {
  const std::string header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), image.rgb.begin(), image.rgb.end());
  write_file_atomic(path, bytes);
}

void write_gray8_png(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& gray) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(width);
  png.height = static_cast<png_uint_32>(height);
  png.format = PNG_FORMAT_GRAY;
  write_file_atomic(path, encode_png(png, gray.data(), 0));
}

std::vector<std::uint8_t> read_gray8_png(const std::filesystem::path& path, int& width, int& height) {
  const auto bytes = read_file_bytes(path);
  return decode_png(bytes, PNG_FORMAT_GRAY, width, height, path);
}

void write_gray16_png(const std::filesystem::path& path, int width, int height,
                      const std::vector<std::uint16_t>& gray) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(width);
  png.height = static_cast<png_uint_32>(height);
  png.format = PNG_FORMAT_LINEAR_Y;
  write_file_atomic(path, encode_png(png, gray.data(), 0));
}

}  // namespace retiscreen
