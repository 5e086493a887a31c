#include "retiscreen/preprocessing.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace retiscreen {
namespace {

struct AxisSample {
  int near_index;
  int far_index;
  double near_weight;
  double far_weight;
};

// Sample position = centre + offset, where centre2 = 2·centre (pixel-centre
// coordinates). Computed from |offset| and its sign only, so a negated offset
// about a mirrored centre yields the mirrored indices with identical weights.
AxisSample sample_axis(int centre2, double offset, int length) {
  const int dir = offset < 0.0 ? -1 : 1;
  const double a = std::abs(offset);
  AxisSample s{};
  if (centre2 % 2 == 0) {
    const double whole = std::floor(a);
    const double f = a - whole;
    s.near_index = centre2 / 2 + dir * static_cast<int>(whole);
    s.near_weight = 1.0 - f;
    s.far_weight = f;
  } else {
    const int lo = (centre2 - 1) / 2;
    const int first = dir > 0 ? lo + 1 : lo;
    if (a < 0.5) {
      s.near_index = first;
      s.near_weight = 0.5 + a;
      s.far_weight = 0.5 - a;
      s.far_index = first - dir;
      s.near_index = std::clamp(s.near_index, 0, length - 1);
      s.far_index = std::clamp(s.far_index, 0, length - 1);
      return s;
    }
    const double b = a - 0.5;
    const double whole = std::floor(b);
    const double f = b - whole;
    s.near_index = first + dir * static_cast<int>(whole);
    s.near_weight = 1.0 - f;
    s.far_weight = f;
  }
  s.far_index = s.near_index + dir;
  s.near_index = std::clamp(s.near_index, 0, length - 1);
  s.far_index = std::clamp(s.far_index, 0, length - 1);
  return s;
}

std::vector<AxisSample> axis_table(int in, int out) {
  std::vector<AxisSample> table(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int j = 0; j < out; ++j) {
    const double offset = (static_cast<double>(j) + 0.5 - static_cast<double>(out) / 2.0) * scale;
    table[static_cast<std::size_t>(j)] = sample_axis(in - 1, offset, in);
  }
  return table;
}

double gray_level(const RawImage& img, int x, int y) {
  return (static_cast<double>(img.at(x, y, 0)) + img.at(x, y, 1) + img.at(x, y, 2)) / 3.0;
}

CropBox centre_square(int w, int h) {
  int side = std::min(w, h);
  if ((w - side) % 2 != 0) --side;
  return {(w - side) / 2, (h - side) / 2, side};
}

}  // namespace

CropBox fov_box(const RawImage& raw, bool* fallback, bool* degenerate) {
  if (raw.empty()) throw std::invalid_argument("fov_crop: empty image");
  const int w = raw.width, h = raw.height;
  if (fallback) *fallback = false;
  if (degenerate) *degenerate = false;

  std::vector<double> gray(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) gray[static_cast<std::size_t>(y) * w + x] = gray_level(raw, x, y);
  std::vector<double> sorted = gray;
  const auto rank = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(sorted.size()))) - 1;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(rank), sorted.end());
  const double threshold = 0.1 * sorted[rank];

  int x0 = w, x1 = -1, y0 = h, y1 = -1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (gray[static_cast<std::size_t>(y) * w + x] > threshold) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) {
    if (fallback) *fallback = true;
    if (degenerate) *degenerate = true;
    return centre_square(w, h);
  }
  const int bw = x1 - x0 + 1, bh = y1 - y0 + 1;
  if (static_cast<double>(bw) * bh < 0.25 * static_cast<double>(w) * h) {
    if (fallback) *fallback = true;
    return centre_square(w, h);
  }

  // Keep (side − bw) even so the horizontal placement needs no rounding.
  int side = std::max(bw, bh);
  if ((side - bw) % 2 != 0) ++side;
  if (side > std::min(w, h)) {
    side = std::min(w, h);
    if (side < w && (side - bw) % 2 != 0) --side;
  }
  const int left = std::clamp(x0 - (side - bw) / 2, 0, w - side);
  const int top = std::clamp(y0 - (side - bh) / 2, 0, h - side);
  return {left, top, side};
}

FovCrop fov_crop(const RawImage& raw) {
  FovCrop out;
  out.box = fov_box(raw, &out.fallback, &out.degenerate);
  out.image = RawImage(out.box.side, out.box.side);
  for (int y = 0; y < out.box.side; ++y)
    for (int x = 0; x < out.box.side; ++x)
      for (int c = 0; c < 3; ++c) out.image.at(x, y, c) = raw.at(out.box.x + x, out.box.y + y, c);
  return out;
}

std::vector<double> resample_plane(std::span<const double> plane, int w, int h, int out_w, int out_h) {
  if (w <= 0 || h <= 0 || out_w <= 0 || out_h <= 0) throw std::invalid_argument("resample_plane: bad size");
  if (plane.size() != static_cast<std::size_t>(w) * h) throw std::invalid_argument("resample_plane: size mismatch");
  const auto xs = axis_table(w, out_w);
  const auto ys = axis_table(h, out_h);
  std::vector<double> out(static_cast<std::size_t>(out_w) * out_h);
  for (int j = 0; j < out_h; ++j) {
    const auto& sy = ys[static_cast<std::size_t>(j)];
    const double* row_near = plane.data() + static_cast<std::size_t>(sy.near_index) * w;
    const double* row_far = plane.data() + static_cast<std::size_t>(sy.far_index) * w;
    for (int i = 0; i < out_w; ++i) {
      const auto& sx = xs[static_cast<std::size_t>(i)];
      const double near = sx.near_weight * row_near[sx.near_index] + sx.far_weight * row_near[sx.far_index];
      const double far = sx.near_weight * row_far[sx.near_index] + sx.far_weight * row_far[sx.far_index];
      out[static_cast<std::size_t>(j) * out_w + i] = sy.near_weight * near + sy.far_weight * far;
    }
  }
  return out;
}

std::vector<double> resample_square(std::span<const double> plane, int side, int out) {
  return resample_plane(plane, side, side, out, out);
}

std::vector<double> gaussian_blur(std::span<const double> plane, int width, int height, double sigma) {
  if (plane.size() != static_cast<std::size_t>(width) * height)
    throw std::invalid_argument("gaussian_blur: size mismatch");
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_blur: sigma must be positive");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> weights(static_cast<std::size_t>(radius) + 1);
  double norm = 0.0;
  for (int k = 0; k <= radius; ++k) {
    weights[static_cast<std::size_t>(k)] = std::exp(-0.5 * k * k / (sigma * sigma));
    norm += (k == 0 ? 1.0 : 2.0) * weights[static_cast<std::size_t>(k)];
  }

  // Point reflection about the edge pixel: v[-k] = 2·v[0] − v[k].
  auto filter_line = [&](const double* src, std::size_t stride, int n, double* dst, std::size_t dst_stride) {
    auto ext = [&](int i) {
      if (i < 0) return 2.0 * src[0] - src[static_cast<std::size_t>(std::min(-i, n - 1)) * stride];
      if (i >= n) {
        const int m = std::max(2 * (n - 1) - i, 0);
        return 2.0 * src[static_cast<std::size_t>(n - 1) * stride] - src[static_cast<std::size_t>(m) * stride];
      }
      return src[static_cast<std::size_t>(i) * stride];
    };
    for (int x = 0; x < n; ++x) {
      double acc = weights[0] * src[static_cast<std::size_t>(x) * stride];
      for (int k = 1; k <= radius; ++k) acc += weights[static_cast<std::size_t>(k)] * (ext(x - k) + ext(x + k));
      dst[static_cast<std::size_t>(x) * dst_stride] = acc / norm;
    }
  };

  std::vector<double> tmp(plane.size()), out(plane.size());
  for (int y = 0; y < height; ++y)
    filter_line(plane.data() + static_cast<std::size_t>(y) * width, 1, width,
                tmp.data() + static_cast<std::size_t>(y) * width, 1);
  for (int x = 0; x < width; ++x)
    filter_line(tmp.data() + x, static_cast<std::size_t>(width), height, out.data() + x,
                static_cast<std::size_t>(width));
  return out;
}

double mirror_symmetric_sum(std::span<const double> plane, int width, int height) {
  double total = 0.0;
  for (int y = 0; y < height; ++y) {
    const double* row = plane.data() + static_cast<std::size_t>(y) * width;
    double row_sum = 0.0;
    for (int x = 0; x < width / 2; ++x) row_sum += row[x] + row[width - 1 - x];
    if (width % 2 != 0) row_sum += row[width / 2];
    total += row_sum;
  }
  return total;
}

PreprocessedImage normalize(const RawImage& raw, int target_size, std::string source_id) {
  if (target_size < 2) throw std::invalid_argument("normalize: target size must be >= 2");
  PreprocessedImage result;
  result.source_id = std::move(source_id);
  const FovCrop crop = fov_crop(raw);
  result.fov_bbox = crop.box;
  result.fallback_crop = crop.fallback;

  const int side = crop.box.side;
  const int s = target_size;
  const std::size_t plane_size = static_cast<std::size_t>(s) * s;
  std::vector<float> values(3 * plane_size, 0.0f);

  bool constant = true;
  const auto first = crop.image.rgb.empty() ? 0 : crop.image.rgb[0];
  for (std::size_t i = 0; i < crop.image.rgb.size() && constant; i += 3)
    constant = crop.image.rgb[i] == first && crop.image.rgb[i + 1] == crop.image.rgb[1] &&
               crop.image.rgb[i + 2] == crop.image.rgb[2];
  if (constant || crop.degenerate) {
    result.degenerate = true;
    result.tensor = dl::Tensor({3, static_cast<std::size_t>(s), static_cast<std::size_t>(s)}, std::move(values));
    return result;
  }

  std::vector<double> channel(static_cast<std::size_t>(side) * side);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < channel.size(); ++i) channel[i] = crop.image.rgb[i * 3 + static_cast<std::size_t>(c)];
    auto resized = resample_square(channel, side, s);
    const auto background = gaussian_blur(resized, s, s, static_cast<double>(s) / 6.0);
    for (std::size_t i = 0; i < plane_size; ++i) resized[i] -= background[i];
    const double mean = mirror_symmetric_sum(resized, s, s) / static_cast<double>(plane_size);
    std::vector<double> sq(plane_size);
    for (std::size_t i = 0; i < plane_size; ++i) sq[i] = (resized[i] - mean) * (resized[i] - mean);
    const double sd = std::sqrt(mirror_symmetric_sum(sq, s, s) / static_cast<double>(plane_size));
    const double denom = std::max(sd, 1e-6);
    float* dst = values.data() + static_cast<std::size_t>(c) * plane_size;
    for (std::size_t i = 0; i < plane_size; ++i) dst[i] = static_cast<float>((resized[i] - mean) / denom);
  }
  result.tensor = dl::Tensor({3, static_cast<std::size_t>(s), static_cast<std::size_t>(s)}, std::move(values));
  return result;
}

}  // namespace retiscreen

namespace retiscreen {

MultiScaleImage::MultiScaleImage(RawImage raw, std::string source_id)
    : raw_(std::move(raw)), source_id_(std::move(source_id)) {}

const PreprocessedImage& MultiScaleImage::at(int size) {
  for (const auto& [s, img] : cache_)
    if (s == size) return img;
  cache_.emplace_back(size, normalize(raw_, size, source_id_));
  return cache_.back().second;
}

}  // namespace retiscreen
