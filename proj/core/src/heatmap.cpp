#include "retiscreen/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "retiscreen/ensembling.hpp"
#include "retiscreen/ops.hpp"
#include "retiscreen/training_mil.hpp"

namespace retiscreen {

std::pair<int, int> EvidenceMap::argmax() const {
  if (values.empty()) throw std::invalid_argument("argmax of an empty map");
  const auto i = static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
  return {i % width, i / width};
}

std::vector<double> smooth(std::span<const double> plane, int width, int height, double sigma) {
  if (plane.size() != static_cast<std::size_t>(width) * height) throw std::invalid_argument("smooth: size mismatch");
  if (sigma <= 0.0) return {plane.begin(), plane.end()};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> w(static_cast<std::size_t>(radius) + 1);
  double total = 0.0;
  for (int k = 0; k <= radius; ++k) {
    w[static_cast<std::size_t>(k)] = std::exp(-0.5 * k * k / (sigma * sigma));
    total += k == 0 ? w[0] : 2.0 * w[static_cast<std::size_t>(k)];
  }
  for (auto& v : w) v /= total;
  // Mirror about the edge pixel's outer border: -1 → 0, n → n-1.
  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  std::vector<double> tmp(plane.size()), out(plane.size());
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const auto row = static_cast<std::size_t>(y) * width;
      double acc = w[0] * plane[row + x];
      for (int k = 1; k <= radius; ++k)
        acc += w[static_cast<std::size_t>(k)] * (plane[row + reflect(x - k, width)] + plane[row + reflect(x + k, width)]);
      tmp[row + x] = acc;
    }
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double acc = w[0] * tmp[static_cast<std::size_t>(y) * width + x];
      for (int k = 1; k <= radius; ++k)
        acc += w[static_cast<std::size_t>(k)] * (tmp[static_cast<std::size_t>(reflect(y - k, height)) * width + x] +
                                                 tmp[static_cast<std::size_t>(reflect(y + k, height)) * width + x]);
      out[static_cast<std::size_t>(y) * width + x] = acc;
    }
  return out;
}

void max_normalize(std::vector<float>& values) {
  float mx = 0.0f;
  for (float v : values) {
    if (v < 0.0f || !std::isfinite(v)) throw std::invalid_argument("evidence maps must be finite and nonnegative");
    mx = std::max(mx, v);
  }
  if (mx <= 0.0f) return;
  for (auto& v : values) v = std::min(1.0f, v / mx);
  // Division can leave the maximum a hair under 1.
  *std::max_element(values.begin(), values.end()) = 1.0f;
}

std::vector<double> input_gradient_saliency(const dl::MicroCnnModel& model, const PreprocessedImage& image,
                                            double sigma) {
  model.check_finite();
  const auto& t = image.tensor;
  if (t.rank() != 3 || t.dim(0) != 3 || static_cast<int>(t.dim(1)) != model.config().input_size)
    throw std::invalid_argument("saliency: image " + dl::to_string(t.shape()) + " does not match model input size " +
                                std::to_string(model.config().input_size));
  const auto s = t.dim(1);
  dl::Tensor input({1, 3, s, s}, {t.values().begin(), t.values().end()}, true);
  const auto k = static_cast<std::size_t>(model.config().output_size());
  std::vector<float> coeffs(k);
  for (std::size_t g = 0; g < k; ++g) coeffs[g] = static_cast<float>(g);
  const auto score = dl::weighted_sum(dl::softmax(model.logits(input)), std::span<const float>(coeffs));
  std::vector<double> plane(s * s, 0.0);
  if (score.requires_grad()) {
    score.backward();
    if (input.has_grad()) {
      const auto g = input.grad();
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < s * s; ++i) plane[i] += std::abs(static_cast<double>(g[c * s * s + i]));
    }
  }
  return smooth(plane, static_cast<int>(s), static_cast<int>(s), sigma);
}

namespace {

EvidenceMap make_map(const std::vector<double>& plane, int side, const PreprocessedImage& image, std::string model_id) {
  EvidenceMap map;
  map.width = map.height = side;
  map.values.assign(plane.begin(), plane.end());
  max_normalize(map.values);
  map.source_id = image.source_id;
  map.model_id = std::move(model_id);
  map.crop = image.fov_bbox;
  return map;
}

}  // namespace

EvidenceMap input_gradient_map(const dl::MicroCnnModel& model, const PreprocessedImage& image, double sigma) {
  const auto plane = input_gradient_saliency(model, image, sigma);
  return make_map(plane, model.config().input_size, image, model.meta.task);
}

EvidenceMap ensemble_gradient_map(const Ensemble& ensemble, MultiScaleImage& image, double sigma) {
  ensemble.validate();
  const auto& first = image.at(ensemble.members.front().config().input_size);
  const int side = std::max(1, first.fov_bbox.side);
  std::vector<double> acc(static_cast<std::size_t>(side) * side, 0.0);
  for (const auto& m : ensemble.members) {
    const int s = m.config().input_size;
    const auto plane = input_gradient_saliency(m, image.at(s), sigma);
    const auto up = resample_square(plane, s, side);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += std::max(0.0, up[i]);
  }
  for (auto& v : acc) v /= static_cast<double>(ensemble.members.size());
  return make_map(acc, side, first, "ensemble");
}

EvidenceMap resize_to_crop(const EvidenceMap& map) {
  if (map.width == map.crop.side && map.height == map.crop.side) return map;
  if (map.width != map.height) throw std::invalid_argument("resize_to_crop expects a square map");
  std::vector<double> plane(map.values.begin(), map.values.end());
  const auto up = resample_square(plane, map.width, map.crop.side);
  EvidenceMap out = map;
  out.width = out.height = map.crop.side;
  out.values.resize(up.size());
  for (std::size_t i = 0; i < up.size(); ++i) out.values[i] = static_cast<float>(std::clamp(up[i], 0.0, 1.0));
  return out;
}

RawImage overlay_green(const RawImage& raw, const EvidenceMap& map, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("overlay threshold must be in [0,1]");
  const auto& box = map.crop;
  if (map.width != box.side || map.height != box.side || box.x < 0 || box.y < 0 || box.x + box.side > raw.width ||
      box.y + box.side > raw.height)
    throw std::invalid_argument("overlay: " + std::to_string(map.width) + "x" + std::to_string(map.height) +
                                " map does not fit crop of side " + std::to_string(box.side) + " in a " +
                                std::to_string(raw.width) + "x" + std::to_string(raw.height) + " image");
  RawImage out = raw;
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x) {
      const double v = map.at(x, y);
      if (v < threshold || v <= 0.0) continue;
      auto& g = out.at(box.x + x, box.y + y, 1);
      g = static_cast<std::uint8_t>(std::lround(g + v * (255.0 - g)));
    }
  return out;
}

std::pair<int, int> argmax_in_raw(const EvidenceMap& map) {
  const auto [mx, my] = map.argmax();
  const double scale = static_cast<double>(map.crop.side) / map.width;
  const int x = map.crop.x + std::min(map.crop.side - 1, static_cast<int>(std::floor((mx + 0.5) * scale)));
  const int y = map.crop.y + std::min(map.crop.side - 1, static_cast<int>(std::floor((my + 0.5) * scale)));
  return {x, y};
}

bool hits_dilated_mask(std::span<const std::uint8_t> mask, int width, int height, int x, int y, double radius) {
  if (mask.size() != static_cast<std::size_t>(width) * height) throw std::invalid_argument("mask size mismatch");
  const int r = static_cast<int>(std::ceil(radius));
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      const int xx = x + dx, yy = y + dy;
      if (xx < 0 || yy < 0 || xx >= width || yy >= height) continue;
      if (dx * dx + dy * dy > radius * radius) continue;
      if (mask[static_cast<std::size_t>(yy) * width + xx]) return true;
    }
  return false;
}

void write_map_png16(const std::filesystem::path& path, const EvidenceMap& map) {
  std::vector<std::uint16_t> gray(map.values.size());
  for (std::size_t i = 0; i < gray.size(); ++i)
    gray[i] = static_cast<std::uint16_t>(std::lround(std::clamp(map.values[i], 0.0f, 1.0f) * 65535.0f));
  write_gray16_png(path, map.width, map.height, gray);
}

}  // namespace retiscreen
