#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "retiscreen/image.hpp"
#include "retiscreen/micro_cnn.hpp"
#include "retiscreen/preprocessing.hpp"

namespace retiscreen {

struct Ensemble;

/// Per-pixel evidence over the preprocessed crop, values in [0,1].
struct EvidenceMap {
  int width = 0;
  int height = 0;
  std::vector<float> values;  // row-major
  std::string source_id;
  std::string model_id;
  CropBox crop;  // raw-image rectangle the map covers

  float at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  /// Coordinates of the first maximum (row-major scan).
  std::pair<int, int> argmax() const;
};

/// Smoothed absolute input gradient of the pathology score, summed over
/// channels, before normalization (S×S, nonnegative).
std::vector<double> input_gradient_saliency(const dl::MicroCnnModel& model, const PreprocessedImage& image,
                                            double sigma = 2.0);

/// Max-normalized saliency at the model's input size.
EvidenceMap input_gradient_map(const dl::MicroCnnModel& model, const PreprocessedImage& image, double sigma = 2.0);

/// Member saliencies upsampled to the crop's side, averaged, then normalized.
EvidenceMap ensemble_gradient_map(const Ensemble& ensemble, MultiScaleImage& image, double sigma = 2.0);

/// Scales a nonnegative map so its maximum is 1 (all-zero maps stay zero).
void max_normalize(std::vector<float>& values);

/// Separable Gaussian smoothing with mirrored borders (radius ⌈3σ⌉).
std::vector<double> smooth(std::span<const double> plane, int width, int height, double sigma);

/// Resamples a map to the crop side so that it aligns pixel-for-pixel with
/// the raw crop rectangle.
EvidenceMap resize_to_crop(const EvidenceMap& map);

/// Blends the green channel toward 255 by the map value wherever the map is
/// ≥ threshold. The map must cover its crop at raw resolution.
RawImage overlay_green(const RawImage& raw, const EvidenceMap& map, double threshold = 0.5);

/// Raw-image pixel under the map's maximum.
std::pair<int, int> argmax_in_raw(const EvidenceMap& map);

/// True when the raw pixel lies within `radius` px (Euclidean) of a nonzero mask pixel.
bool hits_dilated_mask(std::span<const std::uint8_t> mask, int width, int height, int x, int y, double radius);

void write_map_png16(const std::filesystem::path& path, const EvidenceMap& map);

}  // namespace retiscreen
