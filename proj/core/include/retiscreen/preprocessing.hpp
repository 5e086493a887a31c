#pragma once

#include <deque>
#include <span>
#include <string>
#include <vector>

#include "retiscreen/image.hpp"
#include "retiscreen/tensor.hpp"

namespace retiscreen {

/// Square crop rectangle in raw-image pixel coordinates.
struct CropBox {
  int x = 0;
  int y = 0;
  int side = 0;
  friend bool operator==(const CropBox&, const CropBox&) = default;
};

struct FovCrop {
  RawImage image;
  CropBox box;
  bool fallback = false;    // tight box covered < 25% of the image; centre square used
  bool degenerate = false;  // no pixel above threshold (e.g. fully black)
};

/// Field-of-view crop: tight bounding box of pixels brighter than 10% of the
/// 99th-percentile gray level, grown to a square and kept inside the image.
/// The result is exactly mirror-equivariant.
FovCrop fov_crop(const RawImage& raw);
CropBox fov_box(const RawImage& raw, bool* fallback = nullptr, bool* degenerate = nullptr);

struct PreprocessedImage {
  dl::Tensor tensor;  // 3×S×S
  std::string source_id;
  CropBox fov_bbox;
  bool degenerate = false;
  bool fallback_crop = false;
};

/// crop → bilinear resize to S×S → subtract per-channel Gaussian background
/// (σ = S/6) → standardize each channel (sd floored at 1e-6). Constant
/// images produce an all-zero tensor flagged degenerate.
PreprocessedImage normalize(const RawImage& raw, int target_size, std::string source_id = {});

/// Bilinear resample of a single side×side plane to out×out, sampling about
/// the plane centre so that mirrored input gives exactly mirrored output.
std::vector<double> resample_square(std::span<const double> plane, int side, int out);

/// Resample of a w×h plane to out_w×out_h with the same symmetric scheme.
std::vector<double> resample_plane(std::span<const double> plane, int w, int h, int out_w, int out_h);

/// Separable Gaussian blur (radius ⌈3σ⌉) with point-reflected borders, which
/// reproduces linear ramps exactly.
std::vector<double> gaussian_blur(std::span<const double> plane, int width, int height, double sigma);

/// Sum of a w×h plane accumulated in mirror-symmetric pairs.
double mirror_symmetric_sum(std::span<const double> plane, int width, int height);

}  // namespace retiscreen

namespace retiscreen {

/// One raw image preprocessed lazily at each requested input size, so that
/// models of different sizes share the work.
class MultiScaleImage {
 public:
  MultiScaleImage(RawImage raw, std::string source_id);

  const RawImage& raw() const { return raw_; }
  const std::string& source_id() const { return source_id_; }
  const PreprocessedImage& at(int size);

 private:
  RawImage raw_;
  std::string source_id_;
  std::deque<std::pair<int, PreprocessedImage>> cache_;  // deque keeps references stable
};

}  // namespace retiscreen
