#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "retiscreen/data_model.hpp"
#include "retiscreen/image.hpp"

namespace retiscreen {

/// Knobs of the fundus-like image generator. Image content is a desk-scale
/// stand-in: a dark circular field, a bright disc blob whose horizontal side
/// encodes laterality, red dots whose count grows with grade, and a yellow
/// exudate cluster near the centre for macular edema.
struct SynthParams {
  int image_size = 64;
  std::array<std::pair<int, int>, 5> lesion_counts_by_grade{{{0, 0}, {1, 2}, {5, 9}, {12, 18}, {22, 30}}};
  std::array<double, 5> me_probability_by_grade{0.0, 0.1, 0.2, 0.3, 0.4};
  double me_exudate_radius = 10.0;  // pixels from the field centre
  double illumination_gradient_amplitude = 0.35;
  double gain_jitter = 0.15;
  double noise_sd = 4.0;
  int images_per_eye = 2;
  std::uint64_t seed = 1;

  /// Throws std::invalid_argument if ranges are not strictly increasing or
  /// grade 0 can have lesions.
  void validate() const;
};

/// Default grade prevalence (none, mild, moderate, severe, PDR).
inline constexpr std::array<double, 5> kDefaultGradeDistribution{0.762, 0.143, 0.066, 0.023, 0.006};

struct SynthImage {
  RawImage raw;
  Side laterality = Side::left;
  std::vector<std::uint8_t> lesion_mask;  // width·height, 255 on lesion or exudate pixels
  EyeGrade eye_grade;
  double disc_x = 0.0;
  double disc_y = 0.0;
  int lesion_count = 0;
};

SynthImage generate_image(Grade grade, bool me, Side laterality, const SynthParams& params, std::uint64_t seed);

/// Writes <id>.png and <id>.mask.png for every image plus manifest.jsonl into
/// out_dir, and returns the manifest. One exam per patient, images_per_eye
/// images per eye, per-eye grades drawn independently from the distribution.
Manifest generate_dataset(int n_patients, std::span<const double> grade_distribution, const SynthParams& params,
                          std::uint64_t seed, const std::filesystem::path& out_dir);

/// Path of the lesion mask written next to an image.
std::filesystem::path mask_path_for(const std::filesystem::path& image_path);

}  // namespace retiscreen
