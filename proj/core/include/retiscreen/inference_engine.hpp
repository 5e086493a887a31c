#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "retiscreen/data_model.hpp"
#include "retiscreen/ensembling.hpp"
#include "retiscreen/image.hpp"
#include "retiscreen/micro_cnn.hpp"

namespace retiscreen {

/// Side = argmax of the two-class laterality output (index 0 = left);
/// probability is the winning component.
std::pair<Side, double> classify_laterality(const dl::MicroCnnModel& model, const RawImage& raw);
std::pair<Side, double> classify_laterality(const dl::MicroCnnModel& model, MultiScaleImage& image);

/// Eye-level aggregation: the maximum, or NaN (not assessed) for no images.
double score_eye(std::span<const double> scores);

struct StageTimings {
  double preprocess_ms = 0.0;
  double laterality_ms = 0.0;
  double referable_ms = 0.0;
  double severity_ms = 0.0;
  double heatmap_ms = 0.0;

  double sum() const { return preprocess_ms + laterality_ms + referable_ms + severity_ms + heatmap_ms; }
};

struct ImageResult {
  std::string path;
  bool readable = true;
  std::string error;
  Side predicted_side = Side::left;
  double laterality_probability = 0.0;
  std::optional<Side> recorded_side;  // audit only, never used for grouping
  double referable_probability = 0.0;
  std::vector<std::vector<float>> referable_member_probabilities;
  std::vector<std::vector<float>> referable_member_features;  // filled only with penultimate_features
  std::vector<float> severity_probabilities;  // empty without a severity ensemble
  std::array<double, 4> grade_scores{};       // Σ_{g≥t} p_g, t = 1..4
  std::string heatmap_path;
  double latency_ms = 0.0;
  StageTimings stages;
};

struct EyeResult {
  Side side = Side::left;
  bool assessed = false;
  std::size_t image_count = 0;
  double referable_score = 0.0;           // NaN when not assessed
  std::array<double, 4> grade_scores{};   // per-eye max of image scores
  bool referable = false;
  std::vector<std::size_t> image_indices;
};

struct ExamReport {
  std::string patient_id;
  std::string exam_id;
  double threshold = 0.5;
  std::vector<ImageResult> images;
  std::array<EyeResult, 2> eyes;  // left, right
  std::vector<std::string> flags;
  std::string error;  // nonempty when no image could be read
  double total_ms = 0.0;

  const EyeResult& eye(Side s) const { return eyes[static_cast<std::size_t>(s)]; }
};

struct InferenceModels {
  dl::MicroCnnModel laterality;
  Ensemble referable;
  std::optional<Ensemble> severity;
};

struct InferenceOptions {
  double threshold = 0.5;
  std::optional<std::filesystem::path> heatmap_dir;  // overlays written here when set
  double overlay_threshold = 0.5;
  bool raw_maps = false;  // also write 16-bit evidence maps
  bool heatmaps = true;
  bool penultimate_features = false;  // also record pooled activations of each referable member
};

/// Laterality per image, grouping into eyes by predicted side, per-image
/// scoring and heatmaps, max aggregation per eye, thresholded decision.
ExamReport diagnose_exam(const ExamRecord& exam, const Manifest& manifest, const InferenceModels& models,
                         const InferenceOptions& options);

/// Report JSON; timing fields are omitted when include_timing is false.
nlohmann::json exam_report_json(const ExamReport& report, bool include_timing = true);
std::string summary_csv_header();
std::string summary_csv_rows(const ExamReport& report);

}  // namespace retiscreen
