#include "retiscreen/inference_engine.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "retiscreen/heatmap.hpp"
#include "retiscreen/training_mil.hpp"

namespace retiscreen {

std::pair<Side, double> classify_laterality(const dl::MicroCnnModel& model, MultiScaleImage& image) {
  if (model.config().output_size() != 2) throw std::invalid_argument("laterality model must have two outputs");
  const auto p = dl::forward(model, image.at(model.config().input_size).tensor);
  return p[1] > p[0] ? std::pair{Side::right, static_cast<double>(p[1])} : std::pair{Side::left, static_cast<double>(p[0])};
}

std::pair<Side, double> classify_laterality(const dl::MicroCnnModel& model, const RawImage& raw) {
  MultiScaleImage image(raw, {});
  return classify_laterality(model, image);
}

double score_eye(std::span<const double> scores) {
  if (scores.empty()) return std::numeric_limits<double>::quiet_NaN();
  return *std::max_element(scores.begin(), scores.end());
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::string sanitize(std::string s) {
  for (auto& c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  return s;
}

}  // namespace

ExamReport diagnose_exam(const ExamRecord& exam, const Manifest& manifest, const InferenceModels& models,
                         const InferenceOptions& options) {
  if (!(options.threshold > 0.0 && options.threshold < 1.0))
    throw std::invalid_argument("decision threshold must lie in (0,1)");
  models.referable.validate();
  if (models.referable.output_size() != 2) throw std::invalid_argument("referable ensemble must have two outputs");
  if (models.severity && models.severity->output_size() != 5)
    throw std::invalid_argument("severity ensemble must have five outputs");

  const auto exam_start = Clock::now();
  ExamReport report;
  report.patient_id = exam.patient_id;
  report.exam_id = exam.exam_id;
  report.threshold = options.threshold;

  for (const auto& entry : exam.images) {
    ImageResult r;
    r.path = entry.path;
    r.recorded_side = entry.laterality;
    const auto image_start = Clock::now();
    RawImage raw;
    try {
      raw = read_image(manifest.resolve(entry.path));
    } catch (const std::exception& e) {
      r.readable = false;
      r.error = e.what();
      report.flags.push_back("unreadable image " + entry.path);
      report.images.push_back(std::move(r));
      continue;
    }
    auto t = Clock::now();
    MultiScaleImage image(std::move(raw), entry.path);
    image.at(models.laterality.config().input_size);
    for (int s : models.referable.input_sizes()) image.at(s);
    if (models.severity)
      for (int s : models.severity->input_sizes()) image.at(s);
    r.stages.preprocess_ms = ms_since(t);

    t = Clock::now();
    std::tie(r.predicted_side, r.laterality_probability) = classify_laterality(models.laterality, image);
    r.stages.laterality_ms = ms_since(t);

    t = Clock::now();
    for (const auto& m : models.referable.members) {
      const auto& input = image.at(m.config().input_size).tensor;
      r.referable_member_probabilities.push_back(dl::forward(m, input));
      if (options.penultimate_features) r.referable_member_features.push_back(dl::penultimate(m, input));
    }
    r.referable_probability = mean_probabilities(r.referable_member_probabilities)[1];
    r.stages.referable_ms = ms_since(t);

    if (models.severity) {
      t = Clock::now();
      r.severity_probabilities = ensemble_predict(*models.severity, image);
      r.grade_scores = grade_tail_scores(r.severity_probabilities);
      r.stages.severity_ms = ms_since(t);
    }

    if (options.heatmaps) {
      t = Clock::now();
      const auto map = ensemble_gradient_map(models.referable, image);
      if (options.heatmap_dir) {
        const auto stem = sanitize(exam.exam_id + "_" + std::filesystem::path(entry.path).stem().string());
        const auto out = *options.heatmap_dir / (stem + ".overlay.png");
        write_png(out, overlay_green(image.raw(), map, options.overlay_threshold));
        if (options.raw_maps) write_map_png16(*options.heatmap_dir / (stem + ".map.png"), map);
        r.heatmap_path = out.string();
      }
      r.stages.heatmap_ms = ms_since(t);
    }
    r.latency_ms = ms_since(image_start);
    report.images.push_back(std::move(r));
  }

  std::size_t readable = 0;
  for (std::size_t i = 0; i < report.images.size(); ++i) {
    const auto& r = report.images[i];
    if (!r.readable) continue;
    ++readable;
    report.eyes[static_cast<std::size_t>(r.predicted_side)].image_indices.push_back(i);
  }
  if (readable == 0) report.error = "exam " + exam.exam_id + " has no readable images";

  for (Side side : {Side::left, Side::right}) {
    auto& eye = report.eyes[static_cast<std::size_t>(side)];
    eye.side = side;
    eye.image_count = eye.image_indices.size();
    eye.assessed = eye.image_count > 0;
    std::vector<double> scores;
    for (auto i : eye.image_indices) scores.push_back(report.images[i].referable_probability);
    eye.referable_score = score_eye(scores);
    eye.referable = eye.assessed && eye.referable_score >= options.threshold;
    for (std::size_t t = 0; t < 4; ++t) {
      std::vector<double> g;
      for (auto i : eye.image_indices) g.push_back(report.images[i].grade_scores[t]);
      eye.grade_scores[t] = models.severity ? score_eye(g) : std::numeric_limits<double>::quiet_NaN();
    }
    if (!eye.assessed && readable > 0)
      report.flags.push_back(std::string(to_string(side)) + " eye not assessed: no image classified " +
                             std::string(to_string(side)));
  }
  report.total_ms = ms_since(exam_start);
  return report;
}

namespace {

nlohmann::json nullable(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

}  // namespace

nlohmann::json exam_report_json(const ExamReport& report, bool include_timing) {
  nlohmann::json j;
  j["patient_id"] = report.patient_id;
  j["exam_id"] = report.exam_id;
  j["threshold"] = report.threshold;
  auto& images = j["images"] = nlohmann::json::array();
  for (const auto& r : report.images) {
    nlohmann::json ij{{"path", r.path}, {"readable", r.readable}};
    if (!r.readable) {
      ij["error"] = r.error;
      images.push_back(std::move(ij));
      continue;
    }
    ij["laterality"] = std::string(to_string(r.predicted_side));
    ij["laterality_probability"] = r.laterality_probability;
    if (r.recorded_side) ij["recorded_laterality"] = std::string(to_string(*r.recorded_side));
    ij["referable_probability"] = r.referable_probability;
    if (!r.severity_probabilities.empty()) {
      ij["severity_probabilities"] = r.severity_probabilities;
      ij["grade_scores"] = r.grade_scores;
    }
    if (!r.heatmap_path.empty()) ij["heatmap"] = r.heatmap_path;
    if (include_timing) {
      ij["latency_ms"] = r.latency_ms;
      ij["stage_ms"] = {{"preprocess", r.stages.preprocess_ms},
                        {"laterality", r.stages.laterality_ms},
                        {"referable", r.stages.referable_ms},
                        {"severity", r.stages.severity_ms},
                        {"heatmap", r.stages.heatmap_ms}};
    }
    images.push_back(std::move(ij));
  }
  auto& eyes = j["eyes"] = nlohmann::json::object();
  for (const auto& eye : report.eyes) {
    nlohmann::json ej{{"assessed", eye.assessed}, {"image_count", eye.image_count}};
    if (eye.assessed) {
      ej["referable_score"] = eye.referable_score;
      ej["referable"] = eye.referable;
      ej["grade_scores"] = nlohmann::json::array();
      for (double g : eye.grade_scores) ej["grade_scores"].push_back(nullable(g));
    } else {
      ej["status"] = "not_assessed";
    }
    eyes[std::string(to_string(eye.side))] = std::move(ej);
  }
  if (!report.flags.empty()) j["flags"] = report.flags;
  if (!report.error.empty()) j["error"] = report.error;
  if (include_timing) j["total_ms"] = report.total_ms;
  return j;
}

std::string summary_csv_header() { return "exam_id,eye,score,decision,latency_ms\n"; }

std::string summary_csv_rows(const ExamReport& report) {
  std::string out;
  char buf[256];
  for (const auto& eye : report.eyes) {
    double latency = 0.0;
    for (auto i : eye.image_indices) latency += report.images[i].latency_ms;
    if (eye.assessed)
      std::snprintf(buf, sizeof buf, "%s,%s,%.9g,%s,%.3f\n", report.exam_id.c_str(), std::string(to_string(eye.side)).c_str(),
                    eye.referable_score, eye.referable ? "referable" : "not_referable", latency);
    else
      std::snprintf(buf, sizeof buf, "%s,%s,,not_assessed,%.3f\n", report.exam_id.c_str(),
                    std::string(to_string(eye.side)).c_str(), latency);
    out += buf;
  }
  return out;
}

}  // namespace retiscreen
