#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace retiscreen {

/// ICDR severity scale.
enum class Grade : std::uint8_t { none = 0, mild = 1, moderate = 2, severe = 3, proliferative = 4 };

Grade grade_from_int(int value);
inline int to_int(Grade g) { return static_cast<int>(g); }
std::string_view grade_name(Grade g);

enum class Side : std::uint8_t { left = 0, right = 1 };

std::string_view to_string(Side side);
Side side_from_string(std::string_view text);
inline Side opposite(Side side) { return side == Side::left ? Side::right : Side::left; }

struct GraderLabel {
  Grade grade = Grade::none;
  bool me = false;
};

struct EyeGrade {
  Grade grade = Grade::none;
  bool me = false;  // macular edema
  bool gradable = true;
  int grader_count = 1;
  /// Labels of additional graders, if the export carries them. Training uses
  /// grade/me (the adjudicated label) only.
  std::vector<GraderLabel> other_graders;
};

struct ImageEntry {
  std::string path;  // relative to the manifest directory unless absolute
  std::optional<Side> laterality;
};

struct ExamRecord {
  std::string patient_id;
  std::string exam_id;
  std::vector<ImageEntry> images;
  std::optional<EyeGrade> left_eye;
  std::optional<EyeGrade> right_eye;

  const std::optional<EyeGrade>& eye(Side side) const { return side == Side::left ? left_eye : right_eye; }
  std::optional<EyeGrade>& eye(Side side) { return side == Side::left ? left_eye : right_eye; }
  /// Throws std::invalid_argument unless the record has ≥ 1 image with unique paths.
  void validate() const;
};

/// Referable DR: moderate NPDR or worse, or mild NPDR with macular edema.
bool referable_label(const EyeGrade& eye);
/// Vision-threatening DR: severe NPDR or worse, with or without macular edema.
bool vision_threatening_label(const EyeGrade& eye);
/// Binarization "grade ≥ threshold" for threshold ∈ {1,2,3,4}.
bool grade_at_least(Grade grade, int threshold);

/// Identifier of one eye within an exam: "<exam_id>:<side>".
std::string eye_id(const ExamRecord& exam, Side side);

struct Manifest {
  std::vector<ExamRecord> exams;
  std::filesystem::path base_dir;  // image paths resolve against this

  std::filesystem::path resolve(const std::string& image_path) const;
  std::vector<std::string> patient_ids() const;  // sorted, unique
};

ExamRecord exam_from_json(const nlohmann::json& j);
nlohmann::json exam_to_json(const ExamRecord& exam);

/// Parses JSON Lines (one exam per line, blank lines skipped, unknown fields
/// ignored). Throws DataError naming the offending line.
Manifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir = {});
Manifest read_manifest(const std::filesystem::path& path);
std::string format_manifest(const Manifest& manifest);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

/// Disjoint patient-id sets; index 0 = train, 1 = validation, 2 = test.
struct SplitSpec {
  std::vector<std::set<std::string>> parts;

  const std::set<std::string>& train() const { return parts.at(0); }
  const std::set<std::string>& validation() const { return parts.at(1); }
  const std::set<std::string>& test() const { return parts.at(2); }
  /// Index of the part holding the patient, or -1.
  int part_of(const std::string& patient_id) const;
};

/// Seeded shuffle of patients, then consecutive blocks sized by the fractions
/// (largest-remainder rounding). All exams of a patient share a part.
SplitSpec split_by_patient(const Manifest& manifest, std::span<const double> fractions, std::uint64_t seed);

/// Exams whose patient is in the given part.
Manifest subset(const Manifest& manifest, const std::set<std::string>& patients);

nlohmann::json split_to_json(const SplitSpec& split);
SplitSpec split_from_json(const nlohmann::json& j);

}  // namespace retiscreen
