#include "retiscreen/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "retiscreen/file_util.hpp"
#include "retiscreen/rng.hpp"

namespace retiscreen {

Grade grade_from_int(int value) {
  if (value < 0 || value > 4) throw std::invalid_argument("ICDR grade must be in 0..4, got " + std::to_string(value));
  return static_cast<Grade>(value);
}

std::string_view grade_name(Grade g) {
  switch (g) {
    case Grade::none: return "no DR";
    case Grade::mild: return "mild NPDR";
    case Grade::moderate: return "moderate NPDR";
    case Grade::severe: return "severe NPDR";
    case Grade::proliferative: return "PDR";
  }
  return "?";
}

std::string_view to_string(Side side) { return side == Side::left ? "left" : "right"; }

Side side_from_string(std::string_view text) {
  if (text == "left" || text == "L" || text == "OS") return Side::left;
  if (text == "right" || text == "R" || text == "OD") return Side::right;
  throw std::invalid_argument("unknown laterality '" + std::string(text) + "'");
}

void ExamRecord::validate() const {
  if (images.empty()) throw std::invalid_argument("exam " + exam_id + " has no images");
  std::set<std::string> seen;
  for (const auto& img : images)
    if (!seen.insert(img.path).second)
      throw std::invalid_argument("exam " + exam_id + " lists image " + img.path + " twice");
}

bool referable_label(const EyeGrade& eye) {
  if (!eye.gradable) throw std::invalid_argument("referable_label: ungradable eye");
  const int g = to_int(eye.grade);
  return g >= 2 || (g == 1 && eye.me);
}

bool vision_threatening_label(const EyeGrade& eye) {
  if (!eye.gradable) throw std::invalid_argument("vision_threatening_label: ungradable eye");
  return to_int(eye.grade) >= 3;
}

bool grade_at_least(Grade grade, int threshold) {
  if (threshold < 1 || threshold > 4) throw std::invalid_argument("grade threshold must be in 1..4");
  return to_int(grade) >= threshold;
}

std::string eye_id(const ExamRecord& exam, Side side) { return exam.exam_id + ":" + std::string(to_string(side)); }

std::filesystem::path Manifest::resolve(const std::string& image_path) const {
  std::filesystem::path p(image_path);
  if (p.is_absolute() || base_dir.empty()) return p;
  return base_dir / p;
}

std::vector<std::string> Manifest::patient_ids() const {
  std::set<std::string> ids;
  for (const auto& e : exams) ids.insert(e.patient_id);
  return {ids.begin(), ids.end()};
}

namespace {

EyeGrade eye_from_json(const nlohmann::json& j) {
  EyeGrade eye;
  eye.gradable = j.value("gradable", true);
  eye.grader_count = j.value("grader_count", 1);
  if (eye.grader_count < 0) throw std::invalid_argument("grader_count must be >= 0");
  if (eye.gradable) {
    eye.grade = grade_from_int(j.at("grade").get<int>());
    eye.me = j.value("me", false);
  }
  if (j.contains("other_graders"))
    for (const auto& g : j.at("other_graders"))
      eye.other_graders.push_back({grade_from_int(g.at("grade").get<int>()), g.value("me", false)});
  return eye;
}

nlohmann::json eye_to_json(const EyeGrade& eye) {
  nlohmann::json j;
  if (eye.gradable) {
    j["grade"] = to_int(eye.grade);
    j["me"] = eye.me;
  }
  j["gradable"] = eye.gradable;
  j["grader_count"] = eye.grader_count;
  if (!eye.other_graders.empty()) {
    auto& arr = j["other_graders"] = nlohmann::json::array();
    for (const auto& g : eye.other_graders) arr.push_back({{"grade", to_int(g.grade)}, {"me", g.me}});
  }
  return j;
}

}  // namespace

ExamRecord exam_from_json(const nlohmann::json& j) {
  ExamRecord exam;
  exam.patient_id = j.at("patient_id").get<std::string>();
  exam.exam_id = j.at("exam_id").get<std::string>();
  for (const auto& img : j.at("images")) {
    ImageEntry entry;
    entry.path = img.at("path").get<std::string>();
    if (img.contains("laterality") && !img["laterality"].is_null())
      entry.laterality = side_from_string(img["laterality"].get<std::string>());
    exam.images.push_back(std::move(entry));
  }
  if (j.contains("eyes")) {
    const auto& eyes = j.at("eyes");
    if (eyes.contains("left") && !eyes["left"].is_null()) exam.left_eye = eye_from_json(eyes["left"]);
    if (eyes.contains("right") && !eyes["right"].is_null()) exam.right_eye = eye_from_json(eyes["right"]);
  }
  exam.validate();
  return exam;
}

nlohmann::json exam_to_json(const ExamRecord& exam) {
  nlohmann::json j;
  j["patient_id"] = exam.patient_id;
  j["exam_id"] = exam.exam_id;
  auto& images = j["images"] = nlohmann::json::array();
  for (const auto& img : exam.images) {
    nlohmann::json e{{"path", img.path}};
    if (img.laterality) e["laterality"] = std::string(to_string(*img.laterality));
    images.push_back(std::move(e));
  }
  nlohmann::json eyes = nlohmann::json::object();
  if (exam.left_eye) eyes["left"] = eye_to_json(*exam.left_eye);
  if (exam.right_eye) eyes["right"] = eye_to_json(*exam.right_eye);
  j["eyes"] = std::move(eyes);
  return j;
}

Manifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir) {
  Manifest manifest;
  manifest.base_dir = base_dir;
  std::set<std::string> exam_ids;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = std::min(text.find('\n', start), text.size());
    auto line = text.substr(start, end - start);
    ++line_no;
    start = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) {
      if (end == text.size()) break;
      continue;
    }
    try {
      auto exam = exam_from_json(nlohmann::json::parse(line));
      if (!exam_ids.insert(exam.exam_id).second) throw std::invalid_argument("duplicate exam_id " + exam.exam_id);
      manifest.exams.push_back(std::move(exam));
    } catch (const std::exception& e) {
      throw DataError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    if (end == text.size()) break;
  }
  return manifest;
}

Manifest read_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_text_file(path), path.parent_path());
}

std::string format_manifest(const Manifest& manifest) {
  std::string out;
  for (const auto& exam : manifest.exams) {
    out += exam_to_json(exam).dump();
    out += '\n';
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  write_text_atomic(path, format_manifest(manifest));
}

int SplitSpec::part_of(const std::string& patient_id) const {
  for (std::size_t i = 0; i < parts.size(); ++i)
    if (parts[i].count(patient_id)) return static_cast<int>(i);
  return -1;
}

SplitSpec split_by_patient(const Manifest& manifest, std::span<const double> fractions, std::uint64_t seed) {
  if (fractions.empty()) throw std::invalid_argument("split_by_patient: no fractions");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw std::invalid_argument("split_by_patient: fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split_by_patient: fractions must sum to 1");
  auto patients = manifest.patient_ids();
  const std::size_t n = patients.size();
  if (n < fractions.size())
    throw std::invalid_argument("split_by_patient: " + std::to_string(n) + " patients cannot fill " +
                                std::to_string(fractions.size()) + " splits");

  // Largest-remainder apportionment; ties resolved toward earlier parts.
  std::vector<std::size_t> counts(fractions.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double exact = fractions[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    assigned += counts[i];
    remainders.emplace_back(exact - static_cast<double>(counts[i]), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < n; ++r, ++assigned) ++counts[remainders[r % remainders.size()].second];
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] > 0) continue;
    const auto donor = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    --counts[donor];
    ++counts[i];
  }

  Rng rng(derive_seed(seed, {0x5b11}));
  rng.shuffle(patients);
  SplitSpec split;
  split.parts.resize(fractions.size());
  std::size_t next = 0;
  for (std::size_t i = 0; i < counts.size(); ++i)
    for (std::size_t c = 0; c < counts[i]; ++c) split.parts[i].insert(patients[next++]);
  return split;
}

Manifest subset(const Manifest& manifest, const std::set<std::string>& patients) {
  Manifest out;
  out.base_dir = manifest.base_dir;
  for (const auto& exam : manifest.exams)
    if (patients.count(exam.patient_id)) out.exams.push_back(exam);
  return out;
}

nlohmann::json split_to_json(const SplitSpec& split) {
  static const char* names[] = {"train", "validation", "test"};
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < split.parts.size(); ++i) {
    const std::string key = i < 3 ? names[i] : "part" + std::to_string(i);
    j[key] = std::vector<std::string>(split.parts[i].begin(), split.parts[i].end());
  }
  return j;
}

SplitSpec split_from_json(const nlohmann::json& j) {
  SplitSpec split;
  for (const char* key : {"train", "validation", "test"}) {
    if (!j.contains(key)) break;
    const auto ids = j.at(key).get<std::vector<std::string>>();
    split.parts.emplace_back(ids.begin(), ids.end());
  }
  if (split.parts.size() < 2) throw DataError("split file needs at least train and validation parts");
  std::set<std::string> seen;
  for (const auto& part : split.parts)
    for (const auto& id : part)
      if (!seen.insert(id).second) throw DataError("split file lists patient " + id + " in two parts");
  return split;
}

}  // namespace retiscreen
