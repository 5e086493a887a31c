#include <gtest/gtest.h>

#include <cmath>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "retiscreen/inference_engine.hpp"
#include "retiscreen/rng.hpp"
#include "retiscreen/synthetic_fundus.hpp"
#include "retiscreen/training_mil.hpp"

using namespace retiscreen;
using namespace retiscreen::dl;

namespace {

MicroCnnModel random_model(int input_size, std::uint64_t seed, int classes = 2) {
  MicroCnnConfig c;
  c.input_size = input_size;
  c.stage_count = 2;
  c.base_channels = 4;
  c.head = classes == 2 ? HeadKind::binary : HeadKind::multiclass;
  c.classes = classes;
  c.seed = seed;
  return MicroCnnModel(c);
}

std::vector<LabeledTensor> laterality_images(int n, std::uint64_t seed) {
  SynthParams params;
  Rng rng(seed);
  std::vector<LabeledTensor> out;
  for (int i = 0; i < n; ++i) {
    const Side side = i % 2 ? Side::right : Side::left;
    const auto img = generate_image(grade_from_int(static_cast<int>(rng.uniform_int(0, 4))), rng.bernoulli(0.2), side,
                                    params, derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    out.push_back({normalize(img.raw, 32).tensor, side == Side::right ? 1 : 0});
  }
  return out;
}

// Shared fixture: one trained laterality model and a 100-patient synthetic dataset.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new oracle::TempDir("infer");
    SynthParams params;
    manifest_ = new Manifest(generate_dataset(100, kDefaultGradeDistribution, params, 77, dir_->path() / "data"));
    TrainConfig cfg;
    cfg.task = Task::laterality;
    cfg.cnn = cnn_config_for(Task::laterality, MicroCnnConfig{});
    cfg.cnn.input_size = 32;
    cfg.cnn.seed = 3;
    cfg.max_epochs = 8;
    cfg.patience = 2;
    const auto train = laterality_images(2000, 1);
    const auto val = laterality_images(300, 2);
    models_ = new InferenceModels{fit_image_model(train, val, cfg).model, Ensemble{}, Ensemble{}};
    models_->referable.members = {random_model(32, 11), random_model(16, 12)};
    models_->severity->members = {random_model(32, 13, 5)};
  }
  static void TearDownTestSuite() {
    delete models_;
    delete manifest_;
    delete dir_;
  }
  static InferenceOptions options(double threshold = 0.5) {
    InferenceOptions o;
    o.threshold = threshold;
    o.heatmaps = false;
    return o;
  }
  static oracle::TempDir* dir_;
  static Manifest* manifest_;
  static InferenceModels* models_;
};
oracle::TempDir* Pipeline::dir_ = nullptr;
Manifest* Pipeline::manifest_ = nullptr;
InferenceModels* Pipeline::models_ = nullptr;

}  // namespace

TEST(ScoreEye, MaximumOrNotAssessed) {
  const double two[] = {0.2, 0.7};
  EXPECT_DOUBLE_EQ(score_eye(two), 0.7);
  const double one[] = {0.35};
  EXPECT_DOUBLE_EQ(score_eye(one), 0.35);
  EXPECT_TRUE(std::isnan(score_eye({})));
}

TEST(ScoreEye, MonotoneUnderSetInclusion) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(static_cast<std::size_t>(rng.uniform_int(1, 6)));
    for (auto& x : s) x = rng.uniform();
    const double before = score_eye(s);
    s.push_back(rng.uniform());
    EXPECT_GE(score_eye(s), before);
  }
}

TEST(ClassifyLaterality, ProbabilityIsWinningComponent) {
  const auto model = random_model(32, 4);
  SynthParams p;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto raw = generate_image(Grade::none, false, Side::left, p, s).raw;
    const auto [side, prob] = classify_laterality(model, raw);
    EXPECT_GE(prob, 0.5);
    EXPECT_LE(prob, 1.0);
    const auto probs = forward(model, normalize(raw, 32).tensor);
    EXPECT_EQ(side, probs[1] > probs[0] ? Side::right : Side::left);
    EXPECT_EQ(classify_laterality(model, raw), std::make_pair(side, prob));
  }
}

TEST_F(Pipeline, TrainedLateralityConfidentOnHeldOutLeftImages) {
  SynthParams p;
  int confident = 0;
  for (std::uint64_t s = 0; s < 500; ++s) {
    const auto raw = generate_image(grade_from_int(static_cast<int>(s % 5)), false, Side::left, p, 50000 + s).raw;
    const auto [side, prob] = classify_laterality(models_->laterality, raw);
    confident += side == Side::left && prob > 0.9;
  }
  EXPECT_GE(confident, 495);
}

TEST_F(Pipeline, FourImageExamsGroupTwoAndTwo) {
  int grouped = 0;
  for (const auto& exam : manifest_->exams) {
    const auto report = diagnose_exam(exam, *manifest_, *models_, options());
    grouped += report.eye(Side::left).image_count == 2 && report.eye(Side::right).image_count == 2;
    for (const auto& img : report.images) EXPECT_EQ(img.recorded_side.has_value(), true);
  }
  EXPECT_GE(grouped, 95);
}

TEST_F(Pipeline, EyeScoresAreMaxOfImagesAndDecisionsFollowThreshold) {
  for (std::size_t e = 0; e < 20; ++e) {
    const auto report = diagnose_exam(manifest_->exams[e], *manifest_, *models_, options(0.45));
    for (Side side : {Side::left, Side::right}) {
      const auto& eye = report.eye(side);
      if (!eye.assessed) continue;
      double mx = -1.0;
      std::array<double, 4> tails{-1, -1, -1, -1};
      for (auto i : eye.image_indices) {
        mx = std::max(mx, report.images[i].referable_probability);
        for (std::size_t t = 0; t < 4; ++t) tails[t] = std::max(tails[t], report.images[i].grade_scores[t]);
        EXPECT_EQ(report.images[i].predicted_side, side);
      }
      EXPECT_DOUBLE_EQ(eye.referable_score, mx);
      EXPECT_EQ(eye.grade_scores, tails);
      EXPECT_EQ(eye.referable, eye.referable_score >= 0.45);
      for (std::size_t t = 1; t < 4; ++t) EXPECT_LE(eye.grade_scores[t], eye.grade_scores[t - 1]);
    }
    for (const auto& img : report.images)
      for (std::size_t t = 1; t < 4; ++t) EXPECT_LE(img.grade_scores[t], img.grade_scores[t - 1] + 1e-12);
  }
}

TEST_F(Pipeline, AllLeftExamMarksRightEyeNotAssessed) {
  ExamRecord exam = manifest_->exams[0];
  std::vector<ImageEntry> left;
  for (const auto& img : exam.images)
    if (img.laterality == Side::left) left.push_back(img);
  exam.images = left;
  const auto report = diagnose_exam(exam, *manifest_, *models_, options());
  ASSERT_EQ(report.eye(Side::left).image_count, 2u);
  EXPECT_FALSE(report.eye(Side::right).assessed);
  EXPECT_TRUE(std::isnan(report.eye(Side::right).referable_score));
  EXPECT_FALSE(report.eye(Side::right).referable);
  EXPECT_FALSE(report.flags.empty());
  const auto j = exam_report_json(report);
  EXPECT_EQ(j["eyes"]["right"]["assessed"], false);
}

TEST_F(Pipeline, AddingAnImageNeverLowersEyeScore) {
  for (std::size_t e = 0; e < 10; ++e) {
    ExamRecord exam = manifest_->exams[e];
    const auto full = diagnose_exam(exam, *manifest_, *models_, options());
    ExamRecord fewer = exam;
    fewer.images.pop_back();
    const auto reduced = diagnose_exam(fewer, *manifest_, *models_, options());
    for (Side side : {Side::left, Side::right})
      if (reduced.eye(side).assessed) {
        EXPECT_GE(full.eye(side).referable_score, reduced.eye(side).referable_score);
      }
  }
}

TEST_F(Pipeline, UnreadableImagesAreFlaggedAndSkipped) {
  ExamRecord exam = manifest_->exams[1];
  exam.images.push_back({"images/missing.png", Side::left});
  const auto report = diagnose_exam(exam, *manifest_, *models_, options());
  ASSERT_EQ(report.images.size(), 5u);
  EXPECT_FALSE(report.images.back().readable);
  EXPECT_FALSE(report.images.back().error.empty());
  EXPECT_TRUE(report.error.empty());
  EXPECT_EQ(report.eye(Side::left).image_count + report.eye(Side::right).image_count, 4u);

  ExamRecord broken = exam;
  broken.images = {{"images/missing.png", Side::left}, {"images/also-missing.png", Side::right}};
  const auto bad = diagnose_exam(broken, *manifest_, *models_, options());
  EXPECT_FALSE(bad.error.empty());
  EXPECT_FALSE(bad.eye(Side::left).assessed);
  EXPECT_FALSE(bad.eye(Side::right).assessed);
}

TEST_F(Pipeline, LatencyRecordedAndConsistent) {
  auto o = options();
  o.heatmaps = true;
  o.heatmap_dir = dir_->path() / "maps";
  const auto report = diagnose_exam(manifest_->exams[2], *manifest_, *models_, o);
  double stage_total = 0.0;
  for (const auto& img : report.images) {
    EXPECT_GT(img.latency_ms, 0.0);
    EXPECT_GE(img.latency_ms, img.stages.sum() - 1.0);
    EXPECT_GT(img.stages.heatmap_ms, 0.0);
    EXPECT_TRUE(std::filesystem::exists(img.heatmap_path)) << img.heatmap_path;
    stage_total += img.stages.sum();
  }
  EXPECT_GE(report.total_ms, stage_total - 1.0);
  const auto j = exam_report_json(report);
  EXPECT_TRUE(j.contains("total_ms"));
  EXPECT_TRUE(j["images"][0].contains("latency_ms"));
  EXPECT_FALSE(exam_report_json(report, false).contains("total_ms"));
}

TEST_F(Pipeline, DecisionsAreDeterministic) {
  for (std::size_t e = 0; e < 5; ++e) {
    const auto a = diagnose_exam(manifest_->exams[e], *manifest_, *models_, options());
    const auto b = diagnose_exam(manifest_->exams[e], *manifest_, *models_, options());
    EXPECT_EQ(exam_report_json(a, false).dump(), exam_report_json(b, false).dump());
  }
}

TEST_F(Pipeline, ThresholdMustBeInsideUnitInterval) {
  EXPECT_THROW(diagnose_exam(manifest_->exams[0], *manifest_, *models_, options(0.0)), std::invalid_argument);
  EXPECT_THROW(diagnose_exam(manifest_->exams[0], *manifest_, *models_, options(1.0)), std::invalid_argument);
}

TEST_F(Pipeline, SummaryCsvHasOneRowPerEye) {
  const auto report = diagnose_exam(manifest_->exams[3], *manifest_, *models_, options());
  EXPECT_EQ(summary_csv_header(), "exam_id,eye,score,decision,latency_ms\n");
  const auto rows = summary_csv_rows(report);
  EXPECT_EQ(std::count(rows.begin(), rows.end(), '\n'), 2);
  EXPECT_EQ(rows.rfind(report.exam_id + ",left,", 0), 0u);
}
