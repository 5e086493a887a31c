#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "retiscreen/data_model.hpp"
#include "retiscreen/micro_cnn.hpp"
#include "retiscreen/preprocessing.hpp"

namespace retiscreen {

enum class Task { laterality, referable, severity };

std::string_view to_string(Task task);
Task task_from_string(std::string_view text);
/// Head arity: 2 for laterality and referable, 5 for severity.
int task_classes(Task task);
dl::MicroCnnConfig cnn_config_for(Task task, dl::MicroCnnConfig base);

/// Images of one eye sharing the eye-level label (0/1 referable, or grade).
struct EyeBag {
  std::string eye_id;
  std::vector<PreprocessedImage> images;
  int label = 0;
};

struct TrainConfig {
  Task task = Task::referable;
  dl::MicroCnnConfig cnn;
  int max_epochs = 30;
  int patience = 6;
  std::uint64_t seed = 1;
  std::size_t batch_size = 16;
  /// Class weight = (N / (K·n_c))^power; 0 disables weighting.
  double class_weight_power = 0.5;
  /// Random horizontal flips (laterality labels flip with the image).
  bool mirror_augment = true;

  void validate() const;
};

/// "Most pathological" score of a probability vector: p[1] for two-class
/// heads, expected grade Σ g·p_g for the severity head.
double pathology_score(std::span<const float> probabilities);

/// First index of the maximum; ties go to the lowest index.
std::size_t argmax_first(std::span<const double> scores);

/// Per-image pathology scores of a bag under the model.
std::vector<double> bag_scores(const dl::MicroCnnModel& model, const EyeBag& bag);
std::size_t em_select(const dl::MicroCnnModel& model, const EyeBag& bag);

/// Probability rows for many images, evaluated in chunks.
std::vector<std::vector<float>> predict_many(const dl::MicroCnnModel& model, std::span<const dl::Tensor> images,
                                             std::size_t chunk = 64);

struct EpochRecord {
  int epoch = 0;
  double learning_rate = 0.0;
  double train_loss = 0.0;
  double val_metric = 0.0;
  std::size_t selection_changes = 0;  // eyes whose selected image changed since the previous epoch
  std::size_t trained_images = 0;     // images consumed by the maximization step
  bool improved = false;
};

struct TrainResult {
  dl::MicroCnnModel model;  // best-validation snapshot
  std::vector<EpochRecord> history;
  int best_epoch = -1;
};

/// Optional per-epoch observer (progress logging).
using EpochCallback = std::function<void(const EpochRecord&)>;

/// "Grade ≥ t" scores Σ_{g≥t} p_g for t = 1..4 from a five-class output.
std::array<double, 4> grade_tail_scores(std::span<const float> probabilities);

/// Eye-level metric from per-image probability rows; owner[i] is the eye of
/// image i and labels are per eye.
double eye_metric_from_probs(Task task, std::span<const std::vector<float>> probs, std::span<const std::size_t> owner,
                             std::span<const int> labels);

/// Eye-level validation metric: max-aggregated AUC (referable) or the mean of
/// the four "grade ≥ t" AUCs that have both classes (severity).
double eye_validation_metric(Task task, const dl::MicroCnnModel& model, std::span<const EyeBag> bags);

/// Alternates selection of each eye's most pathological image with one
/// epoch of training on those images. Epoch 0 selects index 0 everywhere.
/// Keeps the best validation snapshot and stops once more than `patience`
/// consecutive epochs fail to improve it.
TrainResult fit_eye_model(std::span<const EyeBag> bags, std::span<const EyeBag> val_bags, const TrainConfig& config,
                          const EpochCallback& on_epoch = {});

/// Supervised per-image training (laterality), validated on accuracy.
TrainResult fit_image_model(std::span<const dl::LabeledTensor> images, std::span<const dl::LabeledTensor> val,
                            const TrainConfig& config, const EpochCallback& on_epoch = {});

double accuracy(const dl::MicroCnnModel& model, std::span<const dl::LabeledTensor> images);

/// Ordering of one epoch: every class is shuffled, then classes are
/// interleaved by relative position so each stretch of the sequence carries
/// them in proportion.
std::vector<std::size_t> stratified_order(std::span<const int> labels, std::uint64_t seed);

/// Eye bags for gradable eyes of the manifest (restricted to the given
/// patients when non-null), grouped by recorded laterality and preprocessed
/// at `input_size`. Images without recorded laterality are skipped.
std::vector<EyeBag> build_eye_bags(const Manifest& manifest, const std::set<std::string>* patients, Task task,
                                   int input_size);

/// Per-image laterality examples (label 0 = left, 1 = right).
std::vector<dl::LabeledTensor> build_laterality_set(const Manifest& manifest, const std::set<std::string>* patients,
                                                    int input_size);

/// Left-right flip of a C×H×W tensor.
dl::Tensor mirror_tensor(const dl::Tensor& image);

std::string history_csv(std::span<const EpochRecord> history);

}  // namespace retiscreen
