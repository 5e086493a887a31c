#include "retiscreen/training_mil.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "retiscreen/eval_stats.hpp"
#include "retiscreen/rng.hpp"

namespace retiscreen {

std::string_view to_string(Task task) {
  switch (task) {
    case Task::laterality: return "laterality";
    case Task::referable: return "referable";
    case Task::severity: return "severity";
  }
  return "?";
}

Task task_from_string(std::string_view text) {
  if (text == "laterality") return Task::laterality;
  if (text == "referable") return Task::referable;
  if (text == "severity") return Task::severity;
  throw std::invalid_argument("unknown task '" + std::string(text) + "'");
}

int task_classes(Task task) { return task == Task::severity ? 5 : 2; }

dl::MicroCnnConfig cnn_config_for(Task task, dl::MicroCnnConfig base) {
  if (task == Task::severity) {
    base.head = dl::HeadKind::multiclass;
    base.classes = 5;
  } else if (task == Task::laterality) {
    base.head = dl::HeadKind::multiclass;
    base.classes = 2;
  } else {
    base.head = dl::HeadKind::binary;
    base.classes = 2;
  }
  return base;
}

void TrainConfig::validate() const {
  cnn.validate();
  if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
  if (patience < 0 || patience >= max_epochs) throw std::invalid_argument("patience must be in [0, max_epochs)");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (cnn.output_size() != task_classes(task))
    throw std::invalid_argument("network head has " + std::to_string(cnn.output_size()) + " outputs but task " +
                                std::string(to_string(task)) + " needs " + std::to_string(task_classes(task)));
}

double pathology_score(std::span<const float> probabilities) {
  double s = 0.0;
  for (std::size_t g = 1; g < probabilities.size(); ++g) s += static_cast<double>(g) * probabilities[g];
  return s;
}

std::size_t argmax_first(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("argmax of an empty list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

std::vector<std::vector<float>> predict_many(const dl::MicroCnnModel& model, std::span<const dl::Tensor> images,
                                             std::size_t chunk) {
  std::vector<std::vector<float>> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const auto count = std::min(chunk, images.size() - start);
    auto rows = model.predict(dl::stack_images(images.subspan(start, count)));
    for (auto& r : rows) out.push_back(std::move(r));
  }
  return out;
}

std::vector<double> bag_scores(const dl::MicroCnnModel& model, const EyeBag& bag) {
  if (bag.images.empty()) throw std::invalid_argument("eye bag " + bag.eye_id + " is empty");
  std::vector<dl::Tensor> images;
  for (const auto& img : bag.images) images.push_back(img.tensor);
  std::vector<double> scores;
  for (const auto& p : predict_many(model, images)) scores.push_back(pathology_score(p));
  return scores;
}

std::size_t em_select(const dl::MicroCnnModel& model, const EyeBag& bag) {
  return argmax_first(bag_scores(model, bag));
}

std::vector<std::size_t> stratified_order(std::span<const int> labels, std::uint64_t seed) {
  Rng rng(seed);
  int max_label = -1;
  for (int l : labels) max_label = std::max(max_label, l);
  std::vector<std::vector<std::size_t>> groups(static_cast<std::size_t>(max_label + 1));
  for (std::size_t i = 0; i < labels.size(); ++i) groups[static_cast<std::size_t>(labels[i])].push_back(i);
  struct Keyed {
    double key;
    std::size_t cls;
    std::size_t index;
  };
  std::vector<Keyed> keyed;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    rng.shuffle(groups[c]);
    const auto n = static_cast<double>(groups[c].size());
    for (std::size_t k = 0; k < groups[c].size(); ++k)
      keyed.push_back({(static_cast<double>(k) + 0.5) / n, c, groups[c][k]});
  }
  std::sort(keyed.begin(), keyed.end(),
            [](const Keyed& a, const Keyed& b) { return a.key != b.key ? a.key < b.key : a.cls < b.cls; });
  std::vector<std::size_t> order;
  for (const auto& k : keyed) order.push_back(k.index);
  return order;
}

dl::Tensor mirror_tensor(const dl::Tensor& image) {
  if (image.rank() != 3) throw std::invalid_argument("mirror_tensor expects C×H×W");
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const auto src = image.values();
  std::vector<float> out(src.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = src[(ch * h + y) * w + (w - 1 - x)];
  return dl::Tensor(image.shape(), std::move(out));
}

namespace {

std::vector<double> class_weights(std::span<const int> labels, int classes, double power) {
  if (power == 0.0) return {};
  std::vector<double> counts(static_cast<std::size_t>(classes), 0.0);
  for (int l : labels) counts[static_cast<std::size_t>(l)] += 1.0;
  const double present = static_cast<double>(std::count_if(counts.begin(), counts.end(), [](double c) { return c > 0; }));
  std::vector<double> w(counts.size(), 0.0);
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (counts[c] > 0) w[c] = std::pow(static_cast<double>(labels.size()) / (present * counts[c]), power);
  return w;
}

// Builds the epoch's example list in stratified order, with optional flips.
std::vector<dl::LabeledTensor> arrange_epoch(std::vector<dl::LabeledTensor> examples, const TrainConfig& config,
                                             int epoch) {
  std::vector<int> labels;
  for (const auto& e : examples) labels.push_back(e.label);
  const auto order = stratified_order(labels, derive_seed(config.seed, {0x0bde, static_cast<std::uint64_t>(epoch)}));
  Rng flip_rng(derive_seed(config.seed, {0xf11b, static_cast<std::uint64_t>(epoch)}));
  std::vector<dl::LabeledTensor> arranged;
  arranged.reserve(examples.size());
  for (auto i : order) {
    auto ex = examples[i];
    if (config.mirror_augment && flip_rng.bernoulli(0.5)) {
      ex.image = mirror_tensor(ex.image);
      if (config.task == Task::laterality) ex.label = 1 - ex.label;
    }
    arranged.push_back(std::move(ex));
  }
  return arranged;
}

void check_labels(std::span<const int> labels, int classes, const char* what) {
  std::vector<int> seen(static_cast<std::size_t>(classes), 0);
  for (int l : labels) {
    if (l < 0 || l >= classes) throw std::invalid_argument(std::string(what) + ": label " + std::to_string(l) +
                                                           " outside 0.." + std::to_string(classes - 1));
    seen[static_cast<std::size_t>(l)] = 1;
  }
  if (std::accumulate(seen.begin(), seen.end(), 0) < 2)
    throw std::invalid_argument(std::string(what) + ": all labels belong to one class");
}

template <typename Step, typename Metric>
TrainResult run_training(const TrainConfig& config, std::string_view task_name, Step&& step, Metric&& metric,
                         const EpochCallback& on_epoch) {
  dl::MicroCnnModel model(config.cnn);
  dl::MomentumSgd optimizer(0.9);
  TrainResult result{model, {}, -1};
  double best = -1.0;
  int stall = 0;
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = dl::step_decay_learning_rate(config.cnn.initial_learning_rate, epoch);
    step(model, optimizer, epoch, rec);
    model.check_finite();
    rec.val_metric = metric(model);
    rec.improved = rec.val_metric > best;
    if (rec.improved) {
      best = rec.val_metric;
      result.model = model;
      result.best_epoch = epoch;
      stall = 0;
    } else {
      ++stall;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stall > config.patience) break;
  }
  result.model.meta.task = std::string(task_name);
  result.model.meta.epochs_run = static_cast<int>(result.history.size());
  result.model.meta.best_validation_metric = best;
  return result;
}

}  // namespace

std::array<double, 4> grade_tail_scores(std::span<const float> probabilities) {
  if (probabilities.size() != 5) throw std::invalid_argument("grade tail scores need a five-class output");
  std::array<double, 4> out{};
  double tail = 0.0;
  for (int t = 4; t >= 1; --t) {
    tail += probabilities[static_cast<std::size_t>(t)];
    out[static_cast<std::size_t>(t - 1)] = tail;
  }
  return out;
}

double eye_metric_from_probs(Task task, std::span<const std::vector<float>> probs, std::span<const std::size_t> owner,
                             std::span<const int> labels) {
  if (task == Task::laterality) throw std::invalid_argument("laterality is validated per image");
  if (probs.size() != owner.size()) throw std::invalid_argument("eye metric: probability/owner count mismatch");
  if (task == Task::referable) {
    ScoredSet set;
    set.scores.assign(labels.size(), -1.0);
    for (std::size_t i = 0; i < probs.size(); ++i)
      set.scores[owner[i]] = std::max(set.scores[owner[i]], static_cast<double>(probs[i][1]));
    set.labels.assign(labels.begin(), labels.end());
    return auc(set);
  }
  std::vector<std::array<double, 4>> eye(labels.size(), {-1.0, -1.0, -1.0, -1.0});
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto tails = grade_tail_scores(probs[i]);
    for (std::size_t t = 0; t < 4; ++t) eye[owner[i]][t] = std::max(eye[owner[i]][t], tails[t]);
  }
  const auto curves = severity_roc_suite(eye, labels);
  if (curves.empty()) throw std::invalid_argument("severity validation set has a single grade");
  double total = 0.0;
  for (const auto& c : curves) total += c.curve.auc;
  return total / static_cast<double>(curves.size());
}

double eye_validation_metric(Task task, const dl::MicroCnnModel& model, std::span<const EyeBag> bags) {
  std::vector<dl::Tensor> images;
  std::vector<std::size_t> owner;
  std::vector<int> labels;
  for (std::size_t b = 0; b < bags.size(); ++b) {
    labels.push_back(bags[b].label);
    for (const auto& img : bags[b].images) {
      images.push_back(img.tensor);
      owner.push_back(b);
    }
  }
  return eye_metric_from_probs(task, predict_many(model, images), owner, labels);
}

TrainResult fit_eye_model(std::span<const EyeBag> bags, std::span<const EyeBag> val_bags, const TrainConfig& config,
                          const EpochCallback& on_epoch) {
  config.validate();
  if (config.task == Task::laterality) throw std::invalid_argument("fit_eye_model: laterality is a per-image task");
  if (bags.empty() || val_bags.empty()) throw std::invalid_argument("fit_eye_model: empty training or validation set");
  const int classes = task_classes(config.task);
  std::vector<int> labels, val_labels;
  for (const auto& b : bags) {
    if (b.images.empty()) throw std::invalid_argument("eye bag " + b.eye_id + " is empty");
    labels.push_back(b.label);
  }
  for (const auto& b : val_bags) val_labels.push_back(b.label);
  check_labels(labels, classes, "fit_eye_model training set");
  if (config.task == Task::referable) check_labels(val_labels, 2, "fit_eye_model validation set");
  const auto weights = class_weights(labels, classes, config.class_weight_power);

  std::vector<std::size_t> selection(bags.size(), 0);
  auto step = [&](dl::MicroCnnModel& model, dl::MomentumSgd& opt, int epoch, EpochRecord& rec) {
    if (epoch > 0) {
      for (std::size_t b = 0; b < bags.size(); ++b) {
        const auto s = bags[b].images.size() == 1 ? 0 : em_select(model, bags[b]);
        rec.selection_changes += s != selection[b];
        selection[b] = s;
      }
    }
    std::vector<dl::LabeledTensor> examples;
    for (std::size_t b = 0; b < bags.size(); ++b) examples.push_back({bags[b].images[selection[b]].tensor, bags[b].label});
    const auto arranged = arrange_epoch(std::move(examples), config, epoch);
    const auto stats = dl::sgd_epoch(model, opt, arranged, rec.learning_rate, config.batch_size, weights);
    rec.train_loss = stats.mean_loss;
    rec.trained_images = stats.examples;
  };
  auto metric = [&](const dl::MicroCnnModel& model) { return eye_validation_metric(config.task, model, val_bags); };
  return run_training(config, to_string(config.task), step, metric, on_epoch);
}

double accuracy(const dl::MicroCnnModel& model, std::span<const dl::LabeledTensor> images) {
  if (images.empty()) throw std::invalid_argument("accuracy of an empty set");
  std::vector<dl::Tensor> tensors;
  for (const auto& i : images) tensors.push_back(i.image);
  const auto probs = predict_many(model, tensors);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto pred = static_cast<int>(std::max_element(probs[i].begin(), probs[i].end()) - probs[i].begin());
    correct += pred == images[i].label;
  }
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

TrainResult fit_image_model(std::span<const dl::LabeledTensor> images, std::span<const dl::LabeledTensor> val,
                            const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (images.empty() || val.empty()) throw std::invalid_argument("fit_image_model: empty training or validation set");
  const int classes = task_classes(config.task);
  std::vector<int> labels;
  for (const auto& i : images) labels.push_back(i.label);
  check_labels(labels, classes, "fit_image_model training set");
  const auto weights = class_weights(labels, classes, config.class_weight_power);
  std::vector<dl::LabeledTensor> base(images.begin(), images.end());
  auto step = [&](dl::MicroCnnModel& model, dl::MomentumSgd& opt, int epoch, EpochRecord& rec) {
    const auto arranged = arrange_epoch(base, config, epoch);
    const auto stats = dl::sgd_epoch(model, opt, arranged, rec.learning_rate, config.batch_size, weights);
    rec.train_loss = stats.mean_loss;
    rec.trained_images = stats.examples;
  };
  auto metric = [&](const dl::MicroCnnModel& model) { return accuracy(model, val); };
  return run_training(config, to_string(config.task), step, metric, on_epoch);
}

std::vector<EyeBag> build_eye_bags(const Manifest& manifest, const std::set<std::string>* patients, Task task,
                                   int input_size) {
  if (task == Task::laterality) throw std::invalid_argument("laterality training uses per-image examples");
  std::vector<EyeBag> bags;
  for (const auto& exam : manifest.exams) {
    if (patients && !patients->count(exam.patient_id)) continue;
    for (Side side : {Side::left, Side::right}) {
      const auto& grade = exam.eye(side);
      if (!grade || !grade->gradable) continue;
      EyeBag bag;
      bag.eye_id = eye_id(exam, side);
      bag.label = task == Task::referable ? static_cast<int>(referable_label(*grade)) : to_int(grade->grade);
      for (const auto& img : exam.images)
        if (img.laterality == side)
          bag.images.push_back(normalize(read_image(manifest.resolve(img.path)), input_size, img.path));
      if (!bag.images.empty()) bags.push_back(std::move(bag));
    }
  }
  return bags;
}

std::vector<dl::LabeledTensor> build_laterality_set(const Manifest& manifest, const std::set<std::string>* patients,
                                                    int input_size) {
  std::vector<dl::LabeledTensor> out;
  for (const auto& exam : manifest.exams) {
    if (patients && !patients->count(exam.patient_id)) continue;
    for (const auto& img : exam.images)
      if (img.laterality)
        out.push_back({normalize(read_image(manifest.resolve(img.path)), input_size, img.path).tensor,
                       *img.laterality == Side::right ? 1 : 0});
  }
  return out;
}

std::string history_csv(std::span<const EpochRecord> history) {
  std::string out = "epoch,learning_rate,train_loss,val_metric,selection_changes,trained_images,improved\n";
  char buf[160];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%d,%.6g,%.9g,%.9g,%zu,%zu,%d\n", r.epoch, r.learning_rate, r.train_loss,
                  r.val_metric, r.selection_changes, r.trained_images, r.improved ? 1 : 0);
    out += buf;
  }
  return out;
}

}  // namespace retiscreen
