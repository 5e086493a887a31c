#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "retiscreen/tensor.hpp"

namespace retiscreen::dl {

enum class HeadKind { binary, multiclass };

/// Hyper-parameters of one network of the micro-CNN family:
/// stage_count × [3×3 conv → ReLU → 2×2 max-pool], channels doubling from
/// base_channels, then global average pooling and one dense softmax head.
struct MicroCnnConfig {
  int input_size = 32;
  int stage_count = 3;
  int base_channels = 8;
  HeadKind head = HeadKind::binary;
  int classes = 2;  // forced to 2 for the binary head
  std::uint64_t seed = 1;
  double initial_learning_rate = 0.05;

  int output_size() const { return head == HeadKind::binary ? 2 : classes; }
  /// Throws std::invalid_argument when the configuration is unusable.
  void validate() const;

  friend bool operator==(const MicroCnnConfig&, const MicroCnnConfig&) = default;
};

void to_json(nlohmann::json& j, const MicroCnnConfig& config);
void from_json(const nlohmann::json& j, MicroCnnConfig& config);

struct TrainingMeta {
  std::string task;  // "laterality", "referable", "severity" or empty
  int epochs_run = 0;
  double best_validation_metric = 0.0;
};

struct NamedParameter {
  std::string name;
  Tensor value;
};

/// Parameter names and shapes implied by a configuration, in canonical order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const MicroCnnConfig& config);

/// Global-average-pooled activations (N × last stage channels) feeding the head.
template <typename T>
BasicTensor<T> micro_cnn_features(const MicroCnnConfig& config, std::span<const BasicTensor<T>> params,
                                  const BasicTensor<T>& batch);

extern template BasicTensor<float> micro_cnn_features(const MicroCnnConfig&, std::span<const BasicTensor<float>>,
                                                      const BasicTensor<float>&);
extern template BasicTensor<double> micro_cnn_features(const MicroCnnConfig&, std::span<const BasicTensor<double>>,
                                                       const BasicTensor<double>&);

/// Builds the logits graph for an N×3×S×S batch; params follow parameter_layout.
template <typename T>
BasicTensor<T> micro_cnn_logits(const MicroCnnConfig& config, std::span<const BasicTensor<T>> params,
                                const BasicTensor<T>& batch);

extern template BasicTensor<float> micro_cnn_logits(const MicroCnnConfig&, std::span<const BasicTensor<float>>,
                                                    const BasicTensor<float>&);
extern template BasicTensor<double> micro_cnn_logits(const MicroCnnConfig&, std::span<const BasicTensor<double>>,
                                                     const BasicTensor<double>&);

/// A trained (or freshly initialized) network. Copies are deep.
class MicroCnnModel {
 public:
  /// Seeded fan-in-scaled uniform initialization; biases start at zero.
  explicit MicroCnnModel(MicroCnnConfig config);
  /// Adopts existing parameter values; names and shapes must match the layout.
  MicroCnnModel(MicroCnnConfig config, std::vector<NamedParameter> parameters);

  MicroCnnModel(const MicroCnnModel& other);
  MicroCnnModel& operator=(const MicroCnnModel& other);
  MicroCnnModel(MicroCnnModel&&) noexcept = default;
  MicroCnnModel& operator=(MicroCnnModel&&) noexcept = default;

  const MicroCnnConfig& config() const { return config_; }
  std::span<const NamedParameter> parameters() const { return params_; }
  std::span<NamedParameter> parameters() { return params_; }
  std::vector<Tensor> parameter_tensors() const;
  std::size_t parameter_count() const;

  /// Differentiable logits for an N×3×S×S batch.
  Tensor logits(const Tensor& batch) const;
  /// Probability rows (N × output_size) for a batch, without recording history.
  std::vector<std::vector<float>> predict(const Tensor& batch) const;

  /// Throws if any parameter is NaN or infinite.
  void check_finite() const;

  TrainingMeta meta;

 private:
  MicroCnnConfig config_;
  std::vector<NamedParameter> params_;
};

/// Probability vector for one 3×S×S (or 1×3×S×S) image.
std::vector<float> forward(const MicroCnnModel& model, const Tensor& image);

/// Penultimate (pooled) activations for one 3×S×S (or 1×3×S×S) image.
std::vector<float> penultimate(const MicroCnnModel& model, const Tensor& image);

/// Stacks equally shaped 3×S×S images into an N×3×S×S batch.
Tensor stack_images(std::span<const Tensor> images);

struct LabeledTensor {
  Tensor image;  // 3×S×S
  int label = 0;
};

/// Gradient descent with momentum: v ← μ·v + g, p ← p − lr·v.
class MomentumSgd {
 public:
  explicit MomentumSgd(double momentum = 0.9) : momentum_(momentum) {}
  void step(MicroCnnModel& model, double learning_rate);
  void reset() { velocity_.clear(); }
  double momentum() const { return momentum_; }

 private:
  double momentum_;
  std::vector<std::vector<float>> velocity_;
};

struct EpochStats {
  double mean_loss = 0.0;      // unweighted mean cross-entropy over all examples
  std::size_t examples = 0;
  std::size_t batches = 0;
};

/// One pass over examples in the given order, in mini-batches. class_weights
/// (indexed by label, empty for uniform) weight each example's loss term.
EpochStats sgd_epoch(MicroCnnModel& model, MomentumSgd& optimizer, std::span<const LabeledTensor> examples,
                     double learning_rate, std::size_t batch_size = 16, std::span<const double> class_weights = {});

/// Step decay: initial × 0.5^(epoch / 10).
double step_decay_learning_rate(double initial, int epoch);

}  // namespace retiscreen::dl
