#include "retiscreen/micro_cnn.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "retiscreen/ops.hpp"
#include "retiscreen/rng.hpp"

namespace retiscreen::dl {

void MicroCnnConfig::validate() const {
  if (stage_count < 1) throw std::invalid_argument("stage_count must be >= 1");
  if (base_channels < 1) throw std::invalid_argument("base_channels must be >= 1");
  if (stage_count > 12) throw std::invalid_argument("stage_count too large");
  const int divisor = 1 << stage_count;
  if (input_size < divisor || input_size % divisor != 0)
    throw std::invalid_argument("input_size " + std::to_string(input_size) + " must be a positive multiple of 2^" +
                                std::to_string(stage_count));
  if (head == HeadKind::multiclass && classes < 2) throw std::invalid_argument("multiclass head needs >= 2 classes");
  if (!(initial_learning_rate > 0.0)) throw std::invalid_argument("initial_learning_rate must be positive");
}

void to_json(nlohmann::json& j, const MicroCnnConfig& c) {
  j = nlohmann::json{{"input_size", c.input_size},
                     {"stage_count", c.stage_count},
                     {"base_channels", c.base_channels},
                     {"head", c.head == HeadKind::binary ? "binary" : "multiclass"},
                     {"classes", c.output_size()},
                     {"seed", c.seed},
                     {"initial_learning_rate", c.initial_learning_rate}};
}

void from_json(const nlohmann::json& j, MicroCnnConfig& c) {
  c.input_size = j.at("input_size").get<int>();
  c.stage_count = j.at("stage_count").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  const auto head = j.at("head").get<std::string>();
  if (head == "binary") {
    c.head = HeadKind::binary;
  } else if (head == "multiclass") {
    c.head = HeadKind::multiclass;
  } else {
    throw std::invalid_argument("unknown head kind '" + head + "'");
  }
  c.classes = j.value("classes", 2);
  c.seed = j.value("seed", std::uint64_t{1});
  c.initial_learning_rate = j.value("initial_learning_rate", 0.05);
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const MicroCnnConfig& config) {
  config.validate();
  std::vector<std::pair<std::string, Shape>> layout;
  std::size_t in_channels = 3;
  for (int s = 0; s < config.stage_count; ++s) {
    const auto out_channels = static_cast<std::size_t>(config.base_channels) << s;
    const auto prefix = "stage" + std::to_string(s) + ".conv.";
    layout.emplace_back(prefix + "weight", Shape{out_channels, in_channels, 3, 3});
    layout.emplace_back(prefix + "bias", Shape{out_channels});
    in_channels = out_channels;
  }
  const auto k = static_cast<std::size_t>(config.output_size());
  layout.emplace_back("head.weight", Shape{k, in_channels});
  layout.emplace_back("head.bias", Shape{k});
  return layout;
}

template <typename T>
BasicTensor<T> micro_cnn_features(const MicroCnnConfig& config, std::span<const BasicTensor<T>> params,
                                  const BasicTensor<T>& batch) {
  const auto expected = static_cast<std::size_t>(2 * config.stage_count + 2);
  if (params.size() != expected) throw std::invalid_argument("micro_cnn_logits: wrong parameter count");
  const auto s = static_cast<std::size_t>(config.input_size);
  if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != s || batch.dim(3) != s)
    throw std::invalid_argument("model expects N×3×" + std::to_string(s) + "×" + std::to_string(s) + " input, got " +
                                to_string(batch.shape()));
  BasicTensor<T> x = batch;
  for (int stage = 0; stage < config.stage_count; ++stage) {
    x = conv2d(x, params[2 * stage], 1, 1);
    x = add_channel_bias(x, params[2 * stage + 1]);
    x = relu(x);
    x = max_pool2d(x, 2);
  }
  return global_average_pool(x);
}

template <typename T>
BasicTensor<T> micro_cnn_logits(const MicroCnnConfig& config, std::span<const BasicTensor<T>> params,
                                const BasicTensor<T>& batch) {
  const auto features = micro_cnn_features(config, params, batch);
  return linear(features, params[params.size() - 2], params[params.size() - 1]);
}

template BasicTensor<float> micro_cnn_features(const MicroCnnConfig&, std::span<const BasicTensor<float>>,
                                               const BasicTensor<float>&);
template BasicTensor<double> micro_cnn_features(const MicroCnnConfig&, std::span<const BasicTensor<double>>,
                                                const BasicTensor<double>&);
template BasicTensor<float> micro_cnn_logits(const MicroCnnConfig&, std::span<const BasicTensor<float>>,
                                             const BasicTensor<float>&);
template BasicTensor<double> micro_cnn_logits(const MicroCnnConfig&, std::span<const BasicTensor<double>>,
                                              const BasicTensor<double>&);

MicroCnnModel::MicroCnnModel(MicroCnnConfig config) : config_(config) {
  if (config_.head == HeadKind::binary) config_.classes = 2;
  Rng rng(derive_seed(config_.seed, {0x1417}));
  for (auto& [name, shape] : parameter_layout(config_)) {
    const auto n = element_count(shape);
    std::vector<float> values(n, 0.0f);
    if (shape.size() > 1) {
      const auto fan_in = n / shape[0];
      // He-uniform for convolutions (ReLU follows), LeCun-uniform for the head.
      const double bound = shape.size() == 4 ? std::sqrt(6.0 / static_cast<double>(fan_in))
                                             : std::sqrt(3.0 / static_cast<double>(fan_in));
      for (auto& v : values) v = static_cast<float>(rng.uniform(-bound, bound));
    }
    params_.push_back({name, Tensor(shape, std::move(values), true)});
  }
}

MicroCnnModel::MicroCnnModel(MicroCnnConfig config, std::vector<NamedParameter> parameters) : config_(config) {
  if (config_.head == HeadKind::binary) config_.classes = 2;
  const auto layout = parameter_layout(config_);
  if (parameters.size() != layout.size())
    throw std::invalid_argument("expected " + std::to_string(layout.size()) + " parameters, got " +
                                std::to_string(parameters.size()));
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (parameters[i].name != layout[i].first)
      throw std::invalid_argument("parameter " + std::to_string(i) + " is '" + parameters[i].name + "', expected '" +
                                  layout[i].first + "'");
    if (parameters[i].value.shape() != layout[i].second)
      throw std::invalid_argument("parameter '" + parameters[i].name + "' has shape " +
                                  to_string(parameters[i].value.shape()) + ", expected " +
                                  to_string(layout[i].second));
    parameters[i].value.set_requires_grad(true);
  }
  params_ = std::move(parameters);
}

MicroCnnModel::MicroCnnModel(const MicroCnnModel& other) : meta(other.meta), config_(other.config_) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) params_.push_back({p.name, p.value.clone()});
}

MicroCnnModel& MicroCnnModel::operator=(const MicroCnnModel& other) {
  if (this != &other) {
    MicroCnnModel copy(other);
    *this = std::move(copy);
  }
  return *this;
}

std::vector<Tensor> MicroCnnModel::parameter_tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

std::size_t MicroCnnModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

Tensor MicroCnnModel::logits(const Tensor& batch) const {
  const auto tensors = parameter_tensors();
  return micro_cnn_logits<float>(config_, tensors, batch);
}

void MicroCnnModel::check_finite() const {
  for (const auto& p : params_)
    for (float v : p.value.values())
      if (!std::isfinite(v)) throw std::domain_error("parameter '" + p.name + "' contains a non-finite value");
}

std::vector<std::vector<float>> MicroCnnModel::predict(const Tensor& batch) const {
  check_finite();
  NoGradGuard no_grad;
  const auto probs = softmax(logits(batch));
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  std::vector<std::vector<float>> rows(n);
  const auto v = probs.values();
  for (std::size_t i = 0; i < n; ++i) rows[i].assign(v.begin() + i * k, v.begin() + (i + 1) * k);
  return rows;
}

std::vector<float> forward(const MicroCnnModel& model, const Tensor& image) {
  if (image.rank() == 3) {
    Shape shape{1, image.dim(0), image.dim(1), image.dim(2)};
    return model.predict(Tensor(shape, {image.values().begin(), image.values().end()})).front();
  }
  if (image.rank() == 4 && image.dim(0) == 1) return model.predict(image).front();
  throw std::invalid_argument("forward expects a single 3×S×S image, got " + to_string(image.shape()));
}

std::vector<float> penultimate(const MicroCnnModel& model, const Tensor& image) {
  model.check_finite();
  NoGradGuard no_grad;
  const Tensor batch = image.rank() == 3 ? Tensor(Shape{1, image.dim(0), image.dim(1), image.dim(2)},
                                                  {image.values().begin(), image.values().end()})
                                         : image;
  if (batch.rank() != 4 || batch.dim(0) != 1)
    throw std::invalid_argument("penultimate expects a single 3×S×S image, got " + to_string(image.shape()));
  const auto params = model.parameter_tensors();
  const auto features = micro_cnn_features<float>(model.config(), params, batch);
  const auto v = features.values();
  return {v.begin(), v.end()};
}

Tensor stack_images(std::span<const Tensor> images) {
  if (images.empty()) throw std::invalid_argument("stack_images: no images");
  const Shape& first = images.front().shape();
  if (first.size() != 3) throw std::invalid_argument("stack_images expects 3×S×S images, got " + to_string(first));
  const std::size_t per = images.front().size();
  std::vector<float> values;
  values.reserve(per * images.size());
  for (const auto& img : images) {
    if (img.shape() != first)
      throw std::invalid_argument("stack_images: shape " + to_string(img.shape()) + " differs from " +
                                  to_string(first));
    values.insert(values.end(), img.values().begin(), img.values().end());
  }
  return Tensor({images.size(), first[0], first[1], first[2]}, std::move(values));
}

void MomentumSgd::step(MicroCnnModel& model, double learning_rate) {
  auto params = model.parameters();
  if (velocity_.size() != params.size()) {
    velocity_.clear();
    for (const auto& p : params) velocity_.emplace_back(p.value.size(), 0.0f);
  }
  const auto mu = static_cast<float>(momentum_);
  const auto lr = static_cast<float>(learning_rate);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& tensor = params[i].value;
    if (!tensor.has_grad()) continue;
    auto values = tensor.mutable_values();
    const auto grad = tensor.grad();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      v[j] = mu * v[j] + grad[j];
      values[j] -= lr * v[j];
    }
  }
}

EpochStats sgd_epoch(MicroCnnModel& model, MomentumSgd& optimizer, std::span<const LabeledTensor> examples,
                     double learning_rate, std::size_t batch_size, std::span<const double> class_weights) {
  if (examples.empty()) throw std::invalid_argument("sgd_epoch: empty example sequence");
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("sgd_epoch: learning rate must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("sgd_epoch: batch size must be positive");
  const int k = model.config().output_size();
  for (const auto& ex : examples)
    if (ex.label < 0 || ex.label >= k)
      throw std::invalid_argument("sgd_epoch: label " + std::to_string(ex.label) + " invalid for a " +
                                  std::to_string(k) + "-way head");
  if (!class_weights.empty() && class_weights.size() != static_cast<std::size_t>(k))
    throw std::invalid_argument("sgd_epoch: class weight count must equal head arity");

  EpochStats stats;
  double loss_total = 0.0;
  std::vector<Tensor> images;
  std::vector<int> labels;
  std::vector<double> weights;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t end = std::min(examples.size(), start + batch_size);
    images.clear();
    labels.clear();
    weights.clear();
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(examples[i].image);
      labels.push_back(examples[i].label);
      if (!class_weights.empty()) weights.push_back(class_weights[static_cast<std::size_t>(examples[i].label)]);
    }
    for (auto& p : model.parameters()) p.value.zero_grad();
    const Tensor logits = model.logits(stack_images(images));
    const Tensor loss = cross_entropy(logits, labels, weights);
    loss.backward();
    optimizer.step(model, learning_rate);

    // Unweighted per-example cross-entropy for reporting.
    const auto z = logits.values();
    for (std::size_t r = 0; r < labels.size(); ++r) {
      const float* row = z.data() + r * static_cast<std::size_t>(k);
      const double mx = *std::max_element(row, row + k);
      double total = 0.0;
      for (int j = 0; j < k; ++j) total += std::exp(static_cast<double>(row[j]) - mx);
      loss_total += mx + std::log(total) - static_cast<double>(row[labels[r]]);
    }
    ++stats.batches;
  }
  stats.examples = examples.size();
  stats.mean_loss = loss_total / static_cast<double>(examples.size());
  return stats;
}

double step_decay_learning_rate(double initial, int epoch) {
  return initial * std::pow(0.5, static_cast<double>(epoch / 10));
}

}  // namespace retiscreen::dl
