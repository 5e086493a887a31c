#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "oracles.hpp"
#include "retiscreen/checkpoint.hpp"
#include "retiscreen/file_util.hpp"
#include "retiscreen/micro_cnn.hpp"
#include "retiscreen/rng.hpp"

using namespace retiscreen;
using namespace retiscreen::dl;

namespace {

MicroCnnConfig small_config(HeadKind head = HeadKind::binary, int classes = 2) {
  MicroCnnConfig c;
  c.input_size = 16;
  c.stage_count = 2;
  c.base_channels = 4;
  c.head = head;
  c.classes = classes;
  c.seed = 42;
  return c;
}

Tensor random_image(int size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(3 * static_cast<std::size_t>(size * size));
  for (auto& x : v) x = static_cast<float>(rng.normal(0.0, 1.0));
  const auto s = static_cast<std::size_t>(size);
  return Tensor({3, s, s}, std::move(v));
}

// Class 0 is bright on the left half, class 1 on the right half.
std::vector<LabeledTensor> toy_set(int size, int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<LabeledTensor> out;
  const auto s = static_cast<std::size_t>(size);
  for (int i = 0; i < n; ++i) {
    const int label = i % 2;
    std::vector<float> v(3 * s * s);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
          const bool left = x < s / 2;
          const float base = (left == (label == 0)) ? 1.0f : -1.0f;
          v[(c * s + y) * s + x] = base + static_cast<float>(rng.normal(0.0, 0.3));
        }
    out.push_back({Tensor({3, s, s}, std::move(v)), label});
  }
  return out;
}

std::vector<float> flat_parameters(const MicroCnnModel& m) {
  std::vector<float> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.value.values().begin(), p.value.values().end());
  return out;
}

}  // namespace

TEST(MicroCnnConfig, RejectsSizeNotDivisibleByPoolFactor) {
  auto c = small_config();
  c.input_size = 18;  // 2^2 does not divide 18
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.input_size = 16;
  EXPECT_NO_THROW(c.validate());
}

TEST(MicroCnnConfig, RejectsNonPositiveFields) {
  auto c = small_config();
  c.stage_count = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.base_channels = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.initial_learning_rate = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(MicroCnnConfig, LayoutIsDeterminedByConfig) {
  const auto layout = parameter_layout(small_config(HeadKind::multiclass, 5));
  ASSERT_EQ(layout.size(), 6u);
  EXPECT_EQ(layout[0].second, (Shape{4, 3, 3, 3}));
  EXPECT_EQ(layout[2].second, (Shape{8, 4, 3, 3}));
  EXPECT_EQ(layout[4].second, (Shape{5, 8}));
  EXPECT_EQ(layout[5].second, (Shape{5}));
}

TEST(Forward, ZeroHeadGivesUniformPair) {
  MicroCnnModel model(small_config());
  for (auto& p : model.parameters())
    if (p.name.rfind("head.", 0) == 0)
      for (auto& v : p.value.mutable_values()) v = 0.0f;
  const auto probs = forward(model, random_image(16, 1));
  ASSERT_EQ(probs.size(), 2u);
  EXPECT_FLOAT_EQ(probs[0], 0.5f);
  EXPECT_FLOAT_EQ(probs[1], 0.5f);
}

TEST(Forward, FiveClassOutputSumsToOne) {
  MicroCnnModel model(small_config(HeadKind::multiclass, 5));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto probs = forward(model, random_image(16, seed));
    ASSERT_EQ(probs.size(), 5u);
    double total = 0.0;
    for (float p : probs) {
      EXPECT_GE(p, 0.0f);
      total += p;
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Forward, BitIdenticalAcrossRunsAndInstances) {
  const auto image = random_image(16, 9);
  MicroCnnModel a(small_config());
  MicroCnnModel b(small_config());
  const auto first = forward(a, image);
  const auto again = forward(a, image);
  const auto other = forward(b, image);
  EXPECT_EQ(first, again);
  EXPECT_EQ(first, other);
}

TEST(Forward, BatchRowsMatchSingleImages) {
  MicroCnnModel model(small_config(HeadKind::multiclass, 5));
  std::vector<Tensor> images = {random_image(16, 1), random_image(16, 2), random_image(16, 3)};
  const auto rows = model.predict(stack_images(images));
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto single = forward(model, images[i]);
    for (std::size_t j = 0; j < single.size(); ++j) EXPECT_NEAR(rows[i][j], single[j], 1e-6);
  }
}

TEST(Forward, RejectsWrongInputSize) {
  MicroCnnModel model(small_config());
  EXPECT_THROW(forward(model, random_image(32, 1)), std::invalid_argument);
}

TEST(Forward, RejectsNaNParameters) {
  MicroCnnModel model(small_config());
  model.parameters()[0].value.mutable_values()[3] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(forward(model, random_image(16, 1)), std::exception);
}

TEST(Forward, ModelCopiesAreIndependent) {
  MicroCnnModel a(small_config());
  MicroCnnModel b = a;
  const auto image = random_image(16, 4);
  const auto before = forward(a, image);
  for (auto& v : b.parameters()[4].value.mutable_values()) v += 1.0f;
  EXPECT_EQ(forward(a, image), before);
}

TEST(Penultimate, HeadAppliedToFeaturesReproducesForward) {
  const MicroCnnModel model(small_config(HeadKind::multiclass, 5));
  const auto image = random_image(16, 21);
  const auto features = penultimate(model, image);
  const auto params = model.parameters();
  const auto& w = params[params.size() - 2].value;
  const auto& b = params[params.size() - 1].value;
  ASSERT_EQ(features.size(), w.dim(1));
  std::vector<double> logits(w.dim(0));
  for (std::size_t k = 0; k < w.dim(0); ++k) {
    logits[k] = b.values()[k];
    for (std::size_t c = 0; c < w.dim(1); ++c) logits[k] += double(w.values()[k * w.dim(1) + c]) * features[c];
  }
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - top);
  const auto p = forward(model, image);
  for (std::size_t k = 0; k < p.size(); ++k) EXPECT_NEAR(p[k], std::exp(logits[k] - top) / z, 1e-5);
}

TEST(Penultimate, PooledReluActivationsAreNonNegative) {
  const MicroCnnModel model(small_config());
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    for (float f : penultimate(model, random_image(16, seed))) EXPECT_GE(f, 0.0f);
}

TEST(SgdEpoch, ZeroLearningRateLeavesParametersUnchanged) {
  MicroCnnModel model(small_config());
  const auto before = flat_parameters(model);
  MomentumSgd opt;
  const auto data = toy_set(16, 12, 3);
  sgd_epoch(model, opt, data, 0.0, 4);
  EXPECT_EQ(flat_parameters(model), before);
}

TEST(SgdEpoch, RejectsEmptyAndInvalidLabels) {
  MicroCnnModel model(small_config());
  MomentumSgd opt;
  EXPECT_THROW(sgd_epoch(model, opt, {}, 0.1), std::invalid_argument);
  std::vector<LabeledTensor> bad = {{random_image(16, 1), 2}};
  EXPECT_THROW(sgd_epoch(model, opt, bad, 0.1), std::invalid_argument);
}

TEST(SgdEpoch, DeterministicForFixedOrder) {
  const auto data = toy_set(16, 20, 5);
  MicroCnnModel a(small_config()), b(small_config());
  MomentumSgd oa, ob;
  for (int e = 0; e < 3; ++e) {
    const auto la = sgd_epoch(a, oa, data, 0.05, 4);
    const auto lb = sgd_epoch(b, ob, data, 0.05, 4);
    EXPECT_EQ(la.mean_loss, lb.mean_loss);
  }
  EXPECT_EQ(flat_parameters(a), flat_parameters(b));
}

TEST(SgdEpoch, ToyLossFallsOverEveryTenEpochWindow) {
  MicroCnnConfig c;
  c.input_size = 8;
  c.stage_count = 1;
  c.base_channels = 4;
  c.seed = 3;
  MicroCnnModel model(c);
  MomentumSgd opt;
  const auto data = toy_set(8, 32, 11);
  std::vector<double> losses;
  for (int e = 0; e < 50; ++e) losses.push_back(sgd_epoch(model, opt, data, step_decay_learning_rate(0.05, e), 8).mean_loss);
  for (std::size_t t = 0; t + 10 < losses.size(); ++t) EXPECT_LT(losses[t + 10], losses[t]) << "window at epoch " << t;
  EXPECT_LT(losses.back(), 0.1);
}

TEST(CrossEntropyLoss, PerfectOneHotIsFree) {
  MicroCnnModel model(small_config());
  for (auto& p : model.parameters())
    if (p.name == "head.bias") {
      p.value.mutable_values()[0] = 40.0f;
      p.value.mutable_values()[1] = -40.0f;
    } else if (p.name == "head.weight") {
      for (auto& v : p.value.mutable_values()) v = 0.0f;
    }
  MomentumSgd opt;
  const std::vector<LabeledTensor> data = {{random_image(16, 1), 0}};
  EXPECT_LE(sgd_epoch(model, opt, data, 0.0).mean_loss, 1e-6);
}

TEST(StepDecay, HalvesEveryTenEpochs) {
  EXPECT_DOUBLE_EQ(step_decay_learning_rate(0.08, 0), 0.08);
  EXPECT_DOUBLE_EQ(step_decay_learning_rate(0.08, 9), 0.08);
  EXPECT_DOUBLE_EQ(step_decay_learning_rate(0.08, 10), 0.04);
  EXPECT_DOUBLE_EQ(step_decay_learning_rate(0.08, 25), 0.02);
}

TEST(MomentumSgd, MatchesHandComputedUpdate) {
  MicroCnnConfig c;
  c.input_size = 2;
  c.stage_count = 1;
  c.base_channels = 1;
  MicroCnnModel model(c);
  auto& p = model.parameters()[0].value;
  const float start = p.values()[0];
  MomentumSgd opt(0.9);
  p.mutable_grad()[0] = 2.0f;
  for (auto& q : model.parameters())
    if (&q.value != &p) q.value.zero_grad();
  opt.step(model, 0.1);  // v = 2, p -= 0.2
  EXPECT_FLOAT_EQ(p.values()[0], start - 0.2f);
  opt.step(model, 0.1);  // v = 0.9*2 + 2 = 3.8, p -= 0.38
  EXPECT_FLOAT_EQ(p.values()[0], start - 0.2f - 0.38f);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  oracle::TempDir dir("ckpt");
  MicroCnnModel model(small_config(HeadKind::multiclass, 5));
  MomentumSgd opt;
  sgd_epoch(model, opt, toy_set(16, 8, 2), 0.05, 4);
  model.meta.task = "severity";
  model.meta.epochs_run = 7;
  model.meta.best_validation_metric = 0.875;
  const auto path = dir.path() / "m.rsck";
  save_checkpoint(model, path, {{"seed", 5}});
  nlohmann::json prov;
  const auto loaded = load_checkpoint(path, &prov);
  EXPECT_EQ(loaded.config(), model.config());
  EXPECT_EQ(flat_parameters(loaded), flat_parameters(model));
  EXPECT_EQ(loaded.meta.task, "severity");
  EXPECT_EQ(loaded.meta.epochs_run, 7);
  EXPECT_EQ(prov["seed"], 5);
  for (std::uint64_t s = 0; s < 5; ++s) EXPECT_EQ(forward(loaded, random_image(16, s)), forward(model, random_image(16, s)));
  EXPECT_EQ(encode_checkpoint(loaded, prov), read_file_bytes(path));
}

TEST(Checkpoint, StartsWithMagicAndVersion) {
  const auto bytes = encode_checkpoint(MicroCnnModel(small_config()));
  ASSERT_GE(bytes.size(), 6u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "RSCK");
  EXPECT_EQ(bytes[4] | (bytes[5] << 8), kCheckpointVersion);
}

TEST(Checkpoint, CorruptInputsAreDataErrors) {
  auto bytes = encode_checkpoint(MicroCnnModel(small_config()));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), DataError);
  auto bad_version = bytes;
  bad_version[4] = 99;
  EXPECT_THROW(decode_checkpoint(bad_version), DataError);
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(decode_checkpoint(truncated), DataError) << "cut at " << cut;
  }
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_checkpoint(trailing), DataError);
  EXPECT_THROW(load_checkpoint("/nonexistent/model.rsck"), DataError);
}
