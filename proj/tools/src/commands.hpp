#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace retiscreen::cli {

/// Invalid option combination detected after parsing (exit code 1).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// What every command needs besides its own options.
struct Context {
  std::ostream& out;
  std::ostream& err;
  std::string command;
  nlohmann::json resolved;  // fully resolved options, for logs and provenance
  bool quiet = false;

  void log(const std::string& line) const;
  nlohmann::json provenance(std::uint64_t seed) const;
};

struct SynthOptions {
  int n_patients = 0;
  std::uint64_t seed = 7;
  std::string out;
  int image_size = 64;
  int images_per_eye = 2;
  std::vector<double> grade_distribution{0.762, 0.143, 0.066, 0.023, 0.006};
  double illumination = 0.35;
};

struct TrainOptions {
  std::string task;
  std::string manifest;
  std::string split;
  std::vector<double> split_fractions{0.64, 0.16, 0.2};
  std::string out;
  int input_size = 32;
  int stages = 3;
  int base_channels = 8;
  double lr = 0.05;
  int epochs = 30;
  int patience = 6;
  int batch_size = 16;
  double class_weight_power = 0.5;
  bool no_augment = false;
  std::uint64_t seed = 1;
};

struct EnsembleOptions {
  std::string task;
  std::string manifest;
  std::string split;
  std::vector<std::string> candidates;
  std::string out;
  double epsilon = 1e-4;
  double specificity = 0.87;
};

struct InferOptions {
  std::string manifest;
  std::string exam_dir;
  std::string split;
  std::string part = "test";
  std::string laterality;
  std::string referable;
  std::string severity;
  std::optional<double> threshold;
  std::string out;
  bool no_heatmaps = false;
  bool raw_maps = false;
  double overlay_threshold = 0.5;
  std::string features = "probabilities";
};

struct EvalOptions {
  std::string pred;
  std::string labels;
  std::string label = "referable";
  std::string column = "score";
  bool delong = false;
  bool severity_suite = false;
  std::optional<double> specificity;
  std::optional<double> sensitivity;
  double level = 0.95;
  std::string out;
};

struct CompareOptions {
  std::string pred_a;
  std::string pred_b;
  std::string labels;
  std::string label = "referable";
  std::string column = "score";
  std::string out;
};

struct TsneOptions {
  std::string features;
  std::string out;
  std::string labels;
  std::string label = "referable";
  double perplexity = 30.0;
  int iterations = 1000;
  std::uint64_t seed = 1;
};

struct HeatmapOptions {
  std::string image;
  std::string checkpoint;
  std::string ensemble;
  std::string out;
  std::string raw_map;
  double threshold = 0.5;
  double sigma = 2.0;
};

int run_synth(const Context& ctx, const SynthOptions& o);
int run_train(const Context& ctx, const TrainOptions& o);
int run_ensemble(const Context& ctx, const EnsembleOptions& o);
int run_infer(const Context& ctx, const InferOptions& o);
int run_eval(const Context& ctx, const EvalOptions& o);
int run_compare(const Context& ctx, const CompareOptions& o);
int run_tsne(const Context& ctx, const TsneOptions& o);
int run_heatmap(const Context& ctx, const HeatmapOptions& o);

}  // namespace retiscreen::cli
