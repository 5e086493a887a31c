#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "retiscreen/micro_cnn.hpp"
#include "retiscreen/preprocessing.hpp"
#include "retiscreen/training_mil.hpp"

namespace retiscreen {

/// Ordered members combined by the unweighted mean of their probabilities.
/// Members may use different input sizes but share the output arity.
struct Ensemble {
  std::vector<dl::MicroCnnModel> members;
  std::vector<std::string> member_paths;  // checkpoint paths, when loaded from disk
  std::optional<double> operating_threshold;

  void validate() const;
  int output_size() const;
  std::vector<int> input_sizes() const;  // distinct, ascending
};

/// Mean of member outputs, each on the member's own preprocessed input.
std::vector<float> ensemble_predict(const Ensemble& ensemble, MultiScaleImage& image);
std::vector<float> ensemble_predict(const Ensemble& ensemble, const RawImage& raw);

/// Element-wise mean of equally long probability vectors (64-bit accumulation).
std::vector<float> mean_probabilities(std::span<const std::vector<float>> rows);

struct SelectionRound {
  int round = 0;
  std::size_t candidate = 0;
  double metric = 0.0;
  bool accepted = false;
};

struct GreedyResult {
  std::vector<std::size_t> members;  // candidate indices in order of addition
  std::vector<SelectionRound> log;   // best candidate of every round, accepted or not
  std::vector<double> trajectory;    // metric after each accepted round
};

/// Subset scorer used by the greedy search: metric of the ensemble made of
/// the given candidate indices.
using SubsetMetric = std::function<double(std::span<const std::size_t>)>;

/// Forward selection without reuse: each round adds the candidate giving the
/// largest metric (ties to the lower index); stops when the best addition
/// improves by ≤ epsilon or candidates run out.
GreedyResult greedy_select(std::size_t candidate_count, const SubsetMetric& metric, double epsilon = 1e-4);

/// Validation eye bags at every input size the candidates need; all entries
/// must list the same eyes and images in the same order.
using BagsBySize = std::map<int, std::vector<EyeBag>>;

/// Per-candidate probability rows over the flattened validation images.
std::vector<std::vector<std::vector<float>>> candidate_probabilities(std::span<const dl::MicroCnnModel> candidates,
                                                                      const BagsBySize& val);

/// Model-level greedy selection on eye-level validation metric.
GreedyResult greedy_select(std::span<const dl::MicroCnnModel> candidates, const BagsBySize& val, Task task,
                           double epsilon = 1e-4);

nlohmann::json ensemble_manifest_json(const Ensemble& ensemble, const GreedyResult* selection = nullptr);
/// Member checkpoint paths are stored relative to the manifest's directory.
void save_ensemble_manifest(const std::filesystem::path& path, const Ensemble& ensemble,
                            const GreedyResult* selection = nullptr, const nlohmann::json* provenance = nullptr);
Ensemble load_ensemble(const std::filesystem::path& path);

}  // namespace retiscreen
