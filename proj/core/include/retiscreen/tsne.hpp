#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace retiscreen {

struct TsneConfig {
  double perplexity = 30.0;
  int iterations = 1000;
  double early_exaggeration = 12.0;
  int exaggeration_iterations = 250;
  double learning_rate = 200.0;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  std::uint64_t seed = 1;
};

struct TsneResult {
  std::vector<std::array<double, 2>> coordinates;
  std::vector<double> kl_history;  // KL(P‖Q) with the unexaggerated P, one entry per iteration
};

/// Exact t-SNE. Per-point bandwidths come from a binary search matching the
/// perplexity (log-perplexity tolerance 1e-4, at most 50 steps).
TsneResult tsne(const std::vector<std::vector<double>>& features, const TsneConfig& config);

/// Symmetrized, normalized affinities P (N×N, row-major) used by tsne().
std::vector<double> tsne_affinities(const std::vector<std::vector<double>>& features, double perplexity);

}  // namespace retiscreen
