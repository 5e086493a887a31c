#pragma once

// Reference computations used to check the library. Each one is written the
// slow, obvious way and shares no code with the implementation under test.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace oracle {

/// Central differences of a scalar function of a parameter vector.
std::vector<double> central_differences(const std::function<double(const std::vector<double>&)>& f,
                                        std::vector<double> x, double eps);

/// max over elements of |a - n| / max(|a|, |n|, floor).
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor = 1e-8);

/// Pair-count AUC: fraction of (positive, negative) pairs ranked correctly, ties count 1/2.
double mann_whitney_auc(std::span<const double> scores, std::span<const int> labels);

struct Interval {
  double lo;
  double hi;
};

/// Percentile interval of the AUC over stratified bootstrap resamples.
Interval bootstrap_auc_ci(std::span<const double> scores, std::span<const int> labels, int resamples, double level,
                          std::uint64_t seed);

/// Two-sided permutation p-value for the paired AUC difference: each case's
/// pair of scores is swapped between the two systems with probability 1/2.
/// Scores are converted to within-system ranks first so swaps are meaningful.
double paired_permutation_p(std::span<const double> a, std::span<const double> b, std::span<const int> labels,
                            int permutations, std::uint64_t seed);

struct SweepPoint {
  double threshold;
  double sensitivity;
  double specificity;
};

/// Every candidate threshold (each distinct score and +inf) with its rates.
std::vector<SweepPoint> threshold_sweep(std::span<const double> scores, std::span<const int> labels);

/// Mean silhouette of 2-D points under the given cluster labels.
double silhouette(const std::vector<std::array<double, 2>>& points, std::span<const int> labels);

/// Best metric over all nonempty subsets of candidates.
double best_subset_metric(std::size_t candidates, const std::function<double(std::span<const std::size_t>)>& metric);

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Byte-for-byte file comparison.
bool same_bytes(const std::filesystem::path& a, const std::filesystem::path& b);

}  // namespace oracle
