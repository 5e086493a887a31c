#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace retiscreen {

/// Scores with binary labels (1 = positive). ids are optional and only used
/// by report writers.
struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::string> ids;
  std::string unit = "eye";

  std::size_t positives() const;
  std::size_t negatives() const;
  /// Throws std::invalid_argument on length mismatch, labels outside {0,1} or NaN scores.
  void validate() const;
};

/// Area under the empirical ROC (trapezoid over distinct thresholds; equal
/// scores form one step). Throws if either class is missing.
double auc(const ScoredSet& set);
double auc(std::span<const double> scores, std::span<const int> labels);

struct RocPoint {
  double threshold;  // predicted positive when score >= threshold
  double fpr;
  double tpr;
};

struct RocCurve {
  std::vector<RocPoint> points;  // from (0,0) at threshold +inf to (1,1)
  double auc = 0.0;
  double delong_variance = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double level = 0.95;
  bool has_ci = false;  // DeLong needs two cases per class
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

RocCurve roc_curve(const ScoredSet& set, double level = 0.95);

struct DelongResult {
  double auc;
  double variance;
  double ci_lo;
  double ci_hi;
};

/// DeLong variance from midrank structural components and the Wald interval
/// auc ± z·sqrt(variance), clipped to [0,1]. Requires ≥ 2 cases per class.
DelongResult delong_ci(const ScoredSet& set, double level = 0.95);

struct PairedTest {
  double auc_a;
  double auc_b;
  double z;
  double p;
};

/// Two correlated ROC curves over the same cases. Throws if the cases differ.
PairedTest delong_paired_test(const ScoredSet& a, const ScoredSet& b);

struct Constraint {
  enum class Kind { sensitivity, specificity } kind;
  double value;
};

struct OperatingPoint {
  double threshold;
  double sensitivity;
  double specificity;
};

/// Among thresholds satisfying the constraint, picks the one that is best on
/// the other axis: the smallest threshold with specificity ≥ y, or the
/// largest threshold with sensitivity ≥ x.
OperatingPoint operating_point(const ScoredSet& set, Constraint constraint);

/// Sensitivity/specificity of the rule "score >= threshold".
OperatingPoint evaluate_threshold(const ScoredSet& set, double threshold);

struct SeverityCurve {
  int threshold;  // binarization grade >= threshold
  RocCurve curve;
};

/// One ROC per binarization t = 1..4 of the per-eye "grade >= t" scores.
/// Binarizations with a single class are omitted and reported in warnings.
std::vector<SeverityCurve> severity_roc_suite(std::span<const std::array<double, 4>> eye_scores,
                                              std::span<const int> grades,
                                              std::vector<std::string>* warnings = nullptr);

/// Standard normal quantile and two-sided tail probability.
double normal_quantile(double p);
double two_sided_p(double z);

/// "0.989 (95% CI: 0.984-0.994)".
std::string format_auc_ci(double auc, double lo, double hi, double level = 0.95);
std::string format_auc_ci(const RocCurve& curve);

std::string roc_points_csv(const RocCurve& curve);
nlohmann::json roc_summary_json(const RocCurve& curve);

}  // namespace retiscreen
