#include "retiscreen/eval_stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <nlohmann/json.hpp>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace retiscreen {

std::size_t ScoredSet::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

std::size_t ScoredSet::negatives() const { return labels.size() - positives(); }

void ScoredSet::validate() const {
  if (scores.size() != labels.size())
    throw std::invalid_argument("scored set: " + std::to_string(scores.size()) + " scores vs " +
                                std::to_string(labels.size()) + " labels");
  if (!ids.empty() && ids.size() != scores.size()) throw std::invalid_argument("scored set: ids length mismatch");
  for (int l : labels)
    if (l != 0 && l != 1) throw std::invalid_argument("scored set: labels must be 0 or 1");
  for (double s : scores)
    if (std::isnan(s)) throw std::invalid_argument("scored set: NaN score");
}

namespace {

void require_both_classes(const ScoredSet& set) {
  set.validate();
  if (set.positives() == 0 || set.negatives() == 0)
    throw std::invalid_argument("AUC undefined: " + set.unit + " set has " + std::to_string(set.positives()) +
                                " positives and " + std::to_string(set.negatives()) + " negatives");
}

std::vector<std::size_t> order_desc(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  return idx;
}

// Midranks (1-based, ties averaged) of values.
std::vector<double> midranks(std::span<const double> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && values[idx[j + 1]] == values[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

struct Components {
  double auc;
  std::vector<double> v10;  // per positive case
  std::vector<double> v01;  // per negative case
};

Components structural_components(const ScoredSet& set) {
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < set.scores.size(); ++i) (set.labels[i] ? pos : neg).push_back(set.scores[i]);
  const auto m = static_cast<double>(pos.size());
  const auto n = static_cast<double>(neg.size());
  std::vector<double> all(pos);
  all.insert(all.end(), neg.begin(), neg.end());
  const auto r_all = midranks(all);
  const auto r_pos = midranks(pos);
  const auto r_neg = midranks(neg);
  Components c;
  c.v10.resize(pos.size());
  c.v01.resize(neg.size());
  for (std::size_t i = 0; i < pos.size(); ++i) c.v10[i] = (r_all[i] - r_pos[i]) / n;
  for (std::size_t j = 0; j < neg.size(); ++j) c.v01[j] = 1.0 - (r_all[pos.size() + j] - r_neg[j]) / m;
  c.auc = std::accumulate(c.v10.begin(), c.v10.end(), 0.0) / m;
  return c;
}

double covariance(std::span<const double> a, double mean_a, std::span<const double> b, double mean_b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - mean_a) * (b[i] - mean_b);
  return s / static_cast<double>(a.size() - 1);
}

}  // namespace

double auc(const ScoredSet& set) {
  require_both_classes(set);
  return roc_curve(set).auc;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  ScoredSet set;
  set.scores.assign(scores.begin(), scores.end());
  set.labels.assign(labels.begin(), labels.end());
  return auc(set);
}

RocCurve roc_curve(const ScoredSet& set, double level) {
  require_both_classes(set);
  RocCurve curve;
  curve.positives = set.positives();
  curve.negatives = set.negatives();
  curve.level = level;
  const auto P = static_cast<double>(curve.positives);
  const auto N = static_cast<double>(curve.negatives);
  const auto idx = order_desc(set.scores);
  curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  double area = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    const double t = set.scores[idx[i]];
    const std::size_t prev_tp = tp, prev_fp = fp;
    while (i < idx.size() && set.scores[idx[i]] == t) {
      (set.labels[idx[i]] ? tp : fp) += 1;
      ++i;
    }
    // Exact trapezoid in counts: (Δfp)·(tp + prev_tp)/2, scaled once at the end.
    area += static_cast<double>(fp - prev_fp) * static_cast<double>(tp + prev_tp) * 0.5;
    curve.points.push_back({t, static_cast<double>(fp) / N, static_cast<double>(tp) / P});
  }
  curve.auc = area / (P * N);
  if (curve.positives >= 2 && curve.negatives >= 2) {
    const auto d = delong_ci(set, level);
    curve.delong_variance = d.variance;
    curve.ci_lo = d.ci_lo;
    curve.ci_hi = d.ci_hi;
    curve.has_ci = true;
  } else {
    curve.ci_lo = curve.ci_hi = curve.auc;
  }
  return curve;
}

DelongResult delong_ci(const ScoredSet& set, double level) {
  require_both_classes(set);
  if (set.positives() < 2 || set.negatives() < 2)
    throw std::invalid_argument("DeLong variance needs at least 2 cases per class");
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("confidence level must be in (0,1)");
  const auto c = structural_components(set);
  const double s10 = covariance(c.v10, c.auc, c.v10, c.auc);
  const double mean01 = std::accumulate(c.v01.begin(), c.v01.end(), 0.0) / static_cast<double>(c.v01.size());
  const double s01 = covariance(c.v01, mean01, c.v01, mean01);
  const double var = s10 / static_cast<double>(c.v10.size()) + s01 / static_cast<double>(c.v01.size());
  const double z = normal_quantile(0.5 + level / 2.0);
  const double half = z * std::sqrt(std::max(var, 0.0));
  return {c.auc, std::max(var, 0.0), std::clamp(c.auc - half, 0.0, 1.0), std::clamp(c.auc + half, 0.0, 1.0)};
}

PairedTest delong_paired_test(const ScoredSet& a, const ScoredSet& b) {
  a.validate();
  b.validate();
  if (a.labels != b.labels) throw std::invalid_argument("paired DeLong test needs identical cases and labels");
  if (!a.ids.empty() && !b.ids.empty() && a.ids != b.ids)
    throw std::invalid_argument("paired DeLong test: case ids differ");
  if (a.positives() < 2 || a.negatives() < 2)
    throw std::invalid_argument("DeLong variance needs at least 2 cases per class");
  const auto ca = structural_components(a);
  const auto cb = structural_components(b);
  const double m = static_cast<double>(ca.v10.size());
  const double n = static_cast<double>(ca.v01.size());
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  const double ma01 = mean(ca.v01), mb01 = mean(cb.v01);
  const double var_a = covariance(ca.v10, ca.auc, ca.v10, ca.auc) / m + covariance(ca.v01, ma01, ca.v01, ma01) / n;
  const double var_b = covariance(cb.v10, cb.auc, cb.v10, cb.auc) / m + covariance(cb.v01, mb01, cb.v01, mb01) / n;
  const double cov = covariance(ca.v10, ca.auc, cb.v10, cb.auc) / m + covariance(ca.v01, ma01, cb.v01, mb01) / n;
  const double denom = var_a + var_b - 2.0 * cov;
  const double diff = ca.auc - cb.auc;
  PairedTest out{ca.auc, cb.auc, 0.0, 1.0};
  // Identical rankings give a zero difference and a zero (or rounding-level) variance.
  if (diff == 0.0 || denom <= 1e-15) return out;
  out.z = diff / std::sqrt(denom);
  out.p = two_sided_p(out.z);
  return out;
}

OperatingPoint evaluate_threshold(const ScoredSet& set, double threshold) {
  require_both_classes(set);
  std::size_t tp = 0, tn = 0;
  for (std::size_t i = 0; i < set.scores.size(); ++i) {
    const bool pred = set.scores[i] >= threshold;
    if (set.labels[i] && pred) ++tp;
    if (!set.labels[i] && !pred) ++tn;
  }
  return {threshold, static_cast<double>(tp) / static_cast<double>(set.positives()),
          static_cast<double>(tn) / static_cast<double>(set.negatives())};
}

OperatingPoint operating_point(const ScoredSet& set, Constraint constraint) {
  const auto curve = roc_curve(set);
  const bool by_spec = constraint.kind == Constraint::Kind::specificity;
  const char* axis = by_spec ? "specificity" : "sensitivity";
  if (!(constraint.value >= 0.0 && constraint.value <= 1.0))
    throw std::invalid_argument(std::string(axis) + " constraint " + std::to_string(constraint.value) +
                                " unachievable; closest achievable is " +
                                std::to_string(std::clamp(constraint.value, 0.0, 1.0)));
  // Points run from the largest threshold to the smallest.
  std::optional<OperatingPoint> chosen;
  for (const auto& pt : curve.points) {
    const double sens = pt.tpr, spec = 1.0 - pt.fpr;
    if (by_spec) {
      if (spec >= constraint.value) chosen = OperatingPoint{pt.threshold, sens, spec};
    } else if (sens >= constraint.value) {
      chosen = OperatingPoint{pt.threshold, sens, spec};
      break;
    }
  }
  if (!chosen) throw std::invalid_argument(std::string(axis) + " constraint unachievable");
  return *chosen;
}

std::vector<SeverityCurve> severity_roc_suite(std::span<const std::array<double, 4>> eye_scores,
                                              std::span<const int> grades, std::vector<std::string>* warnings) {
  if (eye_scores.size() != grades.size()) throw std::invalid_argument("severity suite: score/grade count mismatch");
  std::vector<SeverityCurve> out;
  for (int t = 1; t <= 4; ++t) {
    ScoredSet set;
    for (std::size_t i = 0; i < grades.size(); ++i) {
      if (grades[i] < 0 || grades[i] > 4) throw std::invalid_argument("severity suite: grade outside 0..4");
      set.scores.push_back(eye_scores[i][static_cast<std::size_t>(t - 1)]);
      set.labels.push_back(grades[i] >= t ? 1 : 0);
    }
    if (set.positives() == 0 || set.negatives() == 0) {
      if (warnings) warnings->push_back("grade >= " + std::to_string(t) + ": single class, curve omitted");
      continue;
    }
    out.push_back({t, roc_curve(set)});
  }
  return out;
}

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("normal_quantile: p must be in (0,1)");
  // Acklam's rational approximation, refined by one Halley step.
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                             1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                             6.680131188771972e+01,  -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                             -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                             3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p <= 1 - plow) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    const double q = std::sqrt(-2 * std::log(1 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2 * std::numbers::pi) * std::exp(x * x / 2);
  return x - u / (1 + x * u / 2);
}

double two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

std::string format_auc_ci(double auc_value, double lo, double hi, double level) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.3f (%.0f%% CI: %.3f-%.3f)", auc_value, level * 100.0, lo, hi);
  return buf;
}

std::string format_auc_ci(const RocCurve& curve) {
  if (curve.has_ci) return format_auc_ci(curve.auc, curve.ci_lo, curve.ci_hi, curve.level);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f (%.0f%% CI: n/a)", curve.auc, curve.level * 100.0);
  return buf;
}

std::string roc_points_csv(const RocCurve& curve) {
  std::string out = "threshold,fpr,tpr\n";
  char buf[96];
  for (const auto& p : curve.points) {
    if (std::isinf(p.threshold))
      std::snprintf(buf, sizeof buf, "inf,%.17g,%.17g\n", p.fpr, p.tpr);
    else
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", p.threshold, p.fpr, p.tpr);
    out += buf;
  }
  return out;
}

nlohmann::json roc_summary_json(const RocCurve& curve) {
  nlohmann::json j{{"auc", curve.auc},
                   {"positives", curve.positives},
                   {"negatives", curve.negatives},
                   {"formatted", format_auc_ci(curve)}};
  if (curve.has_ci) {
    j["delong_variance"] = curve.delong_variance;
    j["ci"] = {curve.ci_lo, curve.ci_hi};
    j["ci_level"] = curve.level;
  }
  return j;
}

}  // namespace retiscreen
