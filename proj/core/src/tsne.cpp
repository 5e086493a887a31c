#include "retiscreen/tsne.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "retiscreen/rng.hpp"

namespace retiscreen {

namespace {

void check_input(const std::vector<std::vector<double>>& features, double perplexity) {
  if (features.empty()) throw std::invalid_argument("tsne: no points");
  const auto dim = features.front().size();
  for (const auto& f : features) {
    if (f.size() != dim) throw std::invalid_argument("tsne: feature vectors differ in length");
    for (double v : f)
      if (!std::isfinite(v)) throw std::invalid_argument("tsne: non-finite feature");
  }
  const auto n = static_cast<double>(features.size());
  if (features.size() > 1 && (perplexity < 1.0 || perplexity > (n - 1.0) / 3.0))
    throw std::invalid_argument("tsne: perplexity must lie in [1, (N-1)/3]");
}

}  // namespace

std::vector<double> tsne_affinities(const std::vector<std::vector<double>>& features, double perplexity) {
  check_input(features, perplexity);
  const std::size_t n = features.size();
  std::vector<double> d2(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < features[i].size(); ++k) {
        const double d = features[i][k] - features[j][k];
        s += d * d;
      }
      d2[i * n + j] = d2[j * n + i] = s;
    }

  std::vector<double> p(n * n, 0.0);
  if (n == 1) return p;
  const double target = std::log(perplexity);
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < 50; ++iter) {
      // Shift by the smallest off-diagonal distance for stability.
      double dmin = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) dmin = std::min(dmin, d2[i * n + j]);
      double sum = 0.0, weighted = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] = j == i ? 0.0 : std::exp(-beta * (d2[i * n + j] - dmin));
        sum += row[j];
        weighted += row[j] * (d2[i * n + j] - dmin);
      }
      const double entropy = std::log(sum) + beta * weighted / sum;
      for (std::size_t j = 0; j < n; ++j) p[i * n + j] = row[j] / sum;
      const double diff = entropy - target;
      if (std::abs(diff) < 1e-4) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
      } else {
        hi = beta;
        beta = (beta + lo) / 2.0;
      }
    }
  }
  std::vector<double> sym(n * n);
  const double denom = 2.0 * static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sym[i * n + j] = (p[i * n + j] + p[j * n + i]) / denom;
  return sym;
}

TsneResult tsne(const std::vector<std::vector<double>>& features, const TsneConfig& config) {
  check_input(features, config.perplexity);
  if (config.iterations < 1) throw std::invalid_argument("tsne: iterations must be positive");
  const std::size_t n = features.size();
  TsneResult result;
  if (n == 1) {
    result.coordinates = {{0.0, 0.0}};
    result.kl_history.assign(static_cast<std::size_t>(config.iterations), 0.0);
    return result;
  }
  const auto P = tsne_affinities(features, config.perplexity);
  constexpr double kFloor = 1e-12;

  Rng rng(derive_seed(config.seed, {0x7453}));
  std::vector<double> y(2 * n), update(2 * n, 0.0), gains(2 * n, 1.0), grad(2 * n);
  for (auto& v : y) v = rng.normal(0.0, 1e-4);
  std::vector<double> num(n * n);

  for (int it = 0; it < config.iterations; ++it) {
    const double exag = it < config.exaggeration_iterations ? config.early_exaggeration : 1.0;
    const double momentum = it < config.exaggeration_iterations ? config.initial_momentum : config.final_momentum;
    double zsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      num[i * n + i] = 0.0;
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = y[2 * i] - y[2 * j], dy = y[2 * i + 1] - y[2 * j + 1];
        const double q = 1.0 / (1.0 + dx * dx + dy * dy);
        num[i * n + j] = num[j * n + i] = q;
        zsum += 2.0 * q;
      }
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double gx = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double pij = P[i * n + j];
        const double q = num[i * n + j];
        const double qij = std::max(q / zsum, kFloor);
        if (pij > 0.0) kl += pij * std::log(std::max(pij, kFloor) / qij);
        const double mult = (exag * pij - q / zsum) * q;
        gx += mult * (y[2 * i] - y[2 * j]);
        gy += mult * (y[2 * i + 1] - y[2 * j + 1]);
      }
      grad[2 * i] = 4.0 * gx;
      grad[2 * i + 1] = 4.0 * gy;
    }
    result.kl_history.push_back(kl);

    for (std::size_t k = 0; k < 2 * n; ++k) {
      const bool same_sign = (grad[k] > 0.0) == (update[k] > 0.0);
      gains[k] = same_sign ? std::max(gains[k] * 0.8, 0.01) : gains[k] + 0.2;
      update[k] = momentum * update[k] - config.learning_rate * gains[k] * grad[k];
      y[k] += update[k];
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += y[2 * i];
      my += y[2 * i + 1];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[2 * i] -= mx;
      y[2 * i + 1] -= my;
    }
  }
  result.coordinates.resize(n);
  for (std::size_t i = 0; i < n; ++i) result.coordinates[i] = {y[2 * i], y[2 * i + 1]};
  return result;
}

}  // namespace retiscreen
