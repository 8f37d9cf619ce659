#pragma once

// One-dimensional Gaussian mixture fitted by EM.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <spdlog/spdlog.h>

#include "neuralshdf/errors.hpp"
#include "neuralshdf/util.hpp"

namespace nshdf {

inline constexpr double kVarianceFloor = 1e-6;

struct Gmm1D {
  std::vector<double> means;
  std::vector<double> variances;
  std::vector<double> weights;

  int k() const { return static_cast<int>(means.size()); }

  /// log(w_c N(x | mu_c, var_c)) for every component.
  void component_log_density(double x, std::vector<double>& out) const {
    out.resize(means.size());
    for (std::size_t c = 0; c < means.size(); ++c) {
      const double d = x - means[c];
      out[c] = std::log(weights[c]) - 0.5 * std::log(2.0 * std::numbers::pi * variances[c]) -
               0.5 * d * d / variances[c];
    }
  }

  double log_likelihood(std::span<const double> values) const {
    std::vector<double> lp;
    double total = 0;
    for (double x : values) {
      component_log_density(x, lp);
      total += log_sum_exp(lp);
    }
    return total;
  }

  static double log_sum_exp(const std::vector<double>& v) {
    const double m = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(m)) return m;
    double s = 0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
  }
};

struct GmmFit {
  Gmm1D model;
  std::vector<double> log_likelihood;  // one entry per EM iteration, before its M-step
  int iterations = 0;
  bool converged = false;
};

namespace detail {

// k-means++ seeding followed by a few Lloyd steps.
inline std::vector<double> kmeans_pp_centers(std::span<const double> values, int k, Rng& rng) {
  std::vector<double> centers;
  centers.push_back(values[rng.below(values.size())]);
  std::vector<double> d2(values.size());
  while (static_cast<int>(centers.size()) < k) {
    double total = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (double c : centers) best = std::min(best, (values[i] - c) * (values[i] - c));
      d2[i] = best;
      total += best;
    }
    if (!(total > 0)) break;
    double pick = rng.uniform() * total;
    std::size_t chosen = values.size() - 1;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (pick < d2[i]) {
        chosen = i;
        break;
      }
      pick -= d2[i];
    }
    centers.push_back(values[chosen]);
  }
  std::sort(centers.begin(), centers.end());
  for (int it = 0; it < 10; ++it) {
    std::vector<double> sum(centers.size(), 0.0);
    std::vector<int> count(centers.size(), 0);
    for (double x : values) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < centers.size(); ++c) {
        if (std::abs(x - centers[c]) < std::abs(x - centers[best])) best = c;
      }
      sum[best] += x;
      ++count[best];
    }
    for (std::size_t c = 0; c < centers.size(); ++c) {
      if (count[c] > 0) centers[c] = sum[c] / count[c];
    }
  }
  return centers;
}

}  // namespace detail

/// EM from k-means++ centers. k is reduced (with a warning) to the number of
/// distinct values. Components are returned sorted by mean.
inline GmmFit fit_gmm(std::span<const double> values, int k, int max_iter = 200, double tol = 1e-8,
                      std::uint64_t seed = 0) {
  if (k < 1) throw ContractError("GMM needs k >= 1");
  if (values.empty()) throw ContractError("GMM needs at least one value");
  for (double v : values) {
    if (!std::isfinite(v)) throw ContractError("GMM values must be finite");
  }
  std::vector<double> distinct(values.begin(), values.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (static_cast<std::size_t>(k) > distinct.size()) {
    spdlog::warn("GMM: k={} exceeds {} distinct value(s); reducing k", k, distinct.size());
    k = static_cast<int>(distinct.size());
  }
  const std::size_t n = values.size();
  Rng rng(seed);
  const auto centers = detail::kmeans_pp_centers(values, k, rng);
  k = static_cast<int>(centers.size());

  // Initial responsibilities: hard assignment to the nearest center.
  Eigen::MatrixXd resp = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), k);
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    for (int c = 1; c < k; ++c) {
      if (std::abs(values[i] - centers[c]) < std::abs(values[i] - centers[best])) best = c;
    }
    resp(static_cast<Eigen::Index>(i), best) = 1.0;
  }

  GmmFit fit;
  Gmm1D& g = fit.model;
  g.means.assign(k, 0.0);
  g.variances.assign(k, 0.0);
  g.weights.assign(k, 0.0);
  auto m_step = [&] {
    for (int c = 0; c < k; ++c) {
      const double nk = resp.col(c).sum();
      if (!(nk > 0)) {
        // Empty component keeps its previous mean and gets the floor.
        g.weights[c] = 1e-300;
        g.variances[c] = kVarianceFloor;
        continue;
      }
      double mean = 0;
      for (std::size_t i = 0; i < n; ++i) mean += resp(static_cast<Eigen::Index>(i), c) * values[i];
      mean /= nk;
      double var = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = values[i] - mean;
        var += resp(static_cast<Eigen::Index>(i), c) * d * d;
      }
      g.means[c] = mean;
      g.variances[c] = std::max(var / nk, kVarianceFloor);
      g.weights[c] = nk / static_cast<double>(n);
    }
  };
  m_step();

  std::vector<double> lp;
  for (int it = 0; it < max_iter; ++it) {
    double ll = 0;
    for (std::size_t i = 0; i < n; ++i) {
      g.component_log_density(values[i], lp);
      const double lse = Gmm1D::log_sum_exp(lp);
      ll += lse;
      for (int c = 0; c < k; ++c) resp(static_cast<Eigen::Index>(i), c) = std::exp(lp[c] - lse);
    }
    fit.log_likelihood.push_back(ll);
    fit.iterations = it + 1;
    if (it > 0 && ll - fit.log_likelihood[it - 1] < tol) {
      fit.converged = true;
      break;
    }
    m_step();
  }

  // Sort components by mean; the weights are renormalized against rounding.
  std::vector<int> order(k);
  for (int c = 0; c < k; ++c) order[c] = c;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return g.means[a] < g.means[b]; });
  Gmm1D sorted;
  double wsum = 0;
  for (int c : order) wsum += g.weights[c];
  for (int c : order) {
    sorted.means.push_back(g.means[c]);
    sorted.variances.push_back(g.variances[c]);
    sorted.weights.push_back(g.weights[c] / wsum);
  }
  fit.model = std::move(sorted);
  return fit;
}

/// Posterior responsibilities, one row per value.
inline Eigen::MatrixXd soft_assign(const Gmm1D& g, std::span<const double> values) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(values.size()), g.k());
  std::vector<double> lp;
  for (std::size_t i = 0; i < values.size(); ++i) {
    g.component_log_density(values[i], lp);
    const double lse = Gmm1D::log_sum_exp(lp);
    for (int c = 0; c < g.k(); ++c) out(static_cast<Eigen::Index>(i), c) = std::exp(lp[c] - lse);
  }
  return out;
}

}  // namespace nshdf
