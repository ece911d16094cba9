#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "cpprompt/tensor.hpp"

namespace cpprompt {

struct KMeansResult {
  Tensor centroids;                     ///< K×D
  std::vector<std::size_t> assignment;  ///< cluster of each point
  std::vector<double> objective;        ///< sum of squared distances after each Lloyd iteration
  std::size_t iterations = 0;
};

namespace detail {

inline double squared_distance(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t j = 0; j < d; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
  return s;
}

/// Index of the nearest centroid; ties go to the lower index.
inline std::size_t nearest(const double* p, const Tensor& centroids, double* dist = nullptr) {
  const std::size_t k = centroids.dim(0), d = centroids.dim(1);
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    const double dd = squared_distance(p, centroids.data().data() + c * d, d);
    if (dd < best_d) {
      best_d = dd;
      best = c;
    }
  }
  if (dist) *dist = best_d;
  return best;
}

}  // namespace detail

/// Lloyd's algorithm with seeded k-means++ initialisation. Runs until the
/// assignment stops changing or max_iters is reached. An empty cluster is
/// reseeded with the point farthest from its current centroid.
inline KMeansResult kmeans(const Tensor& points, std::size_t k, std::size_t max_iters, std::uint64_t seed) {
  if (!points.defined() || points.rank() != 2 || points.dim(0) == 0) throw ConfigError("kmeans: no points");
  const std::size_t n = points.dim(0), d = points.dim(1);
  if (k == 0) throw ConfigError("kmeans: K must be at least 1");
  if (k > n) {
    throw ConfigError("kmeans: K=" + std::to_string(k) + " exceeds the " + std::to_string(n) + " available points");
  }
  const double* pts = points.data().data();
  std::mt19937_64 rng(seed);

  // k-means++ seeding
  KMeansResult res;
  res.centroids = Tensor::zeros({k, d});
  double* cen = res.centroids.data().data();
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::vector<char> chosen(n, 0);
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  std::copy_n(pts + first * d, d, cen);
  chosen[first] = 1;
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], detail::squared_distance(pts + i * d, cen + (c - 1) * d, d));
      total += d2[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        pick = i;
        r -= d2[i];
        if (r < 0.0) break;
      }
    }
    if (pick == n) {  // every remaining point duplicates a centroid
      for (std::size_t i = 0; i < n && pick == n; ++i)
        if (!chosen[i]) pick = i;
    }
    chosen[pick] = 1;
    std::copy_n(pts + pick * d, d, cen + c * d);
  }

  res.assignment.assign(n, k);  // k = unassigned
  std::vector<double> dist(n);
  std::vector<std::size_t> counts(k);
  for (std::size_t it = 0; it < max_iters; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = detail::nearest(pts + i * d, res.centroids, &dist[i]);
      if (c != res.assignment[i]) {
        res.assignment[i] = c;
        changed = true;
      }
    }
    res.iterations = it + 1;
    if (!changed && it > 0) {
      double obj = 0.0;
      for (double v : dist) obj += v;
      res.objective.push_back(obj);
      break;
    }
    std::fill(counts.begin(), counts.end(), 0);
    std::fill(cen, cen + k * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[res.assignment[i]];
      for (std::size_t j = 0; j < d; ++j) cen[res.assignment[i] * d + j] += pts[i * d + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // reseed to the point farthest from its centroid
        std::size_t far = 0;
        for (std::size_t i = 1; i < n; ++i)
          if (dist[i] > dist[far]) far = i;
        std::copy_n(pts + far * d, d, cen + c * d);
        dist[far] = 0.0;
        continue;
      }
      for (std::size_t j = 0; j < d; ++j) cen[c * d + j] /= static_cast<double>(counts[c]);
    }
    double obj = 0.0;
    for (std::size_t i = 0; i < n; ++i) obj += detail::squared_distance(pts + i * d, cen + res.assignment[i] * d, d);
    res.objective.push_back(obj);
  }
  return res;
}

}  // namespace cpprompt
